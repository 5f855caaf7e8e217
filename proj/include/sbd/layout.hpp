#pragma once

#include <cstddef>

#include "sbd/tensor.hpp"

namespace sbd {

// Partition of a length-L sequence into L / block_size contiguous blocks.
class BlockLayout {
 public:
  // Throws LayoutError unless 1 <= block_size <= length and block_size | length.
  BlockLayout(std::size_t length, std::size_t block_size);

  std::size_t length() const { return length_; }
  std::size_t block_size() const { return block_size_; }
  std::size_t n_blocks() const { return length_ / block_size_; }
  std::size_t block_of(std::size_t pos) const { return pos / block_size_; }
  std::size_t block_begin(std::size_t b) const { return b * block_size_; }
  std::size_t block_end(std::size_t b) const { return (b + 1) * block_size_; }

  // Block-causal rule: a position sees its own block and every earlier block.
  bool visible(std::size_t query_pos, std::size_t key_pos) const {
    return block_of(key_pos) <= block_of(query_pos);
  }

  bool operator==(const BlockLayout&) const = default;

 private:
  std::size_t length_;
  std::size_t block_size_;
};

// allow(i, j) = block(j) <= block(i).
BoolMatrix build_block_mask(std::size_t length, std::size_t block_size);

// [2L x 2L] mask for single-pass training. Rows/cols [0, L) are the noisy
// stream and [L, 2L) the clean stream:
//   noisy i -> noisy j      iff block(j) == block(i)
//   noisy i -> clean j + L  iff block(j) <  block(i)
//   clean i + L -> clean j + L iff block(j) <= block(i)
// Clean rows never see noisy columns.
BoolMatrix build_two_stream_mask(std::size_t length, std::size_t block_size);

}  // namespace sbd
