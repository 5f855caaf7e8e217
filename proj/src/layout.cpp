#include "sbd/layout.hpp"

#include <string>

namespace sbd {

BlockLayout::BlockLayout(std::size_t length, std::size_t block_size)
    : length_(length), block_size_(block_size) {
  if (length == 0 || block_size == 0 || block_size > length || length % block_size != 0) {
    throw LayoutError("block size " + std::to_string(block_size) +
                      " must divide sequence length " + std::to_string(length));
  }
}

BoolMatrix build_block_mask(std::size_t length, std::size_t block_size) {
  const BlockLayout layout(length, block_size);
  BoolMatrix m(length, length);
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = 0; j < length; ++j) m.set(i, j, layout.visible(i, j));
  return m;
}

BoolMatrix build_two_stream_mask(std::size_t length, std::size_t block_size) {
  const BlockLayout layout(length, block_size);
  const std::size_t L = length;
  BoolMatrix m(2 * L, 2 * L);
  for (std::size_t i = 0; i < L; ++i) {
    const std::size_t bi = layout.block_of(i);
    for (std::size_t j = 0; j < L; ++j) {
      const std::size_t bj = layout.block_of(j);
      m.set(i, j, bj == bi);
      m.set(i, j + L, bj < bi);
      m.set(i + L, j + L, bj <= bi);
    }
  }
  return m;
}

}  // namespace sbd
