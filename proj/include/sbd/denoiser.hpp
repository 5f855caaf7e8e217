#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>

#include "sbd/layout.hpp"
#include "sbd/tensor.hpp"

namespace sbd {

using Token = int;

// State a denoiser keeps about already-finalized positions of one sequence.
// Append-only: entries are never recomputed or mutated once written.
class DecodeCache {
 public:
  virtual ~DecodeCache() = default;
  virtual std::size_t length() const = 0;
};

// A network x_theta that maps a (partially masked) token sequence to
// per-position distributions over the V data symbols. The mask token id is V.
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const Denoiser& other) : nfe_(other.nfe()) {}
  Denoiser& operator=(const Denoiser& other) {
    nfe_.store(other.nfe(), std::memory_order_relaxed);
    return *this;
  }
  virtual ~Denoiser() = default;

  virtual int vocab_size() const = 0;
  Token mask_id() const { return vocab_size(); }
  virtual std::size_t max_len() const = 0;
  virtual std::unique_ptr<DecodeCache> new_cache() const = 0;

  // One function evaluation (one NFE). `tokens` sit at absolute positions
  // [cache.length(), cache.length() + tokens.size()) and attend under
  // `layout`'s block-causal rule to the cached prefix and to each other.
  // Returns data-symbol logits [n_out x V] for the last n_out rows, then
  // appends the first `append` rows to the cache.
  Tensor<double> evaluate(DecodeCache& cache, std::span<const Token> tokens,
                          const BlockLayout& layout, std::size_t append,
                          std::size_t n_out) const;

  // evaluate() on a fresh cache returning every row.
  Tensor<double> evaluate_full(std::span<const Token> tokens, const BlockLayout& layout) const;

  std::uint64_t nfe() const { return nfe_.load(std::memory_order_relaxed); }
  void reset_nfe() const { nfe_.store(0, std::memory_order_relaxed); }

 protected:
  // Called after argument validation; n_out and append are within range.
  virtual Tensor<double> do_evaluate(DecodeCache& cache, std::span<const Token> tokens,
                                     const BlockLayout& layout, std::size_t append,
                                     std::size_t n_out) const = 0;

 private:
  mutable std::atomic<std::uint64_t> nfe_{0};
};

}  // namespace sbd
