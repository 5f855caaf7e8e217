#include "sbd/denoiser.hpp"

#include <string>

namespace sbd {

Tensor<double> Denoiser::evaluate(DecodeCache& cache, std::span<const Token> tokens,
                                  const BlockLayout& layout, std::size_t append,
                                  std::size_t n_out) const {
  const std::size_t c = cache.length();
  const std::size_t n = tokens.size();
  if (c + n > max_len()) {
    throw CapacityError("forward over positions [" + std::to_string(c) + ", " +
                        std::to_string(c + n) + ") exceeds max_len " + std::to_string(max_len()));
  }
  if (c + n > layout.length()) {
    throw LayoutError("forward runs past the layout length " + std::to_string(layout.length()));
  }
  if (append > n || n_out > n) throw UsageError("evaluate: append/n_out exceed the row count");
  for (Token t : tokens) {
    if (t < 0 || t > mask_id()) {
      throw IndexError("token id " + std::to_string(t) + " outside [0, " +
                       std::to_string(mask_id()) + "]");
    }
  }
  nfe_.fetch_add(1, std::memory_order_relaxed);
  return do_evaluate(cache, tokens, layout, append, n_out);
}

Tensor<double> Denoiser::evaluate_full(std::span<const Token> tokens,
                                       const BlockLayout& layout) const {
  auto cache = new_cache();
  return evaluate(*cache, tokens, layout, 0, tokens.size());
}

}  // namespace sbd
