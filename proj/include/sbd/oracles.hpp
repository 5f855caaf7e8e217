#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sbd/denoiser.hpp"
#include "sbd/sampler.hpp"
#include "sbd/transformer.hpp"

namespace sbd::oracles {

// Logits for position `pos` given the sequence as that position sees it:
// positions outside its visible blocks are replaced by the mask id.
using LogitRule =
    std::function<std::vector<double>(std::span<const Token> context, std::size_t pos)>;

// Denoiser defined by a pure rule; its cache stores finalized tokens.
class RuleDenoiser final : public Denoiser {
 public:
  RuleDenoiser(int vocab_size, std::size_t max_len, LogitRule rule);

  int vocab_size() const override { return vocab_; }
  std::size_t max_len() const override { return max_len_; }
  std::unique_ptr<DecodeCache> new_cache() const override;

 protected:
  Tensor<double> do_evaluate(DecodeCache& cache, std::span<const Token> tokens,
                             const BlockLayout& layout, std::size_t append,
                             std::size_t n_out) const override;

 private:
  int vocab_;
  std::size_t max_len_;
  LogitRule rule_;
};

// Equal logits everywhere.
RuleDenoiser uniform_denoiser(int vocab_size, std::size_t max_len);
// Probability 1 on onehot_token(pos, V) at every position.
RuleDenoiser onehot_denoiser(int vocab_size, std::size_t max_len);
Token onehot_token(std::size_t pos, int vocab_size);
// One-hot on the input token where unmasked, uniform where masked.
RuleDenoiser copy_denoiser(int vocab_size, std::size_t max_len);
// Smooth logits that depend on the position and on every visible token.
RuleDenoiser context_denoiser(int vocab_size, std::size_t max_len, std::uint64_t seed);

// Exact output distribution of one ancestral stage with one token per step
// (steps_per_block = 0) from an all-mask start.
std::map<std::vector<Token>, double> enumerate_stage(const Denoiser& model, std::size_t length,
                                                     const StageConfig& cfg);

double total_variation(const std::map<std::vector<Token>, double>& p,
                       const std::map<std::vector<Token>, double>& q);

// Left-to-right sampling with a causal mask and no cache: token i is drawn
// from a full forward over x[0, i) ++ [mask].
std::vector<Token> reference_ar_sample(const Denoiser& model, std::size_t length,
                                       double temperature, double nucleus_p, Rng& rng);

// Full-sequence masked diffusion with full recompute at every step and the
// same selection and draw conventions as the ancestral block sampler.
std::vector<Token> reference_mdlm_sample(const Denoiser& model, std::size_t length,
                                         const StageConfig& cfg, Rng& rng);

struct GradCheckReport {
  std::size_t parameters = 0;
  std::size_t entries = 0;
  std::size_t failed_parameters = 0;
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t zero_gradient_parameters = 0;
  double max_zero_fd_norm = 0.0;  // max of both norms over vanishing tensors
};

// Central differences of the two-stream NELBO of a random 64-bit denoiser.
// Per parameter tensor: rel = |g_ad - g_fd|_2 / (|g_ad|_2 + |g_fd|_2).
// Tensors whose gradient vanishes (attention key biases shift every score
// of a query equally) pass instead when both norms are at most zero_tol;
// their relative error is rounding noise over zero.
GradCheckReport gradient_check(const DenoiserConfig& cfg, std::size_t block_size,
                               std::uint64_t seed, double h = 1e-5, double tol = 1e-4,
                               double zero_tol = 1e-8);

struct CacheCheckReport {
  bool bit_exact = true;
  double max_abs_diff = 0.0;
  std::size_t blocks = 0;
};

// Full forward under the block mask vs. block-by-block cached forwards.
CacheCheckReport cache_equivalence(const Denoiser& model, std::span<const Token> x,
                                   std::size_t block_size);

// generate() with and without the cache under copies of one rng stream.
bool sampler_cache_equivalence(const Denoiser& model, const StagePlan& plan, std::uint64_t seed);

}  // namespace sbd::oracles
