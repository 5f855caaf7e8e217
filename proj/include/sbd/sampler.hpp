#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sbd/denoiser.hpp"
#include "sbd/layout.hpp"
#include "sbd/rng.hpp"

namespace sbd {

enum class UnmaskPolicy { kAncestral, kConfidenceTopK };
enum class RemaskPolicy { kSnapshot, kPosthoc, kRandom };

std::string to_string(UnmaskPolicy p);
std::string to_string(RemaskPolicy p);
UnmaskPolicy parse_unmask_policy(const std::string& s);
RemaskPolicy parse_remask_policy(const std::string& s);

struct StageConfig {
  std::size_t block_size = 4;
  double gamma = 0.0;  // re-masking ratio applied before this stage; unused for stage 1
  // Denoising steps per block; 0 commits one token per step, i.e. T equals
  // the number of masked tokens in the block.
  std::size_t steps_per_block = 0;
  UnmaskPolicy unmask = UnmaskPolicy::kAncestral;
  RemaskPolicy remask = RemaskPolicy::kSnapshot;
  double temperature = 1.0;
  double nucleus_p = 0.9;
};

// Ordered stages with non-decreasing block sizes, each dividing L. Equal
// sizes allow a same-scope revision pass.
class StagePlan {
 public:
  StagePlan(std::size_t length, std::vector<StageConfig> stages);

  std::size_t length() const { return length_; }
  const std::vector<StageConfig>& stages() const { return stages_; }
  std::size_t size() const { return stages_.size(); }
  const StageConfig& operator[](std::size_t k) const { return stages_[k]; }

 private:
  std::size_t length_;
  std::vector<StageConfig> stages_;
};

// Snapshot confidences: the probability each committed token had at the
// denoising step that committed it. Masked positions are unset.
class ConfidenceTrace {
 public:
  explicit ConfidenceTrace(std::size_t length = 0);

  std::size_t size() const { return values_.size(); }
  bool is_set(std::size_t i) const { return stage_[i] >= 0; }
  double value(std::size_t i) const;
  // Stage index that last wrote position i, or -1.
  int stage(std::size_t i) const { return stage_[i]; }
  bool fully_set() const;

  void set(std::size_t i, double value, int stage);
  void unset(std::size_t i);

  bool operator==(const ConfidenceTrace&) const = default;

 private:
  std::vector<double> values_;
  std::vector<int> stage_;
};

struct DraftState {
  std::vector<Token> x;
  ConfidenceTrace trace;
  std::uint64_t nfe_count = 0;
  int stage = -1;  // index of the last completed stage
};

// Start of generation: all positions masked, trace unset.
DraftState empty_draft(std::size_t length, Token mask_id);

// softmax(logits / temperature) in double precision.
std::vector<double> tempered_probs(std::span<const double> logits, double temperature);

// The distribution draw_token() samples from: probabilities outside the
// nucleus zeroed, the rest renormalized.
std::vector<double> nucleus_distribution(std::span<const double> probs, double nucleus_p);

// Nucleus draw: tokens sorted by probability (ties: lower id first), the
// shortest prefix with mass >= p kept, renormalized, one uniform consumed.
Token draw_token(std::span<const double> probs, double nucleus_p, Rng& rng);

struct BlockResult {
  std::size_t nfes = 0;
  std::size_t committed = 0;
};

// Iteratively denoises one block. `prefix` is the finished sequence before
// the block; with a cache, the part of it not yet cached is appended by the
// block's first forward. cache == nullptr recomputes prefix ++ block at every
// step instead. Pre-filled positions never change and keep their confidence;
// committed positions get conf[i] = tempered probability of the chosen token.
//
// Per step (quota = ceil(masked / steps_left)):
//   ancestral: if quota < masked, pick quota positions by partial
//     Fisher-Yates over the ascending masked list; then one token draw per
//     picked position in ascending order.
//   confidence-topk: one token draw per masked position in ascending order;
//     the quota positions with the highest max-probability commit.
BlockResult sample_block(const Denoiser& model, DecodeCache* cache, std::span<const Token> prefix,
                         std::span<Token> block, std::span<double> conf,
                         const BlockLayout& layout, const StageConfig& cfg, Rng& rng);

struct StageMetrics {
  int stage = 0;
  std::size_t block_size = 0;
  double gamma = 0.0;
  std::size_t masked_count = 0;  // masked positions when the stage started
  std::size_t nfes = 0;          // denoising forwards plus post-hoc scoring
  std::size_t posthoc_nfes = 0;
  std::vector<std::size_t> block_masked;
  std::vector<std::size_t> block_nfes;
};

struct SamplerOptions {
  bool use_cache = true;
};

// One stage of block diffusion over state.x with a fresh cache.
StageMetrics run_stage(const Denoiser& model, DraftState& state, const StageConfig& cfg,
                       int stage_index, Rng& rng, const SamplerOptions& options = {});

// Number of positions re-masked for ratio gamma: floor(gamma * L), with a
// 1e-9 guard so gamma = 0.3, L = 10 yields 3.
std::size_t remask_count(double gamma, std::size_t length);

// Sets floor(gamma L) positions of x to the mask and unsets their trace.
//   snapshot: the smallest trace values (ties: lower index first)
//   posthoc:  the smallest posthoc_confidence() values, same tie rule
//   random:   uniform subset, partial Fisher-Yates over 0..L-1
// Returns the chosen indices in ascending order.
// `model` is needed only by the post-hoc policy.
std::vector<std::size_t> remask(std::vector<Token>& x, ConfidenceTrace& trace, double gamma,
                                RemaskPolicy policy, Token mask_id, const Denoiser* model,
                                std::size_t posthoc_block_size, Rng& rng);

// One forward over the finished x under the block layout; s_i is the
// softmax probability of x_i at position i.
std::vector<double> posthoc_confidence(const Denoiser& model, std::span<const Token> x,
                                       const BlockLayout& layout);

struct GenerationResult {
  std::vector<Token> x;
  ConfidenceTrace trace;
  std::vector<StageMetrics> stages;
  std::uint64_t total_nfes = 0;
};

// Multi-stage draft-then-revise generation. All draws come from `rng` in
// stage -> (remask) -> block -> step -> position order.
GenerationResult generate(const Denoiser& model, const StagePlan& plan, Rng& rng,
                          const SamplerOptions& options = {});

// Continues from an existing draft with stages [first_stage, plan.size()).
GenerationResult generate_from(const Denoiser& model, const StagePlan& plan, DraftState state,
                               std::size_t first_stage, Rng& rng,
                               const SamplerOptions& options = {});

}  // namespace sbd
