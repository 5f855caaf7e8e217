#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sbd/autodiff.hpp"
#include "sbd/params.hpp"
#include "sbd/rng.hpp"
#include "sbd/transformer.hpp"

namespace sbd {

// Linear masking schedule alpha(t) = 1 - t, so the NELBO weight
// -alpha'(t) / (1 - alpha(t)) is 1 / t. Sampled t is clamped to [t_min, 1].
class NoiseSchedule {
 public:
  explicit NoiseSchedule(double t_min = 1e-3);

  double alpha(double t) const { return 1.0 - t; }
  double alpha_prime(double /*t*/) const { return -1.0; }
  double weight(double t) const { return -alpha_prime(t) / (1.0 - alpha(t)); }
  double t_min() const { return t_min_; }

  // t = t_min + (1 - t_min) * u; one draw.
  double sample_t(Rng& rng) const { return t_min_ + (1.0 - t_min_) * rng.uniform(); }

 private:
  double t_min_;
};

// Each position independently becomes `mask_id` with probability 1 - alpha(t)
// (one uniform draw per position, in order). x must not contain the mask id.
std::vector<Token> forward_mask(std::span<const Token> x, double t, const NoiseSchedule& schedule,
                                Token mask_id, Rng& rng);

struct NoisedSequence {
  std::vector<Token> noisy;
  double t = 0.0;
};

// Draws t, then the mask pattern.
NoisedSequence corrupt(std::span<const Token> x, const NoiseSchedule& schedule, Token mask_id,
                       Rng& rng);

enum class LossPath {
  kTwoStream,  // one forward over noisy ++ clean with the two-stream mask
  kBlockLoop,  // reference: one forward per block over clean prefix ++ noisy block
};

// Per-token block NELBO of one corrupted sequence:
//   (1/L) * sum_b sum_{i in b, masked} weight(t) * CE(p(.|x_t^b, x^{<b})_i, x_i)
template <typename T>
ad::Var nelbo_graph(ad::Tape<T>& tape, const Transformer<T>& model, std::span<const Token> clean,
                    const NoisedSequence& noised, std::size_t block_size,
                    const NoiseSchedule& schedule, LossPath path = LossPath::kTwoStream);

// corrupt() followed by nelbo_graph() on an inference tape.
template <typename T>
double nelbo_loss(const Transformer<T>& model, std::span<const Token> x, std::size_t block_size,
                  const NoiseSchedule& schedule, Rng& rng, LossPath path = LossPath::kTwoStream);

enum class BlockMix {
  kBimodal,  // B_global with probability lambda, else B_draft
  kUniform,  // uniform over B_draft * 4^k up to B_global (B_global always included)
};

struct TrainConfig {
  double lambda = 0.1;
  std::size_t block_draft = 4;
  std::size_t block_global = 0;  // 0 means the sequence length
  BlockMix mix = BlockMix::kBimodal;
  std::size_t batch = 16;
  std::int64_t steps = 1000;
  std::uint64_t seed = 0;
  double t_min = 1e-3;
  AdamWConfig optim;
  std::int64_t checkpoint_every = 0;  // 0: only at the end
  // Left-to-right objective for the scorer model: block size 1 with every
  // position masked (t = 1), which is the mean next-token NLL. No draws.
  bool autoregressive = false;

  std::size_t global_block(std::size_t length) const {
    return block_global == 0 ? length : block_global;
  }
  // Throws ConfigError/LayoutError for lambda outside [0,1], bad block sizes, etc.
  void validate(std::size_t length) const;
};

// Candidate block sizes of the uniform mixture.
std::vector<std::size_t> uniform_mixture_sizes(const TrainConfig& cfg, std::size_t length);

// Draws a training block size. The bimodal draw consumes one uniform unless
// lambda is exactly 0 or 1 (a point mass needs no randomness).
std::size_t sample_block_size(const TrainConfig& cfg, std::size_t length, Rng& rng);

struct SequenceLoss {
  double loss = 0.0;
  std::size_t block_size = 0;
  double t = 0.0;
};

struct MixedLoss {
  ad::Var loss;  // mean over the batch
  std::vector<SequenceLoss> parts;
};

// Per sequence: block size draw, then corrupt(), then nelbo_graph().
// With cfg.autoregressive every sequence uses block size 1 and t = 1.
template <typename T>
MixedLoss mixed_loss(ad::Tape<T>& tape, const Transformer<T>& model,
                     const std::vector<std::vector<Token>>& batch, const TrainConfig& cfg,
                     const NoiseSchedule& schedule, Rng& rng,
                     LossPath path = LossPath::kTwoStream);

struct TrainStepRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<SequenceLoss> sequences;
};

// Training progress that a checkpoint must carry to resume bit-exactly.
struct TrainState {
  std::int64_t step = 0;
  Rng rng;
};

using BatchSource = std::function<std::vector<std::vector<Token>>(std::int64_t step)>;

struct TrainHooks {
  std::function<void(const TrainStepRecord&)> on_step;
  // Called every checkpoint_every steps and after the final step.
  std::function<void(std::int64_t step, const TrainState&)> on_checkpoint;
};

TrainState initial_train_state(const TrainConfig& cfg);

// Runs cfg.steps updates of mixed_loss -> backward -> adamw_step from `state`.
// A non-finite loss aborts with TrainingError naming the step, t and block size.
template <typename T>
std::vector<TrainStepRecord> train_loop(Transformer<T>& model, const BatchSource& data,
                                        const TrainConfig& cfg, TrainState& state,
                                        const TrainHooks& hooks = {});

}  // namespace sbd
