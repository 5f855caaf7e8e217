#include "sbd/train.hpp"

#include <cmath>
#include <sstream>

namespace sbd {

NoiseSchedule::NoiseSchedule(double t_min) : t_min_(t_min) {
  if (!(t_min > 0.0 && t_min < 1.0)) throw ConfigError("t_min must lie in (0, 1)");
}

std::vector<Token> forward_mask(std::span<const Token> x, double t, const NoiseSchedule& schedule,
                                Token mask_id, Rng& rng) {
  if (t < 0.0 || t > 1.0) throw ConfigError("noise level t must lie in [0, 1]");
  const double p_mask = 1.0 - schedule.alpha(t);
  std::vector<Token> out(x.begin(), x.end());
  for (auto& tok : out) {
    if (tok == mask_id) throw UsageError("forward_mask: input already contains the mask token");
    if (rng.uniform() < p_mask) tok = mask_id;
  }
  return out;
}

NoisedSequence corrupt(std::span<const Token> x, const NoiseSchedule& schedule, Token mask_id,
                       Rng& rng) {
  NoisedSequence n;
  n.t = schedule.sample_t(rng);
  n.noisy = forward_mask(x, n.t, schedule, mask_id, rng);
  return n;
}

template <typename T>
ad::Var nelbo_graph(ad::Tape<T>& tape, const Transformer<T>& model, std::span<const Token> clean,
                    const NoisedSequence& noised, std::size_t block_size,
                    const NoiseSchedule& schedule, LossPath path) {
  const std::size_t L = clean.size();
  const BlockLayout layout(L, block_size);
  if (noised.noisy.size() != L) throw DimensionError("nelbo: noisy/clean length mismatch");
  if (L > model.max_len()) throw CapacityError("nelbo: sequence longer than max_len");
  const Token mask = model.mask_id();
  const double w = schedule.weight(noised.t) / static_cast<double>(L);

  std::vector<int> targets(clean.begin(), clean.end());
  std::vector<double> weights(L, 0.0);
  for (std::size_t i = 0; i < L; ++i)
    if (noised.noisy[i] == mask) weights[i] = w;

  if (path == LossPath::kTwoStream) {
    if (block_size == L) {
      // Noisy rows never look at the clean stream when there is one block.
      std::vector<int> pos(L);
      for (std::size_t i = 0; i < L; ++i) pos[i] = static_cast<int>(i);
      auto out = model.forward(tape, noised.noisy, pos, build_block_mask(L, L), nullptr, 0, L);
      return ad::cross_entropy(tape, out.logits, targets, weights);
    }
    std::vector<Token> tokens(noised.noisy);
    tokens.insert(tokens.end(), clean.begin(), clean.end());
    std::vector<int> pos(2 * L);
    for (std::size_t i = 0; i < 2 * L; ++i) pos[i] = static_cast<int>(i % L);
    auto out = model.forward(tape, tokens, pos, build_two_stream_mask(L, block_size), nullptr, 0, L);
    return ad::cross_entropy(tape, out.logits, targets, weights);
  }

  // Reference path: each block conditioned on the clean prefix, separately.
  ad::Var total = tape.constant(Tensor<T>::scalar(T(0)));
  for (std::size_t b = 0; b < layout.n_blocks(); ++b) {
    const std::size_t lo = layout.block_begin(b), hi = layout.block_end(b);
    bool any = false;
    for (std::size_t i = lo; i < hi; ++i) any = any || weights[i] != 0.0;
    if (!any) continue;
    std::vector<Token> tokens(clean.begin(), clean.begin() + lo);
    tokens.insert(tokens.end(), noised.noisy.begin() + lo, noised.noisy.begin() + hi);
    std::vector<int> pos(hi);
    BoolMatrix allow(hi, hi);
    for (std::size_t i = 0; i < hi; ++i) {
      pos[i] = static_cast<int>(i);
      for (std::size_t j = 0; j < hi; ++j) allow.set(i, j, layout.visible(i, j));
    }
    auto out = model.forward(tape, tokens, pos, allow, nullptr, lo, hi);
    std::span<const int> tg(targets.data() + lo, hi - lo);
    std::span<const double> wt(weights.data() + lo, hi - lo);
    total = ad::add(tape, total, ad::cross_entropy(tape, out.logits, tg, wt));
  }
  return total;
}

template <typename T>
double nelbo_loss(const Transformer<T>& model, std::span<const Token> x, std::size_t block_size,
                  const NoiseSchedule& schedule, Rng& rng, LossPath path) {
  BlockLayout(x.size(), block_size);
  const NoisedSequence noised = corrupt(x, schedule, model.mask_id(), rng);
  ad::Tape<T> tape(/*record=*/false);
  return static_cast<double>(
      tape.value(nelbo_graph(tape, model, x, noised, block_size, schedule, path)).item());
}

void TrainConfig::validate(std::size_t length) const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (batch == 0) throw ConfigError("batch must be positive");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (!(t_min > 0.0 && t_min < 1.0)) throw ConfigError("t_min must lie in (0, 1)");
  BlockLayout(length, block_draft);
  BlockLayout(length, global_block(length));
  if (mix == BlockMix::kUniform) {
    for (std::size_t b : uniform_mixture_sizes(*this, length)) BlockLayout(length, b);
  }
}

std::vector<std::size_t> uniform_mixture_sizes(const TrainConfig& cfg, std::size_t length) {
  const std::size_t global = cfg.global_block(length);
  std::vector<std::size_t> sizes;
  for (std::size_t b = cfg.block_draft; b < global; b *= 4) sizes.push_back(b);
  sizes.push_back(global);
  return sizes;
}

std::size_t sample_block_size(const TrainConfig& cfg, std::size_t length, Rng& rng) {
  if (cfg.mix == BlockMix::kUniform) {
    const auto sizes = uniform_mixture_sizes(cfg, length);
    return sizes[rng.below(sizes.size())];
  }
  if (cfg.lambda <= 0.0) return cfg.block_draft;
  if (cfg.lambda >= 1.0) return cfg.global_block(length);
  return rng.uniform() < cfg.lambda ? cfg.global_block(length) : cfg.block_draft;
}

template <typename T>
MixedLoss mixed_loss(ad::Tape<T>& tape, const Transformer<T>& model,
                     const std::vector<std::vector<Token>>& batch, const TrainConfig& cfg,
                     const NoiseSchedule& schedule, Rng& rng, LossPath path) {
  if (batch.empty()) throw UsageError("mixed_loss: empty batch");
  MixedLoss out;
  ad::Var total;
  for (const auto& x : batch) {
    std::size_t block = 1;
    NoisedSequence noised{std::vector<Token>(x.size(), model.mask_id()), 1.0};
    if (!cfg.autoregressive) {
      block = sample_block_size(cfg, x.size(), rng);
      noised = corrupt(x, schedule, model.mask_id(), rng);
    }
    ad::Var l = nelbo_graph(tape, model, x, noised, block, schedule, path);
    out.parts.push_back({static_cast<double>(tape.value(l).item()), block, noised.t});
    total = total.valid() ? ad::add(tape, total, l) : l;
  }
  out.loss = ad::scale(tape, total, 1.0 / static_cast<double>(batch.size()));
  return out;
}

TrainState initial_train_state(const TrainConfig& cfg) {
  return TrainState{0, Rng(derive_seed(cfg.seed, "train"))};
}

template <typename T>
std::vector<TrainStepRecord> train_loop(Transformer<T>& model, const BatchSource& data,
                                        const TrainConfig& cfg, TrainState& state,
                                        const TrainHooks& hooks) {
  const NoiseSchedule schedule(cfg.t_min);
  std::vector<TrainStepRecord> curve;
  while (state.step < cfg.steps) {
    const auto batch = data(state.step);
    if (batch.empty()) throw UsageError("data source returned an empty batch");
    cfg.validate(batch.front().size());

    ad::Tape<T> tape;
    MixedLoss ml = mixed_loss(tape, model, batch, cfg, schedule, state.rng);
    for (const auto& part : ml.parts) {
      if (!std::isfinite(part.loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << state.step << " (t=" << part.t
            << ", block_size=" << part.block_size << ")";
        throw TrainingError(msg.str());
      }
    }
    ad::backward(tape, ml.loss, model.params());
    const double lr = scheduled_lr(cfg.optim, state.step);
    adamw_step(model.params(), cfg.optim, lr);

    TrainStepRecord rec{state.step, static_cast<double>(tape.value(ml.loss).item()), lr,
                        std::move(ml.parts)};
    ++state.step;
    if (hooks.on_step) hooks.on_step(rec);
    curve.push_back(std::move(rec));
    const bool periodic = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
    if (hooks.on_checkpoint && (periodic || state.step == cfg.steps)) {
      hooks.on_checkpoint(state.step, state);
    }
  }
  return curve;
}

#define SBD_INSTANTIATE(T)                                                                       \
  template ad::Var nelbo_graph<T>(ad::Tape<T>&, const Transformer<T>&, std::span<const Token>,   \
                                  const NoisedSequence&, std::size_t, const NoiseSchedule&,      \
                                  LossPath);                                                     \
  template double nelbo_loss<T>(const Transformer<T>&, std::span<const Token>, std::size_t,      \
                                const NoiseSchedule&, Rng&, LossPath);                           \
  template MixedLoss mixed_loss<T>(ad::Tape<T>&, const Transformer<T>&,                          \
                                   const std::vector<std::vector<Token>>&, const TrainConfig&,   \
                                   const NoiseSchedule&, Rng&, LossPath);                        \
  template std::vector<TrainStepRecord> train_loop<T>(Transformer<T>&, const BatchSource&,       \
                                                      const TrainConfig&, TrainState&,           \
                                                      const TrainHooks&);

SBD_INSTANTIATE(float)
SBD_INSTANTIATE(double)
#undef SBD_INSTANTIATE

}  // namespace sbd
