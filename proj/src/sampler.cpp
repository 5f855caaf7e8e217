#include "sbd/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sbd/errors.hpp"

namespace sbd {

std::string to_string(UnmaskPolicy p) {
  return p == UnmaskPolicy::kAncestral ? "ancestral" : "confidence-topk";
}

std::string to_string(RemaskPolicy p) {
  switch (p) {
    case RemaskPolicy::kSnapshot: return "snapshot";
    case RemaskPolicy::kPosthoc: return "posthoc";
    case RemaskPolicy::kRandom: return "random";
  }
  return "?";
}

UnmaskPolicy parse_unmask_policy(const std::string& s) {
  if (s == "ancestral") return UnmaskPolicy::kAncestral;
  if (s == "confidence-topk") return UnmaskPolicy::kConfidenceTopK;
  throw ConfigError("unknown unmask policy '" + s + "' (ancestral|confidence-topk)");
}

RemaskPolicy parse_remask_policy(const std::string& s) {
  if (s == "snapshot") return RemaskPolicy::kSnapshot;
  if (s == "posthoc") return RemaskPolicy::kPosthoc;
  if (s == "random") return RemaskPolicy::kRandom;
  throw ConfigError("unknown remask policy '" + s + "' (snapshot|posthoc|random)");
}

StagePlan::StagePlan(std::size_t length, std::vector<StageConfig> stages)
    : length_(length), stages_(std::move(stages)) {
  if (stages_.empty()) throw ConfigError("stage plan has no stages");
  for (std::size_t k = 0; k < stages_.size(); ++k) {
    const auto& s = stages_[k];
    BlockLayout(length_, s.block_size);
    if (k > 0 && s.block_size < stages_[k - 1].block_size) {
      throw ConfigError("stage block sizes must not decrease (stage " + std::to_string(k + 1) + ")");
    }
    if (!(s.gamma >= 0.0 && s.gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (!(s.temperature > 0.0) || !std::isfinite(s.temperature)) {
      throw ConfigError("temperature must be positive");
    }
    if (!(s.nucleus_p > 0.0 && s.nucleus_p <= 1.0)) throw ConfigError("nucleus_p must lie in (0, 1]");
  }
}

ConfidenceTrace::ConfidenceTrace(std::size_t length) : values_(length, 0.0), stage_(length, -1) {}

double ConfidenceTrace::value(std::size_t i) const {
  if (!is_set(i)) throw StateError("confidence at position " + std::to_string(i) + " is unset");
  return values_[i];
}

bool ConfidenceTrace::fully_set() const {
  return std::all_of(stage_.begin(), stage_.end(), [](int s) { return s >= 0; });
}

void ConfidenceTrace::set(std::size_t i, double value, int stage) {
  if (!(value > 0.0 && value <= 1.0)) {
    throw InvariantError("confidence " + std::to_string(value) + " outside (0, 1]");
  }
  values_[i] = value;
  stage_[i] = stage;
}

void ConfidenceTrace::unset(std::size_t i) {
  values_[i] = 0.0;
  stage_[i] = -1;
}

DraftState empty_draft(std::size_t length, Token mask_id) {
  DraftState s;
  s.x.assign(length, mask_id);
  s.trace = ConfidenceTrace(length);
  return s;
}

std::vector<double> tempered_probs(std::span<const double> logits, double temperature) {
  double mx = -INFINITY;
  for (double l : logits) mx = std::max(mx, l / temperature);
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] / temperature - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

namespace {

struct Nucleus {
  std::vector<std::size_t> order;  // descending probability, ties by id
  std::size_t keep = 0;
  double mass = 0.0;
};

Nucleus nucleus(std::span<const double> probs, double nucleus_p) {
  Nucleus n;
  n.order.resize(probs.size());
  std::iota(n.order.begin(), n.order.end(), 0);
  std::stable_sort(n.order.begin(), n.order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  n.keep = n.order.size();
  if (nucleus_p < 1.0) {
    double cum = 0.0;
    for (std::size_t r = 0; r < n.order.size(); ++r) {
      cum += probs[n.order[r]];
      if (cum >= nucleus_p) {
        n.keep = r + 1;
        break;
      }
    }
  }
  for (std::size_t r = 0; r < n.keep; ++r) n.mass += probs[n.order[r]];
  return n;
}

}  // namespace

std::vector<double> nucleus_distribution(std::span<const double> probs, double nucleus_p) {
  const Nucleus n = nucleus(probs, nucleus_p);
  std::vector<double> out(probs.size(), 0.0);
  for (std::size_t r = 0; r < n.keep; ++r) out[n.order[r]] = probs[n.order[r]] / n.mass;
  return out;
}

Token draw_token(std::span<const double> probs, double nucleus_p, Rng& rng) {
  const Nucleus n = nucleus(probs, nucleus_p);
  const double u = rng.uniform() * n.mass;
  double cum = 0.0;
  for (std::size_t r = 0; r < n.keep; ++r) {
    cum += probs[n.order[r]];
    if (u < cum) return static_cast<Token>(n.order[r]);
  }
  for (std::size_t r = n.keep; r-- > 0;) {
    if (probs[n.order[r]] > 0.0) return static_cast<Token>(n.order[r]);
  }
  return static_cast<Token>(n.order[0]);
}

BlockResult sample_block(const Denoiser& model, DecodeCache* cache, std::span<const Token> prefix,
                         std::span<Token> block, std::span<double> conf,
                         const BlockLayout& layout, const StageConfig& cfg, Rng& rng) {
  const Token mask = model.mask_id();
  const std::size_t start = prefix.size();
  const std::size_t n = block.size();
  if (n != layout.block_size() || start % layout.block_size() != 0 ||
      start + n > layout.length()) {
    throw StateError("sample_block: block does not match the layout");
  }
  if (conf.size() != n) throw DimensionError("sample_block: confidence span size");
  if (cache && cache->length() > start) {
    throw StateError("sample_block: cache holds " + std::to_string(cache->length()) +
                     " positions but the block starts at " + std::to_string(start));
  }

  std::vector<std::size_t> masked;
  for (std::size_t i = 0; i < n; ++i)
    if (block[i] == mask) masked.push_back(i);

  BlockResult res;
  if (masked.empty()) return res;
  std::size_t steps_left = cfg.steps_per_block == 0
                               ? masked.size()
                               : std::min(cfg.steps_per_block, masked.size());

  std::vector<Token> tokens;
  while (!masked.empty()) {
    const std::size_t m = masked.size();
    const std::size_t quota = (m + steps_left - 1) / steps_left;

    Tensor<double> logits;
    if (cache) {
      const std::size_t pending = start - cache->length();
      tokens.assign(prefix.begin() + static_cast<std::ptrdiff_t>(cache->length()), prefix.end());
      tokens.insert(tokens.end(), block.begin(), block.end());
      logits = model.evaluate(*cache, tokens, layout, pending, n);
    } else {
      tokens.assign(prefix.begin(), prefix.end());
      tokens.insert(tokens.end(), block.begin(), block.end());
      auto fresh = model.new_cache();
      logits = model.evaluate(*fresh, tokens, layout, 0, n);
    }
    ++res.nfes;

    auto probs_at = [&](std::size_t i) { return tempered_probs(logits.row(i), cfg.temperature); };

    std::vector<std::size_t> chosen;
    std::vector<Token> values;
    std::vector<double> confs;
    if (cfg.unmask == UnmaskPolicy::kAncestral) {
      std::vector<std::size_t> pool = masked;
      if (quota < m) {
        for (std::size_t r = 0; r < quota; ++r) {
          const std::size_t j = r + static_cast<std::size_t>(rng.below(m - r));
          std::swap(pool[r], pool[j]);
        }
        pool.resize(quota);
        std::sort(pool.begin(), pool.end());
      }
      for (std::size_t i : pool) {
        const auto p = probs_at(i);
        const Token tok = draw_token(p, cfg.nucleus_p, rng);
        chosen.push_back(i);
        values.push_back(tok);
        confs.push_back(p[static_cast<std::size_t>(tok)]);
      }
    } else {
      std::vector<Token> draws(m);
      std::vector<double> draw_conf(m), peak(m);
      for (std::size_t r = 0; r < m; ++r) {
        const auto p = probs_at(masked[r]);
        draws[r] = draw_token(p, cfg.nucleus_p, rng);
        draw_conf[r] = p[static_cast<std::size_t>(draws[r])];
        peak[r] = *std::max_element(p.begin(), p.end());
      }
      std::vector<std::size_t> rank(m);
      std::iota(rank.begin(), rank.end(), 0);
      std::stable_sort(rank.begin(), rank.end(),
                       [&](std::size_t a, std::size_t b) { return peak[a] > peak[b]; });
      rank.resize(quota);
      std::sort(rank.begin(), rank.end());
      for (std::size_t r : rank) {
        chosen.push_back(masked[r]);
        values.push_back(draws[r]);
        confs.push_back(draw_conf[r]);
      }
    }

    for (std::size_t c = 0; c < chosen.size(); ++c) {
      block[chosen[c]] = values[c];
      conf[chosen[c]] = confs[c];
    }
    res.committed += chosen.size();
    std::erase_if(masked, [&](std::size_t i) { return block[i] != mask; });
    --steps_left;
  }
  return res;
}

StageMetrics run_stage(const Denoiser& model, DraftState& state, const StageConfig& cfg,
                       int stage_index, Rng& rng, const SamplerOptions& options) {
  const std::size_t L = state.x.size();
  const BlockLayout layout(L, cfg.block_size);
  if (state.trace.size() != L) throw StateError("run_stage: trace length differs from x");
  const Token mask = model.mask_id();

  StageMetrics m;
  m.stage = stage_index;
  m.block_size = cfg.block_size;
  m.gamma = cfg.gamma;
  m.masked_count = static_cast<std::size_t>(std::count(state.x.begin(), state.x.end(), mask));

  auto cache = options.use_cache ? model.new_cache() : nullptr;
  std::vector<double> conf(cfg.block_size);
  for (std::size_t b = 0; b < layout.n_blocks(); ++b) {
    const std::size_t lo = layout.block_begin(b);
    std::span<Token> block(state.x.data() + lo, cfg.block_size);
    std::vector<bool> was_masked(cfg.block_size);
    for (std::size_t i = 0; i < cfg.block_size; ++i) was_masked[i] = block[i] == mask;
    const auto masked_here =
        static_cast<std::size_t>(std::count(was_masked.begin(), was_masked.end(), true));

    std::fill(conf.begin(), conf.end(), 0.0);
    const BlockResult r = sample_block(model, cache.get(),
                                       std::span<const Token>(state.x.data(), lo), block, conf,
                                       layout, cfg, rng);
    for (std::size_t i = 0; i < cfg.block_size; ++i)
      if (was_masked[i]) state.trace.set(lo + i, conf[i], stage_index);

    m.block_masked.push_back(masked_here);
    m.block_nfes.push_back(r.nfes);
    m.nfes += r.nfes;
  }
  state.nfe_count += m.nfes;
  state.stage = stage_index;
  return m;
}

std::size_t remask_count(double gamma, std::size_t length) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(gamma * static_cast<double>(length) + 1e-9));
  return std::min(k, length);
}

namespace {

std::vector<std::size_t> lowest_k(std::span<const double> score, std::size_t k) {
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  order.resize(k);
  return order;
}

}  // namespace

std::vector<double> posthoc_confidence(const Denoiser& model, std::span<const Token> x,
                                       const BlockLayout& layout) {
  for (Token t : x)
    if (t == model.mask_id()) throw StateError("posthoc_confidence: x contains the mask token");
  const Tensor<double> logits = model.evaluate_full(x, layout);
  std::vector<double> s(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    s[i] = tempered_probs(logits.row(i), 1.0)[static_cast<std::size_t>(x[i])];
  }
  return s;
}

std::vector<std::size_t> remask(std::vector<Token>& x, ConfidenceTrace& trace, double gamma,
                                RemaskPolicy policy, Token mask_id, const Denoiser* model,
                                std::size_t posthoc_block_size, Rng& rng) {
  const std::size_t L = x.size();
  const std::size_t k = remask_count(gamma, L);
  if (trace.size() != L) throw StateError("remask: trace length differs from x");
  if (policy == RemaskPolicy::kPosthoc && model == nullptr) {
    throw UsageError("remask: post-hoc policy needs a model");
  }
  for (Token t : x)
    if (t == mask_id) throw StateError("remask: x still contains masked positions");

  std::vector<std::size_t> chosen;
  switch (policy) {
    case RemaskPolicy::kSnapshot: {
      if (!trace.fully_set()) throw StateError("remask: snapshot policy needs a full trace");
      std::vector<double> s(L);
      for (std::size_t i = 0; i < L; ++i) s[i] = trace.value(i);
      chosen = lowest_k(s, k);
      break;
    }
    case RemaskPolicy::kPosthoc: {
      const auto s = posthoc_confidence(*model, x, BlockLayout(L, posthoc_block_size));
      chosen = lowest_k(s, k);
      break;
    }
    case RemaskPolicy::kRandom: {
      std::vector<std::size_t> pool(L);
      std::iota(pool.begin(), pool.end(), 0);
      for (std::size_t r = 0; r < k; ++r) {
        const std::size_t j = r + static_cast<std::size_t>(rng.below(L - r));
        std::swap(pool[r], pool[j]);
      }
      pool.resize(k);
      chosen = std::move(pool);
      break;
    }
  }
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t i : chosen) {
    x[i] = mask_id;
    trace.unset(i);
  }
  return chosen;
}

GenerationResult generate_from(const Denoiser& model, const StagePlan& plan, DraftState state,
                               std::size_t first_stage, Rng& rng, const SamplerOptions& options) {
  if (state.x.size() != plan.length()) throw StateError("generate: draft length differs from plan");
  GenerationResult out;
  for (std::size_t k = first_stage; k < plan.size(); ++k) {
    const StageConfig& cfg = plan[k];
    std::size_t posthoc = 0;
    if (k > 0) {
      const std::uint64_t before = model.nfe();
      remask(state.x, state.trace, cfg.gamma, cfg.remask, model.mask_id(), &model,
             cfg.block_size, rng);
      posthoc = static_cast<std::size_t>(model.nfe() - before);
    }
    StageMetrics m = run_stage(model, state, cfg, static_cast<int>(k), rng, options);
    m.posthoc_nfes = posthoc;
    m.nfes += posthoc;
    state.nfe_count += posthoc;
    out.stages.push_back(std::move(m));
  }
  out.x = std::move(state.x);
  out.trace = std::move(state.trace);
  out.total_nfes = state.nfe_count;
  return out;
}

GenerationResult generate(const Denoiser& model, const StagePlan& plan, Rng& rng,
                          const SamplerOptions& options) {
  return generate_from(model, plan, empty_draft(plan.length(), model.mask_id()), 0, rng, options);
}

}  // namespace sbd
