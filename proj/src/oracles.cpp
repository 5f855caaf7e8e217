#include "sbd/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "sbd/errors.hpp"
#include "sbd/train.hpp"

namespace sbd::oracles {

namespace {

class TokenCache final : public DecodeCache {
 public:
  std::size_t length() const override { return tokens.size(); }
  std::vector<Token> tokens;
};

double hashed_unit(std::uint64_t h) {
  return static_cast<double>(mix64(h) >> 11) * 0x1.0p-53 * 2.0 - 1.0;
}

std::uint64_t combine(std::uint64_t h, std::uint64_t v) { return mix64(h ^ mix64(v + 1)); }

}  // namespace

RuleDenoiser::RuleDenoiser(int vocab_size, std::size_t max_len, LogitRule rule)
    : vocab_(vocab_size), max_len_(max_len), rule_(std::move(rule)) {
  if (vocab_size <= 0 || max_len == 0) throw ConfigError("mock denoiser: sizes must be positive");
}

std::unique_ptr<DecodeCache> RuleDenoiser::new_cache() const {
  return std::make_unique<TokenCache>();
}

Tensor<double> RuleDenoiser::do_evaluate(DecodeCache& cache, std::span<const Token> tokens,
                                         const BlockLayout& layout, std::size_t append,
                                         std::size_t n_out) const {
  auto* tc = dynamic_cast<TokenCache*>(&cache);
  if (!tc) throw StateError("cache was not created by this model");
  std::vector<Token> full(tc->tokens);
  full.insert(full.end(), tokens.begin(), tokens.end());
  const std::size_t total = full.size();
  full.resize(layout.length(), mask_id());

  auto out = Tensor<double>::matrix(n_out, static_cast<std::size_t>(vocab_));
  std::vector<Token> ctx(full.size());
  for (std::size_t r = 0; r < n_out; ++r) {
    const std::size_t p = total - n_out + r;
    for (std::size_t j = 0; j < full.size(); ++j) ctx[j] = layout.visible(p, j) ? full[j] : mask_id();
    const auto logits = rule_(ctx, p);
    if (logits.size() != static_cast<std::size_t>(vocab_)) {
      throw DimensionError("mock denoiser rule returned the wrong number of logits");
    }
    std::copy(logits.begin(), logits.end(), out.row(r).begin());
  }
  tc->tokens.insert(tc->tokens.end(), tokens.begin(), tokens.begin() + static_cast<long>(append));
  return out;
}

RuleDenoiser uniform_denoiser(int vocab_size, std::size_t max_len) {
  return RuleDenoiser(vocab_size, max_len, [vocab_size](std::span<const Token>, std::size_t) {
    return std::vector<double>(static_cast<std::size_t>(vocab_size), 0.0);
  });
}

Token onehot_token(std::size_t pos, int vocab_size) {
  return static_cast<Token>((3 * pos + 1) % static_cast<std::size_t>(vocab_size));
}

RuleDenoiser onehot_denoiser(int vocab_size, std::size_t max_len) {
  return RuleDenoiser(vocab_size, max_len, [vocab_size](std::span<const Token>, std::size_t pos) {
    std::vector<double> l(static_cast<std::size_t>(vocab_size),
                          -std::numeric_limits<double>::infinity());
    l[static_cast<std::size_t>(onehot_token(pos, vocab_size))] = 0.0;
    return l;
  });
}

RuleDenoiser copy_denoiser(int vocab_size, std::size_t max_len) {
  return RuleDenoiser(vocab_size, max_len,
                      [vocab_size](std::span<const Token> ctx, std::size_t pos) {
                        const auto V = static_cast<std::size_t>(vocab_size);
                        if (ctx[pos] == vocab_size) return std::vector<double>(V, 0.0);
                        std::vector<double> l(V, -std::numeric_limits<double>::infinity());
                        l[static_cast<std::size_t>(ctx[pos])] = 0.0;
                        return l;
                      });
}

RuleDenoiser context_denoiser(int vocab_size, std::size_t max_len, std::uint64_t seed) {
  return RuleDenoiser(
      vocab_size, max_len, [vocab_size, seed](std::span<const Token> ctx, std::size_t pos) {
        const auto V = static_cast<std::size_t>(vocab_size);
        std::vector<double> l(V);
        std::size_t seen = 0;
        for (Token t : ctx) seen += t != vocab_size;
        const double norm = 1.0 / std::sqrt(static_cast<double>(seen + 1));
        for (std::size_t v = 0; v < V; ++v) {
          const std::uint64_t hv = combine(combine(seed, pos), v);
          double s = 1.2 * hashed_unit(hv);
          for (std::size_t j = 0; j < ctx.size(); ++j) {
            if (ctx[j] == vocab_size) continue;
            s += 0.8 * norm * hashed_unit(combine(combine(hv, j), static_cast<std::uint64_t>(ctx[j])));
          }
          l[v] = s;
        }
        return l;
      });
}

namespace {

struct Enumerator {
  const Denoiser& model;
  const StageConfig& cfg;
  const BlockLayout layout;
  std::map<std::vector<Token>, double> out;

  void block(std::vector<Token>& x, std::size_t b, std::size_t steps_left, double prob) {
    if (prob == 0.0) return;
    if (b == layout.n_blocks()) {
      out[x] += prob;
      return;
    }
    const std::size_t lo = layout.block_begin(b), hi = layout.block_end(b);
    std::vector<std::size_t> masked;
    for (std::size_t i = lo; i < hi; ++i)
      if (x[i] == model.mask_id()) masked.push_back(i);
    if (masked.empty()) return block(x, b + 1, 0, prob);
    const std::size_t m = masked.size();
    if (steps_left == 0) steps_left = cfg.steps_per_block == 0 ? m : std::min(cfg.steps_per_block, m);
    const std::size_t quota = (m + steps_left - 1) / steps_left;

    const Tensor<double> logits = model.evaluate_full(std::span<const Token>(x.data(), hi), layout);
    std::vector<std::vector<double>> dist(m);
    for (std::size_t r = 0; r < m; ++r) {
      dist[r] = nucleus_distribution(tempered_probs(logits.row(masked[r]), cfg.temperature),
                                     cfg.nucleus_p);
    }

    // Each quota-subset of the masked positions is equally likely.
    std::vector<bool> pick(m, false);
    std::fill(pick.begin(), pick.begin() + static_cast<long>(quota), true);
    double subsets = 1.0;
    for (std::size_t k = 0; k < quota; ++k) subsets = subsets * double(m - k) / double(k + 1);
    do {
      std::vector<std::size_t> sel;
      for (std::size_t r = 0; r < m; ++r)
        if (pick[r]) sel.push_back(r);
      assign(x, sel, 0, dist, b, steps_left, prob / subsets, masked);
    } while (std::prev_permutation(pick.begin(), pick.end()));
  }

  void assign(std::vector<Token>& x, const std::vector<std::size_t>& sel, std::size_t k,
              const std::vector<std::vector<double>>& dist, std::size_t b,
              std::size_t steps_left, double prob, const std::vector<std::size_t>& masked) {
    if (k == sel.size()) return block(x, b, steps_left - 1, prob);
    const std::size_t pos = masked[sel[k]];
    const auto& d = dist[sel[k]];
    for (std::size_t v = 0; v < d.size(); ++v) {
      if (d[v] == 0.0) continue;
      x[pos] = static_cast<Token>(v);
      assign(x, sel, k + 1, dist, b, steps_left, prob * d[v], masked);
    }
    x[pos] = model.mask_id();
  }
};

}  // namespace

std::map<std::vector<Token>, double> enumerate_stage(const Denoiser& model, std::size_t length,
                                                     const StageConfig& cfg) {
  if (cfg.unmask != UnmaskPolicy::kAncestral) {
    throw UsageError("enumerate_stage supports the ancestral policy only");
  }
  Enumerator e{model, cfg, BlockLayout(length, cfg.block_size), {}};
  std::vector<Token> x(length, model.mask_id());
  e.block(x, 0, 0, 1.0);
  return e.out;
}

double total_variation(const std::map<std::vector<Token>, double>& p,
                       const std::map<std::vector<Token>, double>& q) {
  double tv = 0.0;
  for (const auto& [k, v] : p) {
    auto it = q.find(k);
    tv += std::abs(v - (it == q.end() ? 0.0 : it->second));
  }
  for (const auto& [k, v] : q)
    if (!p.contains(k)) tv += v;
  return 0.5 * tv;
}

std::vector<Token> reference_ar_sample(const Denoiser& model, std::size_t length,
                                       double temperature, double nucleus_p, Rng& rng) {
  const BlockLayout causal(length, 1);
  std::vector<Token> x;
  for (std::size_t i = 0; i < length; ++i) {
    std::vector<Token> ctx(x);
    ctx.push_back(model.mask_id());
    const Tensor<double> logits = model.evaluate_full(ctx, causal);
    x.push_back(draw_token(tempered_probs(logits.row(i), temperature), nucleus_p, rng));
  }
  return x;
}

std::vector<Token> reference_mdlm_sample(const Denoiser& model, std::size_t length,
                                         const StageConfig& cfg, Rng& rng) {
  if (cfg.unmask != UnmaskPolicy::kAncestral) {
    throw UsageError("reference_mdlm_sample supports the ancestral policy only");
  }
  const BlockLayout full(length, length);
  std::vector<Token> x(length, model.mask_id());
  std::size_t steps = cfg.steps_per_block == 0 ? length : std::min(cfg.steps_per_block, length);
  for (;;) {
    std::vector<std::size_t> masked;
    for (std::size_t i = 0; i < length; ++i)
      if (x[i] == model.mask_id()) masked.push_back(i);
    if (masked.empty()) break;
    const std::size_t m = masked.size();
    const std::size_t quota = (m + steps - 1) / steps;
    const Tensor<double> logits = model.evaluate_full(x, full);
    if (quota < m) {
      for (std::size_t r = 0; r < quota; ++r) {
        std::swap(masked[r], masked[r + rng.below(m - r)]);
      }
      masked.resize(quota);
      std::sort(masked.begin(), masked.end());
    }
    for (std::size_t i : masked) {
      x[i] = draw_token(tempered_probs(logits.row(i), cfg.temperature), cfg.nucleus_p, rng);
    }
    --steps;
  }
  return x;
}

GradCheckReport gradient_check(const DenoiserConfig& cfg, std::size_t block_size,
                               std::uint64_t seed, double h, double tol, double zero_tol) {
  Transformer<double> model(cfg, seed);
  Rng rng(derive_seed(seed, "gradcheck"));
  for (auto& slot : model.params().slots()) {
    const bool gain = slot.name.ends_with(".g");
    for (double& v : slot.value.values()) v = (gain ? 1.0 : 0.0) + 0.3 * rng.normal();
  }

  const auto L = static_cast<std::size_t>(cfg.max_len);
  const NoiseSchedule schedule;
  std::vector<Token> x(L);
  for (auto& t : x) t = static_cast<Token>(rng.below(static_cast<std::size_t>(cfg.vocab_size)));
  NoisedSequence noised{forward_mask(x, 0.5, schedule, model.mask_id(), rng), 0.5};
  noised.noisy[L - 1] = model.mask_id();

  auto loss_value = [&] {
    ad::Tape<double> tape(/*record=*/false);
    return tape.value(nelbo_graph(tape, model, x, noised, block_size, schedule)).item();
  };
  {
    ad::Tape<double> tape;
    ad::backward(tape, nelbo_graph(tape, model, x, noised, block_size, schedule), model.params());
  }

  GradCheckReport rep;
  for (auto& slot : model.params().slots()) {
    double diff2 = 0.0, ad2 = 0.0, fd2 = 0.0;
    auto vals = slot.value.values();
    for (std::size_t e = 0; e < vals.size(); ++e) {
      const double keep = vals[e];
      vals[e] = keep + h;
      const double up = loss_value();
      vals[e] = keep - h;
      const double down = loss_value();
      vals[e] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double g = slot.grad.values()[e];
      diff2 += (g - fd) * (g - fd);
      ad2 += g * g;
      fd2 += fd * fd;
      ++rep.entries;
    }
    ++rep.parameters;
    if (std::sqrt(ad2) <= zero_tol && std::sqrt(fd2) <= zero_tol) {
      ++rep.zero_gradient_parameters;
      rep.max_zero_fd_norm = std::max({rep.max_zero_fd_norm, std::sqrt(fd2), std::sqrt(ad2)});
      continue;
    }
    const double rel = std::sqrt(diff2) / (std::sqrt(ad2) + std::sqrt(fd2));
    if (rel >= tol) ++rep.failed_parameters;
    if (rel >= rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_parameter = slot.name;
    }
  }
  return rep;
}

CacheCheckReport cache_equivalence(const Denoiser& model, std::span<const Token> x,
                                   std::size_t block_size) {
  const BlockLayout layout(x.size(), block_size);
  const Tensor<double> full = model.evaluate_full(x, layout);
  auto cache = model.new_cache();
  CacheCheckReport rep;
  for (std::size_t b = 0; b < layout.n_blocks(); ++b) {
    const std::size_t lo = layout.block_begin(b);
    const Tensor<double> part =
        model.evaluate(*cache, x.subspan(lo, block_size), layout, block_size, block_size);
    for (std::size_t r = 0; r < block_size; ++r) {
      auto a = full.row(lo + r);
      auto c = part.row(r);
      if (std::memcmp(a.data(), c.data(), a.size() * sizeof(double)) != 0) rep.bit_exact = false;
      for (std::size_t j = 0; j < a.size(); ++j) {
        rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(a[j] - c[j]));
      }
    }
    ++rep.blocks;
  }
  return rep;
}

bool sampler_cache_equivalence(const Denoiser& model, const StagePlan& plan, std::uint64_t seed) {
  Rng a(seed), b(seed);
  const GenerationResult cached = generate(model, plan, a, SamplerOptions{true});
  const GenerationResult plain = generate(model, plan, b, SamplerOptions{false});
  return cached.x == plain.x && cached.trace == plain.trace && a.state() == b.state();
}

}  // namespace sbd::oracles
