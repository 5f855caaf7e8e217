#include "sbd/checks.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "sbd/evalsuite.hpp"
#include "sbd/oracles.hpp"
#include "sbd/sampler.hpp"
#include "sbd/train.hpp"
#include "sbd/transformer.hpp"

namespace sbd::checks {

namespace {

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

StageConfig stage(std::size_t block, double gamma = 0.0,
                  RemaskPolicy remask = RemaskPolicy::kSnapshot) {
  StageConfig s;
  s.block_size = block;
  s.gamma = gamma;
  s.remask = remask;
  return s;
}

template <typename T>
Transformer<T> random_model(int V, int L, int d, int heads, int layers, std::uint64_t seed,
                            bool mutate) {
  DenoiserConfig cfg;
  cfg.n_layers = layers;
  cfg.n_heads = heads;
  cfg.d_model = d;
  cfg.vocab_size = V;
  cfg.max_len = L;
  Transformer<T> m(cfg, seed);
  Rng rng(derive_seed(seed, "perturb"));
  for (auto& slot : m.params().slots())
    for (T& v : slot.value.values()) v += static_cast<T>(0.3 * rng.normal());
  if (mutate) m.set_attention_rule(AttentionRule::kBidirectional);
  return m;
}

std::vector<Token> random_tokens(Rng& rng, std::size_t L, int V) {
  std::vector<Token> x(L);
  for (Token& t : x) t = static_cast<Token>(rng.below(static_cast<std::size_t>(V)));
  return x;
}

// Constant logits and no per-row work: an NFE counter for long sequences.
class ConstantDenoiser final : public Denoiser {
 public:
  ConstantDenoiser(int V, std::size_t max_len) : vocab_(V), max_len_(max_len) {}
  int vocab_size() const override { return vocab_; }
  std::size_t max_len() const override { return max_len_; }
  std::unique_ptr<DecodeCache> new_cache() const override {
    return std::make_unique<Cache>();
  }

 protected:
  Tensor<double> do_evaluate(DecodeCache& cache, std::span<const Token>, const BlockLayout&,
                             std::size_t append, std::size_t n_out) const override {
    static_cast<Cache&>(cache).len += append;
    return Tensor<double>::matrix(n_out, static_cast<std::size_t>(vocab_), 0.0);
  }

 private:
  struct Cache final : DecodeCache {
    std::size_t len = 0;
    std::size_t length() const override { return len; }
  };
  int vocab_;
  std::size_t max_len_;
};

}  // namespace

std::string format(const CheckResult& r) {
  return std::string(r.passed ? "PASS " : "FAIL ") + r.name + " | measured " + r.measured +
         " | tolerance " + r.tolerance;
}

CheckResult gradient_fidelity(const CheckOptions&) {
  struct Case {
    int layers, heads, d, V, L;
    std::size_t block;
    std::uint64_t seed;
  };
  const Case cases[] = {{2, 2, 8, 4, 6, 2, 11}, {1, 3, 12, 5, 8, 4, 12}, {2, 2, 8, 3, 6, 6, 13}};
  std::size_t params = 0, failed = 0, zero = 0;
  double worst = 0.0, zero_fd = 0.0;
  std::string worst_name;
  for (const Case& c : cases) {
    DenoiserConfig cfg;
    cfg.n_layers = c.layers;
    cfg.n_heads = c.heads;
    cfg.d_model = c.d;
    cfg.vocab_size = c.V;
    cfg.max_len = c.L;
    const auto rep = oracles::gradient_check(cfg, c.block, c.seed);
    params += rep.parameters;
    failed += rep.failed_parameters;
    zero += rep.zero_gradient_parameters;
    zero_fd = std::max(zero_fd, rep.max_zero_fd_norm);
    if (rep.max_rel_error > worst) {
      worst = rep.max_rel_error;
      worst_name = rep.worst_parameter;
    }
  }
  return {"gradient fidelity (3 configs, f64)", failed == 0 && worst < 1e-4,
          "max rel err " + sci(worst) + " (" + worst_name + "), " +
              std::to_string(params - failed) + "/" + std::to_string(params) +
              " parameter tensors within tolerance; " + std::to_string(zero) +
              " with vanishing gradient, max norm " + sci(zero_fd),
          "rel < 1e-4 for 100% of parameters (both norms <= 1e-8 where the gradient vanishes)"};
}

CheckResult mask_marginals(const CheckOptions&) {
  const NoiseSchedule s;
  const std::size_t n = 100000;
  std::vector<Token> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<Token>(i % 7);
  Rng rng(derive_seed(0, "marginals"));
  double worst_z = 0.0;
  std::ostringstream detail;
  for (double t : {0.1, 0.3, 0.7}) {
    const auto xt = forward_mask(x, t, s, 7, rng);
    const double frac = static_cast<double>(std::count(xt.begin(), xt.end(), 7)) / n;
    const double sigma = std::sqrt(t * (1 - t) / n);
    const double z = std::abs(frac - t) / sigma;
    worst_z = std::max(worst_z, z);
    detail << "t=" << t << ": " << frac << " (" << std::fixed;
    detail.precision(2);
    detail << z << " sigma); ";
    detail.unsetf(std::ios::floatfield);
    detail.precision(6);
  }
  return {"forward-mask marginals", worst_z <= 3.0, detail.str(), "|frac - t| <= 3 sigma"};
}

CheckResult forward_cache_equivalence(const CheckOptions& opt) {
  const auto f32 = random_model<float>(5, 12, 16, 2, 2, 1, opt.mutate);
  const auto f64 = random_model<double>(5, 12, 16, 2, 2, 2, opt.mutate);
  Rng rng(3);
  std::size_t runs = 0, exact = 0;
  double worst = 0.0;
  for (std::size_t block : {1, 2, 3, 4, 6, 12}) {
    for (int r = 0; r < 3; ++r) {
      const auto x = random_tokens(rng, 12, 5);
      for (const Denoiser* m : {static_cast<const Denoiser*>(&f32),
                                static_cast<const Denoiser*>(&f64)}) {
        const auto rep = oracles::cache_equivalence(*m, x, block);
        ++runs;
        exact += rep.bit_exact ? 1 : 0;
        worst = std::max(worst, rep.max_abs_diff);
      }
    }
  }
  return {"forward cache equivalence", exact == runs,
          std::to_string(exact) + "/" + std::to_string(runs) + " bit-exact, max |diff| " +
              sci(worst),
          "bit-exact"};
}

CheckResult sampler_cache_equivalence(const CheckOptions& opt) {
  const auto tf = random_model<float>(6, 16, 16, 2, 2, 4, opt.mutate);
  std::size_t same = 0, runs = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t drafts[] = {1, 2, 4};
    const RemaskPolicy policies[] = {RemaskPolicy::kSnapshot, RemaskPolicy::kPosthoc,
                                     RemaskPolicy::kRandom};
    StageConfig first = stage(drafts[seed % 3]);
    if (seed % 2) first.unmask = UnmaskPolicy::kConfidenceTopK;
    const StagePlan plan(16, {first, stage(16, 0.5, policies[seed % 3])});
    ++runs;
    same += oracles::sampler_cache_equivalence(tf, plan, seed) ? 1 : 0;
  }
  return {"sampler cache equivalence (20 seeds, 2-stage)", same == runs,
          std::to_string(same) + "/" + std::to_string(runs) +
              " seeds with identical tokens, traces and rng state",
          "byte-identical"};
}

CheckResult mdlm_degeneration(const CheckOptions&) {
  const auto tf = random_model<float>(6, 10, 16, 2, 2, 5, false);
  std::size_t same = 0, runs = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (std::size_t steps : {0, 3}) {
      StageConfig s = stage(10);
      s.steps_per_block = steps;
      Rng a(seed), b(seed);
      const auto g = generate(tf, StagePlan(10, {s}), a);
      ++runs;
      same += g.x == oracles::reference_mdlm_sample(tf, 10, s, b) && a.state() == b.state();
    }
  }
  return {"degeneration: block L = masked diffusion", same == runs,
          std::to_string(same) + "/" + std::to_string(runs) + " seeds bit-identical",
          "bit-exact per seed"};
}

CheckResult ar_degeneration(const CheckOptions&) {
  const auto tf = random_model<float>(6, 10, 16, 2, 2, 6, false);
  std::size_t same = 0, runs = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    StageConfig s = stage(1);
    s.steps_per_block = 1;
    s.temperature = 0.8;
    Rng a(seed), b(seed);
    const auto g = generate(tf, StagePlan(10, {s}), a);
    ++runs;
    same += g.x == oracles::reference_ar_sample(tf, 10, 0.8, 0.9, b) && a.state() == b.state();
  }
  return {"degeneration: block 1, T=1 = autoregressive", same == runs,
          std::to_string(same) + "/" + std::to_string(runs) + " seeds bit-identical",
          "bit-exact per seed"};
}

CheckResult mixed_loss_degeneration(const CheckOptions&) {
  const auto m = random_model<double>(5, 8, 8, 2, 1, 7, false);
  Rng data(3);
  std::vector<std::vector<Token>> batch;
  for (int i = 0; i < 6; ++i) batch.push_back(random_tokens(data, 8, 5));
  const NoiseSchedule s;
  std::size_t same = 0, runs = 0;
  bool aligned = true;
  for (double lambda : {0.0, 1.0}) {
    TrainConfig cfg;
    cfg.lambda = lambda;
    cfg.block_draft = 2;
    const std::size_t pure = lambda == 0.0 ? 2 : 8;
    Rng a(42), b(42);
    ad::Tape<double> tape(false);
    const MixedLoss ml = mixed_loss(tape, m, batch, cfg, s, a);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ++runs;
      same += ml.parts[i].loss == nelbo_loss(m, batch[i], pure, s, b) &&
              ml.parts[i].block_size == pure;
    }
    aligned = aligned && a.state() == b.state();
  }
  return {"degeneration: mixed loss at lambda in {0, 1}", same == runs && aligned,
          std::to_string(same) + "/" + std::to_string(runs) +
              " sequence losses bit-identical, shared rng stream aligned",
          "bit-exact"};
}

CheckResult two_stream_equivalence(const CheckOptions&) {
  Rng rng(123);
  const NoiseSchedule schedule;
  const std::size_t lengths[] = {4, 6, 8, 12};
  double worst = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t L = lengths[inst % 4];
    std::vector<std::size_t> divisors;
    for (std::size_t b = 1; b <= L; ++b)
      if (L % b == 0) divisors.push_back(b);
    const std::size_t block = divisors[rng.below(divisors.size())];
    const int V = 2 + static_cast<int>(rng.below(5));
    const auto m = random_model<double>(V, static_cast<int>(L), 8, 2, 2, 1000 + inst, false);
    const auto x = random_tokens(rng, L, V);
    const NoisedSequence n = corrupt(x, schedule, m.mask_id(), rng);
    ad::Tape<double> t1(false), t2(false);
    const double fast =
        t1.value(nelbo_graph(t1, m, x, n, block, schedule, LossPath::kTwoStream)).item();
    const double loop =
        t2.value(nelbo_graph(t2, m, x, n, block, schedule, LossPath::kBlockLoop)).item();
    worst = std::max(worst, std::abs(fast - loop));
  }
  return {"two-stream vs per-block loss (50 instances, f64)", worst <= 1e-10,
          "max |diff| " + sci(worst), "<= 1e-10"};
}

CheckResult gamma_identities(const CheckOptions&) {
  const auto tf = random_model<float>(5, 12, 16, 2, 2, 8, false);
  std::size_t keep = 0, forget = 0, runs = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ++runs;
    Rng a(seed), b(seed);
    const auto draft = generate(tf, StagePlan(12, {stage(3)}), a);
    const auto revised = generate(tf, StagePlan(12, {stage(3), stage(12, 0.0)}), b);
    keep += revised.x == draft.x && revised.trace == draft.trace;

    const StagePlan plan(12, {stage(3), stage(12, 1.0)});
    DraftState d1 = empty_draft(12, tf.mask_id()), d2 = empty_draft(12, tf.mask_id());
    Rng s1(seed + 100), s2(seed + 200);
    run_stage(tf, d1, plan[0], 0, s1);
    run_stage(tf, d2, plan[0], 0, s2);
    Rng r1(seed + 7), r2(seed + 7);
    const auto o1 = generate_from(tf, plan, d1, 1, r1);
    const auto o2 = generate_from(tf, plan, d2, 1, r2);
    forget += d1.x != d2.x && o1.x == o2.x && o1.trace == o2.trace;
  }
  return {"gamma boundary identities", keep == runs && forget == runs,
          "gamma=0 kept draft " + std::to_string(keep) + "/" + std::to_string(runs) +
              ", gamma=1 identical across drafts " + std::to_string(forget) + "/" +
              std::to_string(runs),
          "exact"};
}

CheckResult sampler_distribution(const CheckOptions&) {
  const auto model = oracles::context_denoiser(3, 4, 21);
  const StageConfig cfg = stage(2);
  const auto exact = oracles::enumerate_stage(model, 4, cfg);
  const StagePlan plan(4, {cfg});
  Rng rng(derive_seed(0, "distribution"));
  const int runs = 100000;
  std::map<std::vector<Token>, double> mc;
  for (int r = 0; r < runs; ++r) mc[generate(model, plan, rng).x] += 1.0 / runs;
  const double tv = oracles::total_variation(exact, mc);
  std::ostringstream m;
  m << "TV " << tv << " over " << exact.size() << " outcomes";
  return {"sampler distribution (V=3, L=4, block 2, 100k draws)", tv < 0.02, m.str(), "TV < 0.02"};
}

CheckResult nfe_accounting(const CheckOptions&) {
  bool ok = true;
  std::ostringstream m;
  const auto ctx = oracles::context_denoiser(4, 16, 5);
  std::size_t audited = 0;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    StageConfig second = stage(16, 0.25 * static_cast<double>(seed % 4),
                               seed % 2 ? RemaskPolicy::kPosthoc : RemaskPolicy::kRandom);
    StageConfig first = stage(4);
    first.steps_per_block = seed % 3;
    const StagePlan plan(16, {first, stage(8, 0.5), second});
    ctx.reset_nfe();
    Rng rng(seed);
    const auto r = generate(ctx, plan, rng);
    try {
      nfe_audit(r, plan, ctx.nfe());
      ++audited;
    } catch (const InvariantError& e) {
      ok = false;
      m << e.what();
    }
  }
  m << audited << "/6 audited plans match the counter; ";

  const ConstantDenoiser big(8, 1024);
  auto run = [&](double gamma) {
    std::vector<StageConfig> stages{stage(4)};
    if (gamma >= 0) stages.push_back(stage(1024, gamma));
    const StagePlan plan(1024, stages);
    big.reset_nfe();
    Rng rng(1);
    const auto r = generate(big, plan, rng);
    const auto audit = nfe_audit(r, plan, big.nfe());
    ok = ok && audit.predicted == closed_form_nfes(plan);
    return audit.total;
  };
  const auto one = run(-1), tenth = run(0.1), half = run(0.5), none = run(0.0);
  ok = ok && one == 1024 && tenth == 1024 + 102 && half == 1536 && none == 1024;
  m << "L=1024: 1-stage " << one << ", +gamma 0.1 " << tenth << ", +gamma 0.5 " << half
    << ", +gamma 0 " << none;
  return {"nfe accounting", ok, m.str(), "exact; 1024 / 1126 / 1536 / 1024"};
}

CheckResult remask_selection(const CheckOptions&) {
  const double levels[] = {0.2, 0.5, 0.8};
  const double gammas[] = {0.0, 0.125, 0.25, 0.3, 0.5, 0.75, 1.0};
  std::size_t cases = 0, bad = 0;
  auto check = [&](const std::vector<double>& s) {
    const std::size_t L = s.size();
    for (double g : gammas) {
      std::vector<std::pair<double, std::size_t>> order;
      for (std::size_t i = 0; i < L; ++i) order.emplace_back(s[i], i);
      std::sort(order.begin(), order.end());
      const auto k = static_cast<std::size_t>(std::floor(g * static_cast<double>(L) + 1e-9));
      std::vector<std::size_t> want;
      for (std::size_t i = 0; i < k; ++i) want.push_back(order[i].second);
      std::sort(want.begin(), want.end());

      std::vector<Token> x(L, 0);
      ConfidenceTrace trace(L);
      for (std::size_t i = 0; i < L; ++i) trace.set(i, s[i], 0);
      Rng rng(0);
      const auto got = remask(x, trace, g, RemaskPolicy::kSnapshot, 1, nullptr, L, rng);
      ++cases;
      bad += got != want;
    }
  };
  for (std::size_t L = 1; L <= 8; ++L) {
    std::size_t total = 1;
    for (std::size_t i = 0; i < L; ++i) total *= 3;
    std::vector<double> s(L);
    for (std::size_t code = 0; code < total; ++code) {
      std::size_t c = code;
      for (std::size_t i = 0; i < L; ++i, c /= 3) s[i] = levels[c % 3];
      check(s);
    }
  }
  Rng rng(derive_seed(0, "remask"));
  for (int r = 0; r < 500; ++r) {
    std::vector<double> s(1 + rng.below(64));
    for (double& v : s) v = 1.0 - rng.uniform();
    check(s);
  }
  return {"snapshot remask selection", bad == 0,
          std::to_string(cases - bad) + "/" + std::to_string(cases) +
              " cases match the sort oracle (exhaustive L<=8 over 3 levels, 500 random)",
          "exact"};
}

CheckResult guarded(const std::string& name, CheckResult (*fn)(const CheckOptions&),
                    const CheckOptions& opt) {
  try {
    return fn(opt);
  } catch (const std::exception& e) {
    return {name, false, std::string("threw: ") + e.what(), "no exception"};
  }
}

std::vector<CheckResult> run_all(const CheckOptions& opt) {
  const std::pair<const char*, CheckResult (*)(const CheckOptions&)> all[] = {
      {"gradient fidelity", gradient_fidelity},
      {"forward-mask marginals", mask_marginals},
      {"forward cache equivalence", forward_cache_equivalence},
      {"sampler cache equivalence", sampler_cache_equivalence},
      {"degeneration: block L", mdlm_degeneration},
      {"degeneration: block 1", ar_degeneration},
      {"degeneration: mixed loss", mixed_loss_degeneration},
      {"two-stream vs per-block loss", two_stream_equivalence},
      {"gamma boundary identities", gamma_identities},
      {"sampler distribution", sampler_distribution},
      {"nfe accounting", nfe_accounting},
      {"snapshot remask selection", remask_selection}};
  std::vector<CheckResult> out;
  for (const auto& [name, fn] : all) out.push_back(guarded(name, fn, opt));
  return out;
}

}  // namespace sbd::checks
