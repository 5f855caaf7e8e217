#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "sbd/oracles.hpp"
#include "sbd/sampler.hpp"
#include "sbd/transformer.hpp"

using namespace sbd;

namespace {

StageConfig stage(std::size_t block, double gamma = 0.0,
                  RemaskPolicy remask = RemaskPolicy::kSnapshot) {
  StageConfig s;
  s.block_size = block;
  s.gamma = gamma;
  s.remask = remask;
  return s;
}

Transformer<float> small_model(int V, int L, std::uint64_t seed) {
  DenoiserConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.vocab_size = V;
  cfg.max_len = L;
  Transformer<float> m(cfg, seed);
  // Larger weights than the init so distributions are far from uniform.
  Rng rng(seed + 1);
  for (auto& slot : m.params().slots())
    for (float& v : slot.value.values()) v += static_cast<float>(0.3 * rng.normal());
  return m;
}

bool no_mask(const std::vector<Token>& x, Token mask) {
  return std::find(x.begin(), x.end(), mask) == x.end();
}

ConfidenceTrace trace_of(const std::vector<double>& s) {
  ConfidenceTrace t(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) t.set(i, s[i], 0);
  return t;
}

}  // namespace

TEST_CASE("stage plan validation") {
  CHECK_NOTHROW(StagePlan(16, {stage(4), stage(16, 0.5)}));
  CHECK_NOTHROW(StagePlan(16, {stage(4), stage(4, 0.5)}));
  CHECK_THROWS_AS(StagePlan(16, {stage(8), stage(4, 0.5)}), ConfigError);
  CHECK_THROWS_AS(StagePlan(16, {stage(3)}), LayoutError);
  CHECK_THROWS_AS(StagePlan(16, {stage(4), stage(16, 1.5)}), ConfigError);
  CHECK_THROWS_AS(StagePlan(16, {}), ConfigError);
  auto bad = stage(4);
  bad.nucleus_p = 0.0;
  CHECK_THROWS_AS(StagePlan(16, {bad}), ConfigError);
  bad = stage(4);
  bad.temperature = 0.0;
  CHECK_THROWS_AS(StagePlan(16, {bad}), ConfigError);
  CHECK(parse_remask_policy("posthoc") == RemaskPolicy::kPosthoc);
  CHECK(to_string(parse_unmask_policy("confidence-topk")) == "confidence-topk");
  CHECK_THROWS_AS(parse_remask_policy("lowest"), ConfigError);
}

TEST_CASE("tempered probabilities and nucleus draws") {
  const std::vector<double> logits{1.0, 2.0, 3.0};
  const auto p = tempered_probs(logits, 2.0);
  const double z = std::exp(0.5) + std::exp(1.0) + std::exp(1.5);
  CHECK(p[0] == doctest::Approx(std::exp(0.5) / z).epsilon(1e-14));
  CHECK(p[2] == doctest::Approx(std::exp(1.5) / z).epsilon(1e-14));

  const std::vector<double> probs{0.15, 0.5, 0.05, 0.3};
  auto d = nucleus_distribution(probs, 0.9);
  CHECK(d[1] == doctest::Approx(0.5 / 0.95));
  CHECK(d[3] == doctest::Approx(0.3 / 0.95));
  CHECK(d[0] == doctest::Approx(0.15 / 0.95));
  CHECK(d[2] == 0.0);
  d = nucleus_distribution(probs, 0.5);
  CHECK(d == std::vector<double>{0.0, 1.0, 0.0, 0.0});
  CHECK(nucleus_distribution(probs, 1.0) == probs);
  // Ties keep the lower ids.
  d = nucleus_distribution(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 0.5);
  CHECK(d == std::vector<double>{0.5, 0.5, 0.0, 0.0});

  Rng rng(3);
  std::vector<int> counts(4, 0);
  const int n = 200000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(draw_token(probs, 0.9, rng))];
  CHECK(counts[2] == 0);
  for (std::size_t v : {0, 1, 3}) {
    const double q = nucleus_distribution(probs, 0.9)[v];
    CHECK(std::abs(counts[v] / double(n) - q) < 4.0 * std::sqrt(q * (1 - q) / n));
  }
  CHECK(rng.draws() == static_cast<std::uint64_t>(n));
}

TEST_CASE("remask count uses floor") {
  CHECK(remask_count(0.3, 10) == 3);
  CHECK(remask_count(0.5, 4) == 2);
  CHECK(remask_count(0.1, 64) == 6);
  CHECK(remask_count(0.0, 64) == 0);
  CHECK(remask_count(1.0, 64) == 64);
  CHECK_THROWS_AS(remask_count(-0.1, 4), ConfigError);
  CHECK_THROWS_AS(remask_count(1.1, 4), ConfigError);
}

TEST_CASE("snapshot remask example") {
  std::vector<Token> x{0, 1, 2, 0};
  auto trace = trace_of({0.9, 0.1, 0.5, 0.7});
  Rng rng(0);
  const auto idx = remask(x, trace, 0.5, RemaskPolicy::kSnapshot, 3, nullptr, 4, rng);
  CHECK(idx == std::vector<std::size_t>{1, 2});
  CHECK(x == std::vector<Token>{0, 3, 3, 0});
  CHECK_FALSE(trace.is_set(1));
  CHECK_FALSE(trace.is_set(2));
  CHECK(trace.value(0) == 0.9);
  CHECK(rng.draws() == 0);

  std::vector<Token> y{0, 1, 2, 0};
  auto t0 = trace_of({0.9, 0.1, 0.5, 0.7});
  CHECK(remask(y, t0, 0.0, RemaskPolicy::kSnapshot, 3, nullptr, 4, rng).empty());
  CHECK(y == std::vector<Token>{0, 1, 2, 0});
  auto t1 = trace_of({0.9, 0.1, 0.5, 0.7});
  CHECK(remask(y, t1, 1.0, RemaskPolicy::kSnapshot, 3, nullptr, 4, rng).size() == 4);
  CHECK(y == std::vector<Token>{3, 3, 3, 3});
}

TEST_CASE("snapshot remask matches a sort oracle exhaustively") {
  const double levels[] = {0.25, 0.5, 0.75};
  Rng rng(0);
  std::size_t cases = 0;
  for (std::size_t L = 1; L <= 8; ++L) {
    std::size_t total = 1;
    for (std::size_t i = 0; i < L; ++i) total *= 3;
    for (std::size_t code = 0; code < total; ++code) {
      std::vector<double> s(L);
      std::size_t c = code;
      for (std::size_t i = 0; i < L; ++i, c /= 3) s[i] = levels[c % 3];
      std::vector<std::pair<double, std::size_t>> oracle;
      for (std::size_t i = 0; i < L; ++i) oracle.push_back({s[i], i});
      std::sort(oracle.begin(), oracle.end());
      for (std::size_t k = 0; k <= L; ++k) {
        const double gamma = static_cast<double>(k) / static_cast<double>(L);
        std::vector<Token> x(L, 0);
        auto trace = trace_of(s);
        auto got = remask(x, trace, gamma, RemaskPolicy::kSnapshot, 1, nullptr, L, rng);
        std::vector<std::size_t> want;
        for (std::size_t r = 0; r < k; ++r) want.push_back(oracle[r].second);
        std::sort(want.begin(), want.end());
        REQUIRE(got == want);
        ++cases;
      }
    }
  }
  CHECK(cases > 50000);
}

TEST_CASE("remask preconditions") {
  Rng rng(1);
  std::vector<Token> x{0, 1, 2, 3};
  ConfidenceTrace partial(4);
  partial.set(0, 0.5, 0);
  CHECK_THROWS_AS(remask(x, partial, 0.5, RemaskPolicy::kSnapshot, 4, nullptr, 4, rng), StateError);
  auto full = trace_of({0.1, 0.2, 0.3, 0.4});
  CHECK_THROWS_AS(remask(x, full, 0.5, RemaskPolicy::kPosthoc, 4, nullptr, 4, rng), UsageError);
  CHECK_THROWS_AS(remask(x, full, 2.0, RemaskPolicy::kRandom, 4, nullptr, 4, rng), ConfigError);
  std::vector<Token> masked{0, 4, 2, 3};
  CHECK_THROWS_AS(remask(masked, full, 0.5, RemaskPolicy::kRandom, 4, nullptr, 4, rng),
                  StateError);
}

TEST_CASE("random remask is a uniform subset") {
  Rng rng(17);
  const std::size_t L = 10;
  std::vector<int> hits(L, 0);
  const int runs = 20000;
  for (int r = 0; r < runs; ++r) {
    std::vector<Token> x(L, 0);
    ConfidenceTrace t(L);
    const auto idx = remask(x, t, 0.3, RemaskPolicy::kRandom, 1, nullptr, L, rng);
    REQUIRE(idx.size() == 3);
    REQUIRE(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
    for (auto i : idx) ++hits[i];
  }
  for (int h : hits) CHECK(std::abs(h / double(runs) - 0.3) < 0.015);
}

TEST_CASE("post-hoc confidence") {
  Rng rng(0);
  const std::vector<Token> x{0, 2, 1, 1, 0, 2};
  auto copy = oracles::copy_denoiser(3, 6);
  copy.reset_nfe();
  for (double s : posthoc_confidence(copy, x, BlockLayout(6, 3))) CHECK(s == 1.0);
  CHECK(copy.nfe() == 1);
  auto uni = oracles::uniform_denoiser(3, 6);
  for (double s : posthoc_confidence(uni, x, BlockLayout(6, 6)))
    CHECK(s == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  // Post-hoc remask through a model scores with the upcoming layout.
  auto ctx = oracles::context_denoiser(3, 6, 5);
  std::vector<Token> y = x;
  auto trace = trace_of({0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
  const auto s = posthoc_confidence(ctx, x, BlockLayout(6, 6));
  std::vector<std::size_t> order(6);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return s[a] < s[b]; });
  std::vector<std::size_t> want(order.begin(), order.begin() + 3);
  std::sort(want.begin(), want.end());
  CHECK(remask(y, trace, 0.5, RemaskPolicy::kPosthoc, 3, &ctx, 6, rng) == want);
}

TEST_CASE("sample_block edge cases") {
  auto onehot = oracles::onehot_denoiser(5, 8);
  const BlockLayout layout(8, 4);
  StageConfig cfg = stage(4);
  Rng rng(2);

  std::vector<Token> prefilled{1, 2, 3, 4};
  std::vector<double> conf{0.3, 0.3, 0.3, 0.3};
  auto cache = onehot.new_cache();
  const auto r = sample_block(onehot, cache.get(), {}, prefilled, conf, layout, cfg, rng);
  CHECK(r.nfes == 0);
  CHECK(prefilled == std::vector<Token>{1, 2, 3, 4});
  CHECK(conf == std::vector<double>{0.3, 0.3, 0.3, 0.3});
  CHECK(rng.draws() == 0);

  GenerationResult g = generate(onehot, StagePlan(8, {cfg}), rng);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(g.x[i] == oracles::onehot_token(i, 5));
    CHECK(g.trace.value(i) == 1.0);
  }

  // The cache already covers the block being sampled.
  auto full = onehot.new_cache();
  std::vector<Token> blk(4, 5);
  onehot.evaluate(*full, std::vector<Token>{0, 0, 0, 0, 0, 0}, layout, 6, 0);
  std::vector<Token> prefix{0, 0, 0, 0};
  CHECK_THROWS_AS(sample_block(onehot, full.get(), prefix, blk, conf, layout, cfg, rng),
                  StateError);
}

TEST_CASE("confidence-topk commits the most confident positions first") {
  std::vector<std::vector<Token>> seen;
  // Peak probability grows with position; the rule logs what it was shown.
  oracles::RuleDenoiser m(3, 4, [&](std::span<const Token> ctx, std::size_t pos) {
    if (pos == 0) seen.emplace_back(ctx.begin(), ctx.end());
    return std::vector<double>{static_cast<double>(pos), 0.0, 0.0};
  });
  StageConfig cfg = stage(4);
  cfg.unmask = UnmaskPolicy::kConfidenceTopK;
  cfg.steps_per_block = 2;
  cfg.nucleus_p = 1.0;
  Rng rng(4);
  GenerationResult g = generate(m, StagePlan(4, {cfg}), rng);
  REQUIRE(seen.size() == 2);
  CHECK(seen[0] == std::vector<Token>{3, 3, 3, 3});
  CHECK(seen[1][0] == 3);
  CHECK(seen[1][1] == 3);
  CHECK(seen[1][2] != 3);
  CHECK(seen[1][3] != 3);
  CHECK(g.stages[0].nfes == 2);
  CHECK(rng.draws() == 6);
}

TEST_CASE("enumerated distribution matches Monte Carlo") {
  struct Case {
    int V;
    std::size_t L, block;
    bool uniform;
    double nucleus;
  };
  for (const Case c : {Case{2, 2, 2, true, 1.0}, Case{3, 4, 2, false, 0.9},
                       Case{3, 4, 2, false, 1.0}}) {
    auto model = c.uniform ? oracles::uniform_denoiser(c.V, c.L)
                           : oracles::context_denoiser(c.V, c.L, 21);
    StageConfig cfg = stage(c.block);
    cfg.nucleus_p = c.nucleus;
    const auto exact = oracles::enumerate_stage(model, c.L, cfg);
    double mass = 0.0;
    for (const auto& [k, p] : exact) mass += p;
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));

    const StagePlan plan(c.L, {cfg});
    Rng rng(1234);
    std::map<std::vector<Token>, double> mc;
    const int runs = 100000;
    for (int r = 0; r < runs; ++r) mc[generate(model, plan, rng).x] += 1.0 / runs;
    const double tv = oracles::total_variation(exact, mc);
    MESSAGE("V=" << c.V << " L=" << c.L << " outcomes=" << exact.size() << " TV=" << tv);
    CHECK(tv < 0.02);
  }
}

TEST_CASE("nfe accounting") {
  auto uni = oracles::uniform_denoiser(4, 16);
  Rng rng(5);
  uni.reset_nfe();
  auto g = generate(uni, StagePlan(16, {stage(4)}), rng);
  CHECK(g.stages[0].nfes == 16);
  CHECK(g.stages[0].block_nfes == std::vector<std::size_t>{4, 4, 4, 4});
  CHECK(g.total_nfes == uni.nfe());

  StageConfig two = stage(4);
  two.steps_per_block = 2;
  g = generate(uni, StagePlan(16, {two}), rng);
  CHECK(g.stages[0].nfes == 8);

  uni.reset_nfe();
  g = generate(uni, StagePlan(16, {stage(4), stage(16, 0.5)}), rng);
  CHECK(g.stages[1].masked_count == 8);
  CHECK(g.stages[1].nfes == 8);
  CHECK(g.total_nfes == 24);
  CHECK(uni.nfe() == 24);

  g = generate(uni, StagePlan(16, {stage(4), stage(16, 0.0)}), rng);
  CHECK(g.stages[1].nfes == 0);

  uni.reset_nfe();
  g = generate(uni, StagePlan(16, {stage(4), stage(8, 0.25, RemaskPolicy::kPosthoc)}), rng);
  CHECK(g.stages[1].posthoc_nfes == 1);
  CHECK(g.stages[1].nfes == 1 + 4);
  CHECK(uni.nfe() == 16 + 5);
  CHECK(g.total_nfes == 21);
}

TEST_CASE("cache on and off give identical samples") {
  auto ctx = oracles::context_denoiser(4, 12, 8);
  auto tf = small_model(5, 12, 3);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CHECK(oracles::sampler_cache_equivalence(ctx, StagePlan(12, {stage(2), stage(6, 0.5)}), seed));
    CHECK(oracles::sampler_cache_equivalence(tf, StagePlan(12, {stage(3), stage(12, 0.5)}), seed));
    StageConfig topk = stage(4, 0.25, RemaskPolicy::kRandom);
    topk.unmask = UnmaskPolicy::kConfidenceTopK;
    topk.steps_per_block = 2;
    CHECK(oracles::sampler_cache_equivalence(
        tf, StagePlan(12, {stage(1), topk, stage(12, 0.5, RemaskPolicy::kPosthoc)}), seed));
  }
}

TEST_CASE("block size 1 is autoregressive sampling") {
  auto tf = small_model(6, 10, 4);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    StageConfig s = stage(1);
    s.steps_per_block = 1;
    s.temperature = 0.8;
    Rng a(seed), b(seed);
    const auto g = generate(tf, StagePlan(10, {s}), a);
    CHECK(g.x == oracles::reference_ar_sample(tf, 10, 0.8, 0.9, b));
    CHECK(a.state() == b.state());
  }
}

TEST_CASE("block size L is full-sequence masked diffusion") {
  auto tf = small_model(6, 10, 5);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (std::size_t steps : {0, 3}) {
      StageConfig s = stage(10);
      s.steps_per_block = steps;
      Rng a(seed), b(seed);
      const auto g = generate(tf, StagePlan(10, {s}), a);
      CHECK(g.x == oracles::reference_mdlm_sample(tf, 10, s, b));
      CHECK(a.state() == b.state());
    }
  }
}

TEST_CASE("gamma boundary identities") {
  auto tf = small_model(5, 12, 6);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng a(seed), b(seed);
    const auto draft = generate(tf, StagePlan(12, {stage(3)}), a);
    const auto revised = generate(tf, StagePlan(12, {stage(3), stage(12, 0.0)}), b);
    CHECK(revised.x == draft.x);
    CHECK(revised.trace == draft.trace);

    // With gamma = 1 the draft is discarded entirely.
    const StagePlan plan(12, {stage(3), stage(12, 1.0)});
    DraftState d1 = empty_draft(12, tf.mask_id()), d2 = empty_draft(12, tf.mask_id());
    Rng s1(seed + 100), s2(seed + 200);
    run_stage(tf, d1, plan[0], 0, s1);
    run_stage(tf, d2, plan[0], 0, s2);
    REQUIRE(d1.x != d2.x);
    Rng r1(seed + 7), r2(seed + 7);
    const auto o1 = generate_from(tf, plan, d1, 1, r1);
    const auto o2 = generate_from(tf, plan, d2, 1, r2);
    CHECK(o1.x == o2.x);
    CHECK(o1.trace == o2.trace);
  }
}

TEST_CASE("confidences are bounded and carried forward") {
  auto tf = small_model(5, 16, 7);
  Rng rng(9);
  const StagePlan plan(16, {stage(4), stage(16, 0.5)});
  DraftState st = empty_draft(16, tf.mask_id());
  run_stage(tf, st, plan[0], 0, rng);
  CHECK(no_mask(st.x, tf.mask_id()));
  const ConfidenceTrace before = st.trace;
  const auto out = generate_from(tf, plan, st, 1, rng);
  CHECK(no_mask(out.x, tf.mask_id()));
  std::size_t kept = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(out.trace.value(i) > 0.0);
    CHECK(out.trace.value(i) <= 1.0);
    if (out.trace.stage(i) == 0) {
      CHECK(out.trace.value(i) == before.value(i));
      CHECK(out.x[i] == st.x[i]);
      ++kept;
    }
  }
  CHECK(kept == 8);
}
