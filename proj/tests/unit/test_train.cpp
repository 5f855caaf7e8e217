#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "sbd/train.hpp"

using namespace sbd;

namespace {

DenoiserConfig tiny_config(int V, int L, int d = 8) {
  DenoiserConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = d;
  cfg.vocab_size = V;
  cfg.max_len = L;
  return cfg;
}

std::vector<Token> random_tokens(Rng& rng, std::size_t n, int V) {
  std::vector<Token> x(n);
  for (auto& t : x) t = static_cast<Token>(rng.below(static_cast<std::size_t>(V)));
  return x;
}

template <typename T>
double graph_value(const Transformer<T>& m, const std::vector<Token>& x, const NoisedSequence& n,
                   std::size_t block, LossPath path) {
  ad::Tape<T> tape(false);
  const NoiseSchedule schedule;
  return static_cast<double>(tape.value(nelbo_graph(tape, m, x, n, block, schedule, path)).item());
}

}  // namespace

TEST_CASE("noise schedule") {
  const NoiseSchedule s;
  CHECK(s.alpha(0.0) == 1.0);
  CHECK(s.alpha(1.0) == 0.0);
  CHECK(s.weight(0.25) == doctest::Approx(4.0));
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double t = s.sample_t(rng);
    CHECK(t >= 1e-3);
    CHECK(t <= 1.0);
  }
  CHECK_THROWS_AS(NoiseSchedule(0.0), ConfigError);
}

TEST_CASE("forward_mask marginals") {
  const NoiseSchedule s;
  Rng rng(7);
  std::vector<Token> x(100000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<Token>(i % 5);

  CHECK(forward_mask(x, 0.0, s, 5, rng) == x);
  const auto all = forward_mask(x, 1.0, s, 5, rng);
  CHECK(std::count(all.begin(), all.end(), 5) == 100000);

  const auto xt = forward_mask(x, 0.3, s, 5, rng);
  const double frac = static_cast<double>(std::count(xt.begin(), xt.end(), 5)) / 1e5;
  CHECK(std::abs(frac - 0.3) < 0.005);
  for (std::size_t i = 0; i < x.size(); ++i)
    if (xt[i] != 5) CHECK(xt[i] == x[i]);

  std::vector<Token> with_mask{0, 5, 1};
  CHECK_THROWS_AS(forward_mask(with_mask, 0.5, s, 5, rng), UsageError);
  CHECK_THROWS_AS(forward_mask(x, 1.5, s, 5, rng), ConfigError);
}

TEST_CASE("two-stream loss equals per-block loop") {
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
    Transformer<double> m(tiny_config(V, static_cast<int>(L)), 1000 + inst);
    for (auto& slot : m.params().slots())
      for (double& v : slot.value.values()) v += 0.2 * rng.normal();
    const auto x = random_tokens(rng, L, V);
    const NoisedSequence n = corrupt(x, schedule, m.mask_id(), rng);
    const double fast = graph_value(m, x, n, block, LossPath::kTwoStream);
    const double loop = graph_value(m, x, n, block, LossPath::kBlockLoop);
    worst = std::max(worst, std::abs(fast - loop));
    CHECK(std::abs(fast - loop) <= 1e-10 * std::max(1.0, std::abs(loop)));
  }
  MESSAGE("max |two-stream - loop| = " << worst);
}

TEST_CASE("block size L is the plain masked-diffusion loss") {
  Rng rng(5);
  Transformer<double> m(tiny_config(4, 8), 3);
  for (int i = 0; i < 10; ++i) {
    const auto x = random_tokens(rng, 8, 4);
    const NoisedSequence n = corrupt(x, NoiseSchedule(), m.mask_id(), rng);
    CHECK(graph_value(m, x, n, 8, LossPath::kTwoStream) ==
          graph_value(m, x, n, 8, LossPath::kBlockLoop));
  }
}

TEST_CASE("uniform predictor loss") {
  const int V = 6;
  const std::size_t L = 16;
  Transformer<double> m(tiny_config(V, static_cast<int>(L)), 2);
  m.params().value("head.w").fill(0.0);
  m.params().value("head.b").fill(0.0);
  Rng rng(9);
  const NoiseSchedule s;
  const double t = 0.4;
  double sum = 0.0, sum2 = 0.0;
  const int draws = 2000;
  for (int k = 0; k < draws; ++k) {
    const auto x = random_tokens(rng, L, V);
    NoisedSequence n{forward_mask(x, t, s, m.mask_id(), rng), t};
    const auto masked = static_cast<double>(std::count(n.noisy.begin(), n.noisy.end(), V));
    const double loss = graph_value(m, x, n, 4, LossPath::kTwoStream);
    // Per draw: weight(t) * masked * ln V / L.
    CHECK(loss == doctest::Approx(masked * std::log(V) / (t * L)).epsilon(1e-12));
    sum += loss;
    sum2 += loss * loss;
  }
  // Expectation: weight(t) * (1 - alpha(t)) * L * ln V / L = ln V.
  const double mean = sum / draws;
  const double se = std::sqrt((sum2 / draws - mean * mean) / draws);
  CHECK(std::abs(mean - std::log(V)) < 3.0 * se);
}

TEST_CASE("perfect predictor loss is zero") {
  const int V = 4;
  Transformer<double> m(tiny_config(V, 8), 2);
  m.params().value("head.w").fill(0.0);
  auto& b = m.params().value("head.b");
  b.fill(0.0);
  b[2] = 1e4;
  const std::vector<Token> x(8, 2);
  Rng rng(1);
  for (std::size_t block : {1, 2, 8}) {
    CHECK(nelbo_loss(m, x, block, NoiseSchedule(), rng) == 0.0);
  }
}

TEST_CASE("block size draws") {
  TrainConfig cfg;
  Rng rng(77);
  int global = 0;
  for (int i = 0; i < 100000; ++i) global += sample_block_size(cfg, 64, rng) == 64;
  CHECK(std::abs(global / 1e5 - 0.1) < 0.003);

  cfg.lambda = 0.0;
  Rng r0(1);
  for (int i = 0; i < 100; ++i) CHECK(sample_block_size(cfg, 64, r0) == 4);
  CHECK(r0.draws() == 0);
  cfg.lambda = 1.0;
  for (int i = 0; i < 100; ++i) CHECK(sample_block_size(cfg, 64, r0) == 64);
  CHECK(r0.draws() == 0);

  cfg.mix = BlockMix::kUniform;
  CHECK(uniform_mixture_sizes(cfg, 64) == std::vector<std::size_t>{4, 16, 64});
  CHECK(uniform_mixture_sizes(cfg, 32) == std::vector<std::size_t>{4, 16, 32});
  std::map<std::size_t, int> seen;
  for (int i = 0; i < 3000; ++i) ++seen[sample_block_size(cfg, 64, rng)];
  CHECK(seen.size() == 3);
  for (auto [b, n] : seen) CHECK(std::abs(n - 1000) < 120);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.lambda = 1.5;
  CHECK_THROWS_AS(cfg.validate(64), ConfigError);
  cfg.lambda = 0.1;
  cfg.block_draft = 3;
  CHECK_THROWS_AS(cfg.validate(64), LayoutError);
  cfg.block_draft = 4;
  cfg.block_global = 24;
  CHECK_THROWS_AS(cfg.validate(64), LayoutError);
  cfg.block_global = 0;
  CHECK_NOTHROW(cfg.validate(64));
}

TEST_CASE("mixed loss degenerates to the pure objectives") {
  Transformer<double> m(tiny_config(5, 8), 4);
  Rng data(3);
  std::vector<std::vector<Token>> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_tokens(data, 8, 5));
  const NoiseSchedule s;

  for (double lambda : {0.0, 1.0}) {
    TrainConfig cfg;
    cfg.lambda = lambda;
    const std::size_t pure_block = lambda == 0.0 ? 4 : 8;
    Rng a(42), b(42);
    ad::Tape<double> tape(false);
    const MixedLoss ml = mixed_loss(tape, m, batch, cfg, s, a);
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double pure = nelbo_loss(m, batch[i], pure_block, s, b);
      CHECK(ml.parts[i].loss == pure);
      CHECK(ml.parts[i].block_size == pure_block);
      total += pure;
    }
    CHECK(a.state() == b.state());
    CHECK(tape.value(ml.loss).item() == doctest::Approx(total / 4).epsilon(1e-15));
  }
}

TEST_CASE("mixed loss is deterministic per seed") {
  Transformer<float> m(tiny_config(5, 8), 4);
  Rng data(3);
  std::vector<std::vector<Token>> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_tokens(data, 8, 5));
  TrainConfig cfg;
  auto run = [&] {
    Rng r(8);
    ad::Tape<float> tape(false);
    return tape.value(mixed_loss(tape, m, batch, cfg, NoiseSchedule(), r).loss).item();
  };
  CHECK(run() == run());
}

TEST_CASE("training on an alternating corpus drives the masked loss to zero") {
  const auto mcfg = tiny_config(2, 8, 16);
  Transformer<float> m(mcfg, 1);
  TrainConfig cfg;
  cfg.batch = 8;
  cfg.steps = 200;
  cfg.seed = 5;
  cfg.optim.lr = 3e-3;
  cfg.optim.warmup_steps = 10;
  const std::vector<Token> even{0, 1, 0, 1, 0, 1, 0, 1}, odd{1, 0, 1, 0, 1, 0, 1, 0};
  BatchSource src = [&](std::int64_t step) {
    std::vector<std::vector<Token>> b;
    for (std::size_t i = 0; i < cfg.batch; ++i) b.push_back((step + i) % 2 ? odd : even);
    return b;
  };
  TrainState state = initial_train_state(cfg);
  const auto curve = train_loop(m, src, cfg, state);
  CHECK(curve.size() == 200);
  for (const auto& r : curve) CHECK(std::isfinite(r.loss));
  CHECK(state.step == 200);

  // Masked-token cross-entropy at t = 0.5 in blocks after the first: the
  // clean prefix fixes every token there, so the optimum is 0. A fully
  // masked first block carries one unpredictable bit and is left out.
  Rng rng(99);
  const NoiseSchedule s;
  const BlockLayout layout(8, 4);
  double ce = 0.0, masked = 0.0;
  for (int k = 0; k < 200; ++k) {
    const auto& x = k % 2 ? odd : even;
    const auto noisy = forward_mask(x, 0.5, s, m.mask_id(), rng);
    std::vector<Token> in(x.begin(), x.begin() + 4);
    in.insert(in.end(), noisy.begin() + 4, noisy.end());
    const auto logits = m.evaluate_full(in, layout);
    for (std::size_t i = 4; i < 8; ++i) {
      if (in[i] != m.mask_id()) continue;
      const double l0 = logits(i, 0), l1 = logits(i, 1);
      const double mx = std::max(l0, l1);
      const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
      ce += lse - logits(i, static_cast<std::size_t>(x[i]));
      masked += 1.0;
    }
  }
  MESSAGE("masked-token CE after 200 steps: " << ce / masked);
  CHECK(ce / masked < 0.05);
}

TEST_CASE("training is reproducible and checkpoints at intervals") {
  const auto mcfg = tiny_config(3, 8);
  TrainConfig cfg;
  cfg.batch = 2;
  cfg.steps = 7;
  cfg.checkpoint_every = 3;
  Rng data(1);
  std::vector<std::vector<Token>> pool;
  for (int i = 0; i < 10; ++i) pool.push_back(random_tokens(data, 8, 3));
  BatchSource src = [&](std::int64_t step) {
    return std::vector<std::vector<Token>>{pool[step % 10], pool[(step + 3) % 10]};
  };
  auto run = [&](std::vector<std::int64_t>& ckpts) {
    Transformer<float> m(mcfg, 9);
    TrainState st = initial_train_state(cfg);
    TrainHooks hooks;
    hooks.on_checkpoint = [&](std::int64_t step, const TrainState&) { ckpts.push_back(step); };
    train_loop(m, src, cfg, st, hooks);
    return m.params().value("head.w");
  };
  std::vector<std::int64_t> c1, c2;
  CHECK(run(c1) == run(c2));
  CHECK(c1 == std::vector<std::int64_t>{3, 6, 7});

  // Resuming from a mid-run state reproduces the uninterrupted run.
  Transformer<float> full(mcfg, 9), split(mcfg, 9);
  TrainState a = initial_train_state(cfg), b = initial_train_state(cfg);
  train_loop(full, src, cfg, a);
  TrainConfig first = cfg;
  first.steps = 4;
  train_loop(split, src, first, b);
  train_loop(split, src, cfg, b);
  CHECK(full.params().value("blocks.1.mlp.w2") == split.params().value("blocks.1.mlp.w2"));
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  Transformer<float> m(tiny_config(3, 8), 1);
  m.params().value("head.b")[0] = NAN;
  TrainConfig cfg;
  cfg.batch = 1;
  cfg.steps = 3;
  BatchSource src = [](std::int64_t) {
    return std::vector<std::vector<Token>>{{0, 1, 2, 0, 1, 2, 0, 1}};
  };
  TrainState st = initial_train_state(cfg);
  try {
    train_loop(m, src, cfg, st);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    INFO(msg);
    CHECK(msg.rfind("non-finite loss at step ", 0) == 0);
    CHECK(msg.find("t=") != std::string::npos);
    CHECK(msg.find("block_size=") != std::string::npos);
  }
}
