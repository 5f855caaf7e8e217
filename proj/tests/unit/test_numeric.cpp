#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "sbd/autodiff.hpp"
#include "sbd/params.hpp"
#include "sbd/rng.hpp"
#include "sbd/tensor.hpp"

using namespace sbd;

namespace {

Tensor<double> random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Tensor<double> t = Tensor<double>::matrix(r, c);
  for (auto& e : t.values()) e = rng.uniform() * 2.0 - 1.0;
  return t;
}

// Naive triple loop, accumulation in the textbook order.
Tensor<double> matmul_reference(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> c = Tensor<double>::matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

// Central differences of f over every entry of `x`.
Tensor<double> numeric_grad(const std::function<double()>& f, Tensor<double>& x, double h = 1e-5) {
  Tensor<double> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

double rel_error(const Tensor<double>& a, const Tensor<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den = std::max(den, std::max(std::abs(a[i]), std::abs(b[i])));
  }
  return std::sqrt(num) / std::max(den, 1e-12);
}

}  // namespace

TEST_CASE("matmul hand cases") {
  Tensor<double> eye(Shape{2, 2}, {1, 0, 0, 1});
  Tensor<double> m(Shape{2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, m) == m);

  Tensor<double> a(Shape{2, 2}, {1, 0, 0, 0});
  Tensor<double> b(Shape{2, 2}, {0, 1, 1, 0});
  CHECK(matmul(a, b) == Tensor<double>(Shape{2, 2}, {0, 1, 0, 0}));
}

TEST_CASE("matmul matches triple loop reference") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto a = random_matrix(rng, 3, 4);
    auto b = random_matrix(rng, 4, 5);
    auto c = matmul(a, b);
    auto ref = matmul_reference(a, b);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::abs(c[i] - ref[i]) < 1e-12);
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  CHECK_THROWS_AS(matmul(Tensor<double>::matrix(2, 3), Tensor<double>::matrix(2, 3)), DimensionError);
}

TEST_CASE("softmax") {
  auto s = softmax(Tensor<double>(Shape{2}, {0, 0}));
  CHECK(s[0] == doctest::Approx(0.5));
  CHECK(s[1] == doctest::Approx(0.5));

  auto sat = softmax(Tensor<double>(Shape{2}, {1000, 0}));
  CHECK(std::abs(sat[0] - 1.0) < 1e-12);
  CHECK(std::abs(sat[1]) < 1e-12);
  CHECK(std::isfinite(sat[0]));

  auto t = softmax(Tensor<double>(Shape{3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(std::abs(t[0] - std::exp(1.0) / z) < 1e-15);
  CHECK(std::abs(t[2] - std::exp(3.0) / z) < 1e-15);

  SUBCASE("axis 0 of a matrix") {
    auto m = softmax(Tensor<double>(Shape{2, 2}, {0, 5, 0, 5}), 0);
    for (double v : m.values()) CHECK(v == doctest::Approx(0.5));
  }
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_matrix(rng, 4, 7);
    for (auto& e : x.values()) e *= 30.0;
    auto y = softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (double v : y.row(r)) {
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("cross entropy special cases") {
  ad::Tape<double> tape;
  std::vector<int> targets{0, 3};

  SUBCASE("uniform logits give ln V per position") {
    auto logits = tape.constant(Tensor<double>::matrix(2, 4));
    std::vector<double> w{1, 1};
    auto loss = ad::cross_entropy(tape, logits, targets, w);
    CHECK(tape.value(loss).item() == doctest::Approx(2 * std::log(4.0)).epsilon(1e-14));
  }
  SUBCASE("confident correct logits give zero") {
    Tensor<double> l = Tensor<double>::matrix(2, 4, -1e4);
    l(0, 0) = 1e4;
    l(1, 3) = 1e4;
    std::vector<double> w{1, 1};
    auto loss = ad::cross_entropy(tape, tape.constant(l), targets, w);
    CHECK(tape.value(loss).item() == doctest::Approx(0.0));
  }
  SUBCASE("zero weights give zero") {
    Rng rng(1);
    std::vector<double> w{0, 0};
    auto loss = ad::cross_entropy(tape, tape.constant(random_matrix(rng, 2, 4)), targets, w);
    CHECK(tape.value(loss).item() == 0.0);
  }
  SUBCASE("out of range target") {
    std::vector<int> bad{0, 4};
    std::vector<double> w{1, 1};
    CHECK_THROWS_AS(ad::cross_entropy(tape, tape.constant(Tensor<double>::matrix(2, 4)), bad, w),
                    IndexError);
  }
}

TEST_CASE("backward analytic cases") {
  ParamStore<double> store;
  store.add("x", Tensor<double>::scalar(3.0));
  store.add("unused", Tensor<double>::scalar(1.0));
  {
    ad::Tape<double> tape;
    auto x = tape.parameter(store, "x");
    auto y = ad::mul(tape, x, x);
    store.grad("unused")[0] = 42.0;
    ad::backward(tape, y, store);
    CHECK(store.grad("x")[0] == doctest::Approx(6.0));
    CHECK(store.grad("unused")[0] == 0.0);
  }

  // Two-class softmax + CE: d/dz = p - y.
  ParamStore<double> s2;
  s2.add("z", Tensor<double>(Shape{1, 2}, {0.3, -1.2}));
  ad::Tape<double> tape;
  auto z = tape.parameter(s2, "z");
  std::vector<int> tg{1};
  std::vector<double> w{1};
  ad::backward(tape, ad::cross_entropy(tape, z, tg, w), s2);
  const double p1 = 1.0 / (1.0 + std::exp(0.3 + 1.2));
  CHECK(std::abs(s2.grad("z")[0] - (1 - p1)) < 1e-10);
  CHECK(std::abs(s2.grad("z")[1] - (p1 - 1)) < 1e-10);
}

TEST_CASE("backward usage errors") {
  ParamStore<double> store;
  store.add("x", Tensor<double>::scalar(1.0));
  ad::Tape<double> a, b;
  auto x = a.parameter(store, "x");
  CHECK_THROWS_AS(ad::backward(b, x, store), UsageError);
  auto vec = a.constant(Tensor<double>(Shape{2}, {1, 2}));
  CHECK_THROWS_AS(ad::backward(a, vec, store), UsageError);
  ad::Tape<double> inference(false);
  auto y = inference.parameter(store, "x");
  CHECK_THROWS_AS(ad::backward(inference, y, store), UsageError);
}

TEST_CASE("every tape op matches finite differences") {
  Rng rng(11);
  ParamStore<double> store;
  store.add("a", random_matrix(rng, 3, 4));
  store.add("b", random_matrix(rng, 4, 4));
  store.add("table", random_matrix(rng, 5, 4));
  std::vector<int> ids{4, 0, 4};
  BoolMatrix allow(3, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j <= i; ++j) allow.set(i, j, true);
  std::vector<int> targets{1, 0, 2};
  std::vector<double> weights{0.5, 1.0, 2.0};

  auto build = [&](ad::Tape<double>& tape) {
    using namespace ad;
    auto a = tape.parameter(store, "a");
    auto e = embedding(tape, tape.parameter(store, "table"), ids);
    auto x = add(tape, a, e);
    auto h = matmul(tape, x, tape.parameter(store, "b"));
    h = gelu(tape, h);
    h = scale(tape, h, 0.7);
    auto att = attention(tape, h, x, add(tape, x, h), 2, allow);
    auto cat = concat_rows(tape, att, slice_rows(tape, h, 1, 3));
    auto sm = softmax_rows(tape, cat);
    auto s = sum(tape, mul(tape, sm, sm));
    auto logits = slice_cols(tape, att, 0, 3);
    auto ce = cross_entropy(tape, logits, targets, weights);
    return add(tape, ce, s);
  };

  ad::Tape<double> tape;
  auto loss = build(tape);
  ad::backward(tape, loss, store);
  auto f = [&] {
    ad::Tape<double> t(false);
    return t.value(build(t)).item();
  };
  for (auto& slot : store.slots()) {
    auto fd = numeric_grad(f, slot.value);
    CHECK_MESSAGE(rel_error(slot.grad, fd) < 1e-7, slot.name);
  }
}

TEST_CASE("layer_norm and add_row gradients") {
  Rng rng(5);
  ParamStore<double> store;
  store.add("x", random_matrix(rng, 3, 6));
  Tensor<double> g(Shape{6}), b(Shape{6});
  for (auto& e : g.values()) e = 1.0 + 0.3 * rng.normal();
  for (auto& e : b.values()) e = 0.3 * rng.normal();
  store.add("g", g);
  store.add("b", b);
  store.add("w", random_matrix(rng, 6, 6));
  auto build = [&](ad::Tape<double>& tape) {
    using namespace ad;
    auto y = layer_norm(tape, tape.parameter(store, "x"), tape.parameter(store, "g"),
                        tape.parameter(store, "b"));
    y = add_row(tape, matmul(tape, y, tape.parameter(store, "w")), tape.parameter(store, "b"));
    return sum(tape, mul(tape, y, gelu(tape, y)));
  };
  ad::Tape<double> tape;
  ad::backward(tape, build(tape), store);
  auto f = [&] {
    ad::Tape<double> t(false);
    return t.value(build(t)).item();
  };
  for (auto& slot : store.slots()) {
    auto fd = numeric_grad(f, slot.value);
    CHECK_MESSAGE(rel_error(slot.grad, fd) < 1e-7, slot.name);
  }
}

TEST_CASE("adamw") {
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;

  SUBCASE("zero gradient leaves parameters unchanged") {
    ParamStore<double> store;
    store.add("p", Tensor<double>(Shape{3}, {1.0, -2.0, 0.5}));
    for (int i = 0; i < 5; ++i) adamw_step(store, cfg, cfg.lr);
    CHECK(store.value("p") == Tensor<double>(Shape{3}, {1.0, -2.0, 0.5}));
    CHECK(store.slot(0).steps == 5);
  }

  SUBCASE("first step from zero state") {
    ParamStore<double> store;
    store.add("p", Tensor<double>(Shape{2}, {0.0, 0.0}));
    store.grad("p")[0] = 0.25;
    store.grad("p")[1] = -3.0;
    adamw_step(store, cfg, 0.1);
    CHECK(store.value("p")[0] == doctest::Approx(-0.1 * 0.25 / (0.25 + 1e-8)).epsilon(1e-12));
    CHECK(store.value("p")[1] == doctest::Approx(0.1 * 3.0 / (3.0 + 1e-8)).epsilon(1e-12));
  }

  SUBCASE("constant gradient follows the scalar recursion") {
    // Independent scalar recursion of the Adam formulas.
    const double g = 0.3, lr = 0.01;
    double m = 0, v = 0, p = 1.0;
    ParamStore<double> store;
    store.add("p", Tensor<double>::scalar(1.0));
    for (int t = 1; t <= 200; ++t) {
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1 - std::pow(0.9, t));
      const double vh = v / (1 - std::pow(0.999, t));
      p -= lr * mh / (std::sqrt(vh) + 1e-8);
      store.grad("p")[0] = g;
      adamw_step(store, cfg, lr);
    }
    CHECK(store.value("p")[0] == doctest::Approx(p).epsilon(1e-12));
    // Each update has magnitude ~lr (sign-like behaviour).
    CHECK(std::abs(p - (1.0 - 200 * lr)) < 1e-6);
  }

  SUBCASE("decoupled weight decay") {
    AdamWConfig wd = cfg;
    wd.weight_decay = 0.5;
    ParamStore<double> store;
    store.add("p", Tensor<double>::scalar(2.0));
    adamw_step(store, wd, 0.1);
    CHECK(store.value("p")[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
  }
}

TEST_CASE("warmup schedule") {
  AdamWConfig cfg;
  CHECK(scheduled_lr(cfg, 0) == doctest::Approx(3e-6));
  CHECK(scheduled_lr(cfg, 49) == doctest::Approx(1.5e-4));
  CHECK(scheduled_lr(cfg, 99) == doctest::Approx(3e-4));
  CHECK(scheduled_lr(cfg, 5000) == doctest::Approx(3e-4));
}

TEST_CASE("rng is reproducible and forks independently") {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42);
  auto s = c.state();
  const double u = c.uniform();
  CHECK(Rng::from_state(s).uniform() == u);
  CHECK(Rng(42).fork("x").next_u64() != Rng(42).fork("y").next_u64());
  double mean = 0;
  Rng d(1);
  for (int i = 0; i < 100000; ++i) mean += d.uniform();
  CHECK(mean / 100000 == doctest::Approx(0.5).epsilon(0.01));
}
