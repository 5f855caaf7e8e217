#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "sbd/data.hpp"
#include "sbd/errors.hpp"

using namespace sbd;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("sbd_test_" + name)).string();
}

MarkovSpec two_state(double a, double b) {
  return MarkovSpec{2, {{1 - a, a}, {b, 1 - b}}, {}};
}

}  // namespace

TEST_CASE("vocab construction") {
  const Vocab v = build_vocab("abba", VocabMode::kChar);
  CHECK(v.size() == 2);
  CHECK(v.mask_id() == 2);
  CHECK(v.id('a') == 0);
  CHECK(v.id('b') == 1);
  CHECK(build_vocab("abba", VocabMode::kChar) == v);

  std::string all;
  for (int c = 0; c < 256; ++c) all += static_cast<char>(c);
  const Vocab bytes = build_vocab(all + all, VocabMode::kByte);
  CHECK(bytes.size() == 256);
  CHECK(build_vocab("hello", VocabMode::kByte).size() == 4);
  CHECK_THROWS_AS(build_vocab("", VocabMode::kChar), DataError);
  CHECK_THROWS_AS(build_vocab("\xff", VocabMode::kChar), DataError);
}

TEST_CASE("encode and decode") {
  const std::string text = "h\xC3\xA9llo w\xC3\xB6rld \xE2\x9C\x93";
  const Vocab v = build_vocab(text, VocabMode::kChar);
  CHECK(v.size() == 10);
  const auto ids = encode(v, text);
  CHECK(ids.size() == 13);
  CHECK(decode(v, ids) == text);
  CHECK(encode(v, "").empty());

  const Vocab b = build_vocab(text, VocabMode::kByte);
  CHECK(decode(b, encode(b, text)) == text);

  const std::vector<Token> masked{0, v.mask_id()};
  CHECK_THROWS_AS(decode(v, masked), DataError);
  const std::vector<Token> out_of_range{0, 42};
  CHECK_THROWS_AS(decode(v, out_of_range), IndexError);
  try {
    encode(v, "hello zebra");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("'z'") != std::string::npos);
    CHECK(msg.find("'b'") != std::string::npos);
    CHECK(msg.find("'a'") != std::string::npos);
  }
}

TEST_CASE("batch iterator") {
  std::vector<Token> ten(10);
  for (int i = 0; i < 10; ++i) ten[i] = i;
  BatchIterator it(ten, 4, 1, 0);
  CHECK(it.chunk_count() == 2);
  CHECK(it.chunk(1) == std::vector<Token>{4, 5, 6, 7});

  std::vector<Token> ids(1000);
  for (int i = 0; i < 1000; ++i) ids[i] = i % 7;
  BatchIterator a(ids, 8, 5, 11), b(ids, 8, 5, 11), c(ids, 8, 5, 12);
  for (std::int64_t s = 0; s < 30; ++s) CHECK(a.batch(s) == b.batch(s));
  CHECK(a.batch(3) == BatchIterator(ids, 8, 5, 11).batch(3));

  auto oa = a.epoch_order(0), oc = c.epoch_order(0);
  CHECK(oa != oc);
  std::sort(oa.begin(), oa.end());
  std::sort(oc.begin(), oc.end());
  CHECK(oa == oc);
  CHECK(a.epoch_order(0) != a.epoch_order(1));

  CHECK_THROWS_AS(BatchIterator(std::vector<Token>{1, 2, 3}, 4, 1, 0), DataError);
}

TEST_CASE("markov spec parsing and validation") {
  const std::string text =
      "# two states\n"
      "2\n"
      "0.9 0.1   # sticky\n"
      "\n"
      "0.2 0.8\n"
      "init 0.5 0.5\n";
  const MarkovSpec s = parse_markov(text);
  CHECK(s.states == 2);
  CHECK(s.transition[1][0] == 0.2);
  CHECK(s.initial == std::vector<double>{0.5, 0.5});
  CHECK(parse_markov(format_markov(s)).transition == s.transition);

  CHECK_THROWS_AS(parse_markov("2\n0.9 0.2\n0.2 0.8\n"), SpecError);
  CHECK_THROWS_AS(parse_markov("2\n0.9 0.1\n"), SpecError);
  CHECK_THROWS_AS(parse_markov("2\n1 0\n0 1\n"), SpecError);
  CHECK_THROWS_AS(parse_markov("2\n0.9 x\n0.2 0.8\n"), SpecError);
  CHECK_THROWS_AS(parse_markov(""), SpecError);
  CHECK_THROWS_AS(parse_markov("2\n1.5 -0.5\n0.2 0.8\n"), SpecError);
}

TEST_CASE("stationary distribution and entropy rate") {
  const auto pi = stationary_distribution(two_state(0.1, 0.2));
  CHECK(pi[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-11));
  CHECK(pi[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-11));

  CHECK(entropy_rate(two_state(0.5, 0.5)) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const MarkovSpec cycle{3, {{0, 1, 0}, {0, 0, 1}, {1, 0, 0}}, {}};
  CHECK(entropy_rate(cycle) == 0.0);
  const auto pc = stationary_distribution(cycle);
  for (double p : pc) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-11));
}

TEST_CASE("entropy rate agrees with long-run empirical NLL") {
  const MarkovSpec spec = two_state(0.1, 0.2);
  Rng rng(31);
  const auto seqs = gen_markov(spec, 1, 1000000, rng);
  const auto lp = markov_log_probs(spec, seqs[0]);
  double nll = 0.0;
  for (std::size_t i = 1; i < lp.size(); ++i) nll -= lp[i];
  nll /= static_cast<double>(lp.size() - 1);
  const double h = entropy_rate(spec);
  CHECK(std::abs(nll - h) / h < 0.005);

  // Transition frequencies: chi-square with 2 degrees of freedom at 3 sigma.
  double n[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 1; i < seqs[0].size(); ++i) n[seqs[0][i - 1]][seqs[0][i]] += 1;
  double chi2 = 0.0;
  for (int s = 0; s < 2; ++s) {
    const double row = n[s][0] + n[s][1];
    for (int t = 0; t < 2; ++t) {
      const double e = row * spec.transition[s][t];
      chi2 += (n[s][t] - e) * (n[s][t] - e) / e;
    }
  }
  CHECK(chi2 < 2.0 + 3.0 * 2.0);
}

TEST_CASE("markov generation is reproducible") {
  const MarkovSpec spec = two_state(0.3, 0.4);
  Rng a(1), b(1);
  CHECK(gen_markov(spec, 4, 16, a) == gen_markov(spec, 4, 16, b));
  CHECK(a.draws() == 64);
}

TEST_CASE("id dump roundtrip") {
  const std::string path = temp_path("ids.bin");
  const std::vector<Token> ids{0, 5, 3, 2, 7};
  write_ids(path, 8, ids);
  const auto [V, back] = read_ids(path);
  CHECK(V == 8);
  CHECK(back == ids);
  const std::string raw = read_file(path);
  CHECK(raw.substr(0, 4) == "SBDI");
  CHECK(raw.size() == 4 + 4 + 4 + 8 + 5 * 4);
  CHECK(static_cast<unsigned char>(raw[24]) == 5);

  write_file(path, "NOPE");
  CHECK_THROWS_AS(read_ids(path), IoError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(read_file(path), IoError);
}
