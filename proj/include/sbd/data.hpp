#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sbd/denoiser.hpp"
#include "sbd/rng.hpp"

namespace sbd {

enum class VocabMode { kByte, kChar };

std::string to_string(VocabMode m);
VocabMode parse_vocab_mode(const std::string& s);

// Symbol <-> id map. Symbols are byte values (byte mode) or Unicode code
// points (char mode, UTF-8 input); ids follow ascending symbol order.
class Vocab {
 public:
  Vocab() = default;
  Vocab(VocabMode mode, std::vector<std::uint32_t> symbols);

  VocabMode mode() const { return mode_; }
  int size() const { return static_cast<int>(symbols_.size()); }
  Token mask_id() const { return size(); }
  const std::vector<std::uint32_t>& symbols() const { return symbols_; }
  std::optional<Token> id(std::uint32_t symbol) const;
  std::uint32_t symbol(Token id) const;

  bool operator==(const Vocab& o) const { return mode_ == o.mode_ && symbols_ == o.symbols_; }

 private:
  VocabMode mode_ = VocabMode::kChar;
  std::vector<std::uint32_t> symbols_;
  std::map<std::uint32_t, Token> index_;
};

// Throws DataError on empty input or invalid UTF-8 in char mode.
Vocab build_vocab(std::string_view corpus, VocabMode mode);

// Throws DataError listing the distinct unknown symbols.
std::vector<Token> encode(const Vocab& vocab, std::string_view text);
// Throws DataError on the mask id and IndexError on other out-of-range ids.
std::string decode(const Vocab& vocab, std::span<const Token> ids);

// Non-overlapping length-L chunks of a corpus, visited in a seed-determined
// shuffled order; each pass over the chunks is reshuffled with a fresh
// stream. The trailing remainder is dropped.
class BatchIterator {
 public:
  BatchIterator(std::vector<Token> ids, std::size_t length, std::size_t batch, std::uint64_t seed);

  std::size_t chunk_count() const { return chunks_; }
  std::size_t length() const { return length_; }
  // Chunk visiting order of one pass.
  std::vector<std::size_t> epoch_order(std::uint64_t epoch) const;
  // Batch number `step`; a pure function of (ids, L, batch, seed, step).
  std::vector<std::vector<Token>> batch(std::int64_t step) const;
  std::vector<Token> chunk(std::size_t index) const;

 private:
  std::vector<Token> ids_;
  std::size_t length_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::size_t chunks_;
  mutable std::uint64_t cached_epoch_ = UINT64_MAX;
  mutable std::vector<std::size_t> cached_order_;
};

// Row-stochastic transition matrix over V states with an optional initial
// distribution (default: stationary).
struct MarkovSpec {
  int states = 0;
  std::vector<std::vector<double>> transition;
  std::vector<double> initial;  // empty: use the stationary distribution
};

// Text format: '#' comments and blank lines ignored; first line the state
// count V; then V rows of V probabilities; optionally a final line
// "init p_0 ... p_{V-1}". Throws SpecError.
MarkovSpec parse_markov(std::string_view text);
MarkovSpec load_markov(const std::string& path);
std::string format_markov(const MarkovSpec& spec);

// Rows sum to 1 within 1e-12, entries non-negative, chain irreducible.
void validate_markov(const MarkovSpec& spec);

// Power iteration on the lazy chain (P + I) / 2 until the L1 change is
// below 1e-12.
std::vector<double> stationary_distribution(const MarkovSpec& spec);
std::vector<double> initial_distribution(const MarkovSpec& spec);

// h = -sum_s pi_s sum_s' P[s, s'] log P[s, s'] (nats).
double entropy_rate(const MarkovSpec& spec);

// One uniform per token, inverse-CDF draws.
std::vector<std::vector<Token>> gen_markov(const MarkovSpec& spec, std::size_t n_sequences,
                                           std::size_t length, Rng& rng);

// log p(x_i | x_{i-1}) per position; position 0 uses the initial distribution.
std::vector<double> markov_log_probs(const MarkovSpec& spec, std::span<const Token> x);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

// Binary id dump: "SBDI", u32 version, u32 V, u64 count, then count u32 ids,
// all little-endian.
void write_ids(const std::string& path, int vocab_size, std::span<const Token> ids);
std::pair<int, std::vector<Token>> read_ids(const std::string& path);

}  // namespace sbd
