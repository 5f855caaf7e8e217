#include "sbd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "sbd/errors.hpp"

namespace sbd {

std::string to_string(VocabMode m) { return m == VocabMode::kByte ? "byte" : "char"; }

VocabMode parse_vocab_mode(const std::string& s) {
  if (s == "byte") return VocabMode::kByte;
  if (s == "char") return VocabMode::kChar;
  throw ConfigError("unknown vocab mode '" + s + "' (byte|char)");
}

namespace {

// Decodes UTF-8 into code points; throws DataError on malformed input.
std::vector<std::uint32_t> utf8_decode(std::string_view s) {
  std::vector<std::uint32_t> out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      len = 1;
      cp = c;
    } else if ((c >> 5) == 0x6) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c >> 4) == 0xE) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c >> 3) == 0x1E) {
      len = 4;
      cp = c & 0x07;
    } else {
      throw DataError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + len > s.size()) throw DataError("truncated UTF-8 sequence at offset " + std::to_string(i));
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) {
        throw DataError("invalid UTF-8 continuation byte at offset " + std::to_string(i + k));
      }
      cp = (cp << 6) | (cc & 0x3F);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

void utf8_append(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

std::vector<std::uint32_t> symbols_of(std::string_view text, VocabMode mode) {
  if (mode == VocabMode::kChar) return utf8_decode(text);
  std::vector<std::uint32_t> out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
  return out;
}

std::string describe_symbol(std::uint32_t s, VocabMode mode) {
  std::ostringstream o;
  if (s >= 0x20 && s < 0x7F) {
    o << '\'' << static_cast<char>(s) << '\'';
  } else {
    o << (mode == VocabMode::kByte ? "byte 0x" : "U+") << std::hex << std::uppercase << s;
  }
  return o.str();
}

}  // namespace

Vocab::Vocab(VocabMode mode, std::vector<std::uint32_t> symbols)
    : mode_(mode), symbols_(std::move(symbols)) {
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    if (i > 0 && symbols_[i] <= symbols_[i - 1]) {
      throw DataError("vocab symbols must be strictly increasing");
    }
    index_[symbols_[i]] = static_cast<Token>(i);
  }
}

std::optional<Token> Vocab::id(std::uint32_t symbol) const {
  auto it = index_.find(symbol);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::uint32_t Vocab::symbol(Token id) const {
  if (id == mask_id()) throw DataError("cannot decode the mask id " + std::to_string(id));
  if (id < 0 || id > mask_id()) {
    throw IndexError("token id " + std::to_string(id) + " outside [0, " + std::to_string(size()) +
                     ")");
  }
  return symbols_[static_cast<std::size_t>(id)];
}

Vocab build_vocab(std::string_view corpus, VocabMode mode) {
  if (corpus.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  const auto syms = symbols_of(corpus, mode);
  std::set<std::uint32_t> uniq(syms.begin(), syms.end());
  return Vocab(mode, std::vector<std::uint32_t>(uniq.begin(), uniq.end()));
}

std::vector<Token> encode(const Vocab& vocab, std::string_view text) {
  const auto syms = symbols_of(text, vocab.mode());
  std::vector<Token> ids;
  ids.reserve(syms.size());
  std::set<std::uint32_t> unknown;
  for (auto s : syms) {
    if (auto id = vocab.id(s)) {
      ids.push_back(*id);
    } else {
      unknown.insert(s);
    }
  }
  if (!unknown.empty()) {
    std::string msg = "unknown symbols:";
    std::size_t shown = 0;
    for (auto s : unknown) {
      if (shown++ == 10) {
        msg += " ...";
        break;
      }
      msg += " " + describe_symbol(s, vocab.mode());
    }
    throw DataError(msg);
  }
  return ids;
}

std::string decode(const Vocab& vocab, std::span<const Token> ids) {
  std::string out;
  for (Token id : ids) {
    const auto s = vocab.symbol(id);
    if (vocab.mode() == VocabMode::kByte) {
      out += static_cast<char>(s);
    } else {
      utf8_append(out, s);
    }
  }
  return out;
}

BatchIterator::BatchIterator(std::vector<Token> ids, std::size_t length, std::size_t batch,
                             std::uint64_t seed)
    : ids_(std::move(ids)), length_(length), batch_(batch), seed_(seed) {
  if (length == 0 || batch == 0) throw ConfigError("batch_iter: length and batch must be positive");
  if (ids_.size() < length) {
    throw DataError("corpus has " + std::to_string(ids_.size()) +
                    " tokens, fewer than the sequence length " + std::to_string(length));
  }
  chunks_ = ids_.size() / length;
}

std::vector<std::size_t> BatchIterator::epoch_order(std::uint64_t epoch) const {
  std::vector<std::size_t> order(chunks_);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(derive_seed(seed_, "batches"), epoch));
  for (std::size_t i = chunks_; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<Token> BatchIterator::chunk(std::size_t index) const {
  const auto lo = static_cast<std::ptrdiff_t>(index * length_);
  return std::vector<Token>(ids_.begin() + lo, ids_.begin() + lo + static_cast<std::ptrdiff_t>(length_));
}

std::vector<std::vector<Token>> BatchIterator::batch(std::int64_t step) const {
  std::vector<std::vector<Token>> out;
  for (std::size_t i = 0; i < batch_; ++i) {
    const std::uint64_t p = static_cast<std::uint64_t>(step) * batch_ + i;
    const std::uint64_t epoch = p / chunks_;
    if (epoch != cached_epoch_) {
      cached_order_ = epoch_order(epoch);
      cached_epoch_ = epoch;
    }
    out.push_back(chunk(cached_order_[p % chunks_]));
  }
  return out;
}

MarkovSpec parse_markov(std::string_view text) {
  std::vector<std::vector<double>> rows;
  std::vector<double> init;
  int dim = -1;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    auto read_numbers = [&](std::istringstream& s, std::vector<double>& out) {
      std::string tok;
      while (s >> tok) {
        try {
          std::size_t used = 0;
          out.push_back(std::stod(tok, &used));
          if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
          throw SpecError("line " + std::to_string(lineno) + ": bad number '" + tok + "'");
        }
      }
    };
    if (dim < 0) {
      try {
        std::size_t used = 0;
        dim = std::stoi(first, &used);
        if (used != first.size() || dim <= 0) throw std::invalid_argument(first);
      } catch (const std::exception&) {
        throw SpecError("line " + std::to_string(lineno) + ": expected a positive state count");
      }
      std::string extra;
      if (ls >> extra) throw SpecError("line " + std::to_string(lineno) + ": trailing text");
      continue;
    }
    if (first == "init") {
      if (!init.empty()) throw SpecError("line " + std::to_string(lineno) + ": duplicate init");
      read_numbers(ls, init);
      if (init.size() != static_cast<std::size_t>(dim)) {
        throw SpecError("line " + std::to_string(lineno) + ": init needs " + std::to_string(dim) +
                        " entries");
      }
      continue;
    }
    std::istringstream whole(line);
    std::vector<double> row;
    read_numbers(whole, row);
    if (row.size() != static_cast<std::size_t>(dim)) {
      throw SpecError("line " + std::to_string(lineno) + ": row has " + std::to_string(row.size()) +
                      " entries, expected " + std::to_string(dim));
    }
    rows.push_back(std::move(row));
  }
  if (dim < 0) throw SpecError("markov spec is empty");
  if (rows.size() != static_cast<std::size_t>(dim)) {
    throw SpecError("markov spec has " + std::to_string(rows.size()) + " rows, expected " +
                    std::to_string(dim));
  }
  MarkovSpec spec{dim, std::move(rows), std::move(init)};
  validate_markov(spec);
  return spec;
}

MarkovSpec load_markov(const std::string& path) { return parse_markov(read_file(path)); }

std::string format_markov(const MarkovSpec& spec) {
  std::ostringstream o;
  o.precision(17);
  o << spec.states << '\n';
  for (const auto& row : spec.transition) {
    for (std::size_t j = 0; j < row.size(); ++j) o << (j ? " " : "") << row[j];
    o << '\n';
  }
  if (!spec.initial.empty()) {
    o << "init";
    for (double p : spec.initial) o << ' ' << p;
    o << '\n';
  }
  return o.str();
}

void validate_markov(const MarkovSpec& spec) {
  const auto V = static_cast<std::size_t>(spec.states);
  if (spec.states <= 0 || spec.transition.size() != V) throw SpecError("markov: bad dimensions");
  auto check_dist = [](const std::vector<double>& p, const std::string& what) {
    double sum = 0.0;
    for (double v : p) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw SpecError(what + " has a negative or non-finite entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      std::ostringstream o;
      o.precision(15);
      o << what << " sums to " << sum << ", not 1";
      throw SpecError(o.str());
    }
  };
  for (std::size_t s = 0; s < V; ++s) {
    if (spec.transition[s].size() != V) throw SpecError("markov: bad row length");
    check_dist(spec.transition[s], "row " + std::to_string(s));
  }
  if (!spec.initial.empty()) {
    if (spec.initial.size() != V) throw SpecError("markov: bad init length");
    check_dist(spec.initial, "init");
  }
  // Irreducible iff state 0 reaches every state and every state reaches 0.
  for (bool forward : {true, false}) {
    std::vector<bool> seen(V, false);
    std::vector<std::size_t> stack{0};
    seen[0] = true;
    while (!stack.empty()) {
      const std::size_t s = stack.back();
      stack.pop_back();
      for (std::size_t t = 0; t < V; ++t) {
        const double p = forward ? spec.transition[s][t] : spec.transition[t][s];
        if (p > 0.0 && !seen[t]) {
          seen[t] = true;
          stack.push_back(t);
        }
      }
    }
    for (std::size_t s = 0; s < V; ++s) {
      if (!seen[s]) throw SpecError("markov chain is not irreducible (state " + std::to_string(s) + ")");
    }
  }
}

std::vector<double> stationary_distribution(const MarkovSpec& spec) {
  const auto V = static_cast<std::size_t>(spec.states);
  std::vector<double> pi(V, 1.0 / static_cast<double>(V)), next(V);
  for (int iter = 0; iter < 10000000; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t s = 0; s < V; ++s) {
      next[s] += 0.5 * pi[s];
      for (std::size_t t = 0; t < V; ++t) next[t] += 0.5 * pi[s] * spec.transition[s][t];
    }
    double change = 0.0;
    for (std::size_t s = 0; s < V; ++s) change += std::abs(next[s] - pi[s]);
    pi.swap(next);
    if (change < 1e-12) return pi;
  }
  throw InvariantError("stationary distribution did not converge");
}

std::vector<double> initial_distribution(const MarkovSpec& spec) {
  return spec.initial.empty() ? stationary_distribution(spec) : spec.initial;
}

double entropy_rate(const MarkovSpec& spec) {
  const auto pi = stationary_distribution(spec);
  double h = 0.0;
  for (std::size_t s = 0; s < pi.size(); ++s)
    for (double p : spec.transition[s])
      if (p > 0.0) h -= pi[s] * p * std::log(p);
  return h;
}

namespace {

Token draw_from(const std::vector<double>& p, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    cum += p[v];
    if (u < cum) return static_cast<Token>(v);
  }
  for (std::size_t v = p.size(); v-- > 0;)
    if (p[v] > 0.0) return static_cast<Token>(v);
  return 0;
}

}  // namespace

std::vector<std::vector<Token>> gen_markov(const MarkovSpec& spec, std::size_t n_sequences,
                                           std::size_t length, Rng& rng) {
  validate_markov(spec);
  const auto init = initial_distribution(spec);
  std::vector<std::vector<Token>> out(n_sequences, std::vector<Token>(length));
  for (auto& seq : out) {
    for (std::size_t i = 0; i < length; ++i) {
      seq[i] = draw_from(i == 0 ? init : spec.transition[static_cast<std::size_t>(seq[i - 1])], rng);
    }
  }
  return out;
}

std::vector<double> markov_log_probs(const MarkovSpec& spec, std::span<const Token> x) {
  const auto init = initial_distribution(spec);
  std::vector<double> lp(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < 0 || x[i] >= spec.states) throw IndexError("token outside the markov state space");
    const auto v = static_cast<std::size_t>(x[i]);
    const double p = i == 0 ? init[v] : spec.transition[static_cast<std::size_t>(x[i - 1])][v];
    lp[i] = std::log(p);
  }
  return lp;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

namespace {

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int b = 0; b < bytes; ++b) out += static_cast<char>((v >> (8 * b)) & 0xFF);
}

std::uint64_t get_le(std::string_view in, std::size_t& off, int bytes) {
  if (off + static_cast<std::size_t>(bytes) > in.size()) throw IoError("truncated id dump");
  std::uint64_t v = 0;
  for (int b = 0; b < bytes; ++b) v |= std::uint64_t(static_cast<unsigned char>(in[off + b])) << (8 * b);
  off += static_cast<std::size_t>(bytes);
  return v;
}

}  // namespace

void write_ids(const std::string& path, int vocab_size, std::span<const Token> ids) {
  std::string out = "SBDI";
  put_le(out, 1, 4);
  put_le(out, static_cast<std::uint64_t>(vocab_size), 4);
  put_le(out, ids.size(), 8);
  for (Token t : ids) put_le(out, static_cast<std::uint32_t>(t), 4);
  write_file(path, out);
}

std::pair<int, std::vector<Token>> read_ids(const std::string& path) {
  const std::string in = read_file(path);
  if (in.size() < 4 || in.compare(0, 4, "SBDI") != 0) throw IoError("'" + path + "' is not an id dump");
  std::size_t off = 4;
  const auto version = get_le(in, off, 4);
  if (version != 1) throw IoError("unsupported id dump version " + std::to_string(version));
  const auto V = static_cast<int>(get_le(in, off, 4));
  const auto count = get_le(in, off, 8);
  if (in.size() - off != count * 4) throw IoError("id dump size does not match its header");
  std::vector<Token> ids(count);
  for (auto& t : ids) {
    t = static_cast<Token>(get_le(in, off, 4));
    if (t < 0 || t >= V) throw IoError("id dump holds an id outside [0, V)");
  }
  return {V, std::move(ids)};
}

}  // namespace sbd
