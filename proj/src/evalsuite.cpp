#include "sbd/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <tuple>

#include "sbd/autodiff.hpp"
#include "sbd/errors.hpp"

namespace sbd {

namespace {

constexpr double kProbFloor = 1e-12;

double log_softmax_at(std::span<const double> logits, std::size_t target) {
  double mx = -INFINITY;
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return logits[target] - mx - std::log(z);
}

}  // namespace

std::vector<double> UniformScorer::log_probs(std::span<const Token> x) const {
  return std::vector<double>(x.size(), -std::log(static_cast<double>(vocab_)));
}

MarkovScorer::MarkovScorer(MarkovSpec spec) : spec_(std::move(spec)) { validate_markov(spec_); }

std::vector<double> MarkovScorer::log_probs(std::span<const Token> x) const {
  return markov_log_probs(spec_, x);
}

ArScorer::ArScorer(std::shared_ptr<const Transformer<float>> model) : model_(std::move(model)) {
  if (!model_) throw UsageError("ArScorer: null model");
}

std::vector<double> ArScorer::log_probs(std::span<const Token> x) const {
  const std::size_t L = x.size();
  if (L == 0) return {};
  if (L > model_->max_len()) throw CapacityError("ArScorer: sequence longer than max_len");
  std::vector<Token> tokens(L, model_->mask_id());
  tokens.insert(tokens.end(), x.begin(), x.end());
  std::vector<int> pos(2 * L);
  for (std::size_t i = 0; i < 2 * L; ++i) pos[i] = static_cast<int>(i % L);
  ad::Tape<float> tape(/*record=*/false);
  const auto out =
      model_->forward(tape, tokens, pos, build_two_stream_mask(L, 1), nullptr, 0, L);
  const Tensor<double> logits = tape.value(out.logits).cast<double>();
  std::vector<double> lp(L);
  for (std::size_t i = 0; i < L; ++i)
    lp[i] = log_softmax_at(logits.row(i), static_cast<std::size_t>(x[i]));
  return lp;
}

namespace {

struct TokenCache final : DecodeCache {
  std::vector<Token> tokens;
  std::size_t length() const override { return tokens.size(); }
};

}  // namespace

MarkovPosteriorDenoiser::MarkovPosteriorDenoiser(MarkovSpec spec, std::size_t max_len)
    : spec_(std::move(spec)), max_len_(max_len) {
  validate_markov(spec_);
  initial_ = initial_distribution(spec_);
  const std::size_t V = static_cast<std::size_t>(spec_.states);
  std::vector<double> id(V * V, 0.0);
  for (std::size_t s = 0; s < V; ++s) id[s * V + s] = 1.0;
  powers_.push_back(id);
  for (std::size_t k = 1; k <= max_len_; ++k) {
    const auto& prev = powers_.back();
    std::vector<double> next(V * V, 0.0);
    for (std::size_t i = 0; i < V; ++i)
      for (std::size_t m = 0; m < V; ++m)
        for (std::size_t j = 0; j < V; ++j)
          next[i * V + j] += prev[i * V + m] * spec_.transition[m][j];
    powers_.push_back(std::move(next));
  }
}

std::unique_ptr<DecodeCache> MarkovPosteriorDenoiser::new_cache() const {
  return std::make_unique<TokenCache>();
}

Tensor<double> MarkovPosteriorDenoiser::do_evaluate(DecodeCache& cache,
                                                    std::span<const Token> tokens,
                                                    const BlockLayout& layout, std::size_t append,
                                                    std::size_t n_out) const {
  auto& c = static_cast<TokenCache&>(cache);
  std::vector<Token> seq = c.tokens;
  seq.insert(seq.end(), tokens.begin(), tokens.end());
  const std::size_t V = static_cast<std::size_t>(spec_.states);
  const Token mask = mask_id();
  const std::size_t first = seq.size() - n_out;
  Tensor<double> out = Tensor<double>::matrix(n_out, V);
  for (std::size_t r = 0; r < n_out; ++r) {
    const std::size_t p = first + r;
    const std::size_t end = std::min(seq.size(), layout.block_end(layout.block_of(p)));
    std::optional<std::size_t> left, right;
    for (std::size_t q = p; q-- > 0;)
      if (seq[q] != mask) {
        left = q;
        break;
      }
    for (std::size_t q = p + 1; q < end; ++q)
      if (seq[q] != mask) {
        right = q;
        break;
      }
    std::vector<double> w(V, 0.0);
    double z = 0.0;
    for (std::size_t s = 0; s < V; ++s) {
      double a = 0.0;
      if (left) {
        a = powers_[p - *left][static_cast<std::size_t>(seq[*left]) * V + s];
      } else {
        for (std::size_t i = 0; i < V; ++i) a += initial_[i] * powers_[p][i * V + s];
      }
      if (right) a *= powers_[*right - p][s * V + static_cast<std::size_t>(seq[*right])];
      w[s] = a;
      z += a;
    }
    for (std::size_t s = 0; s < V; ++s) out(r, s) = std::log(std::max(w[s] / z, 1e-300));
  }
  c.tokens.insert(c.tokens.end(), tokens.begin(), tokens.begin() + append);
  return out;
}

GenPplResult gen_ppl(const Scorer& scorer, const std::vector<std::vector<Token>>& samples) {
  if (samples.empty()) throw UsageError("gen_ppl: no samples");
  const int V = scorer.vocab_size();
  GenPplResult r;
  double nll = 0.0;
  for (const auto& s : samples) {
    for (Token t : s) {
      if (t == V) throw StateError("gen_ppl: sample contains the mask token");
      if (t < 0 || t > V) throw StateError("gen_ppl: token id out of range");
    }
    const auto lp = scorer.log_probs(s);
    for (double v : lp) {
      double p = std::exp(v);
      if (!(p >= kProbFloor)) {
        ++r.clamped;
        p = kProbFloor;
      }
      nll -= std::log(p);
    }
    r.tokens += s.size();
  }
  if (r.tokens == 0) throw UsageError("gen_ppl: samples are empty");
  r.mean_nll = nll / static_cast<double>(r.tokens);
  r.ppl = std::exp(r.mean_nll);
  return r;
}

NelboEstimate nelbo_eval(const Denoiser& model, const std::vector<std::vector<Token>>& heldout,
                         std::size_t block_size, std::size_t n_mc, Rng& rng,
                         const NoiseSchedule& schedule) {
  if (heldout.empty()) throw UsageError("nelbo_eval: no held-out sequences");
  if (n_mc == 0) throw UsageError("nelbo_eval: n_mc must be positive");
  const Token mask = model.mask_id();
  std::vector<double> values;
  values.reserve(heldout.size() * n_mc);
  for (const auto& x : heldout) {
    const std::size_t L = x.size();
    const BlockLayout layout(L, block_size);
    for (std::size_t d = 0; d < n_mc; ++d) {
      const NoisedSequence noised = corrupt(x, schedule, mask, rng);
      const double w = schedule.weight(noised.t) / static_cast<double>(L);
      auto cache = model.new_cache();
      double total = 0.0;
      for (std::size_t b = 0; b < layout.n_blocks(); ++b) {
        const std::size_t lo = layout.block_begin(b), hi = layout.block_end(b);
        bool any = false;
        for (std::size_t i = lo; i < hi; ++i) any = any || noised.noisy[i] == mask;
        if (!any) continue;
        const std::size_t c = cache->length();
        std::vector<Token> tokens(x.begin() + static_cast<std::ptrdiff_t>(c),
                                  x.begin() + static_cast<std::ptrdiff_t>(lo));
        tokens.insert(tokens.end(), noised.noisy.begin() + static_cast<std::ptrdiff_t>(lo),
                      noised.noisy.begin() + static_cast<std::ptrdiff_t>(hi));
        const Tensor<double> logits =
            model.evaluate(*cache, tokens, layout, lo - c, block_size);
        for (std::size_t i = lo; i < hi; ++i) {
          if (noised.noisy[i] != mask) continue;
          total -= w * log_softmax_at(logits.row(i - lo), static_cast<std::size_t>(x[i]));
        }
      }
      values.push_back(total);
    }
  }
  NelboEstimate e;
  e.draws = values.size();
  double sum = 0.0;
  for (double v : values) sum += v;
  e.mean = sum / static_cast<double>(e.draws);
  if (e.draws > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - e.mean) * (v - e.mean);
    e.stderr_ = std::sqrt(ss / static_cast<double>(e.draws - 1) / static_cast<double>(e.draws));
  }
  return e;
}

NfeAudit nfe_audit(const GenerationResult& result, const StagePlan& plan,
                   std::optional<std::uint64_t> observed_forwards) {
  NfeAudit a;
  std::ostringstream err;
  for (const StageMetrics& m : result.stages) {
    if (m.stage < 0 || static_cast<std::size_t>(m.stage) >= plan.size())
      throw InvariantError("nfe_audit: stage index outside the plan");
    const StageConfig& cfg = plan[static_cast<std::size_t>(m.stage)];
    std::size_t predicted = 0;
    for (std::size_t b = 0; b < m.block_masked.size(); ++b) {
      const std::size_t mb = m.block_masked[b];
      const std::size_t want = cfg.steps_per_block == 0 ? mb : std::min(cfg.steps_per_block, mb);
      predicted += want;
      if (m.block_nfes[b] != want) {
        err << "stage " << m.stage << " block " << b << ": masked " << mb << ", predicted " << want
            << ", reported " << m.block_nfes[b] << "\n";
      }
    }
    const std::size_t posthoc = m.stage > 0 && cfg.remask == RemaskPolicy::kPosthoc ? 1 : 0;
    if (m.posthoc_nfes != posthoc) {
      err << "stage " << m.stage << ": post-hoc forwards predicted " << posthoc << ", reported "
          << m.posthoc_nfes << "\n";
    }
    predicted += posthoc;
    if (m.nfes != predicted) {
      err << "stage " << m.stage << ": predicted " << predicted << ", reported " << m.nfes << "\n";
    }
    a.predicted.push_back(predicted);
    a.reported.push_back(m.nfes);
    a.total += m.nfes;
  }
  if (observed_forwards && *observed_forwards != a.total) {
    err << "observed " << *observed_forwards << " forwards, reported " << a.total << "\n";
  }
  const std::string msg = err.str();
  if (!msg.empty()) throw InvariantError("nfe_audit mismatch:\n" + msg);
  return a;
}

std::vector<std::size_t> closed_form_nfes(const StagePlan& plan) {
  const std::size_t L = plan.length();
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < plan.size(); ++k) {
    const StageConfig& cfg = plan[k];
    if (k == 0) {
      const std::size_t per_block =
          cfg.steps_per_block == 0 ? cfg.block_size : std::min(cfg.steps_per_block, cfg.block_size);
      out.push_back(L / cfg.block_size * per_block);
      continue;
    }
    if (cfg.steps_per_block != 0) {
      throw UsageError("closed_form_nfes: later stages must commit one token per forward");
    }
    out.push_back(remask_count(cfg.gamma, L) + (cfg.remask == RemaskPolicy::kPosthoc ? 1 : 0));
  }
  return out;
}

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw UsageError("csv: no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

std::string CsvTable::to_string() const {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
  return os.str();
}

void CsvTable::write(const std::string& path) const { write_file(path, to_string()); }

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

DraftSet make_drafts(const Denoiser& model, std::size_t length, const StageConfig& draft,
                     std::size_t n, std::uint64_t seed) {
  const StagePlan plan(length, {draft});
  DraftSet set;
  set.config = draft;
  const std::uint64_t base = derive_seed(seed, "draft");
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(base, i));
    GenerationResult r = generate(model, plan, rng);
    DraftState d;
    d.x = std::move(r.x);
    d.trace = std::move(r.trace);
    d.nfe_count = r.total_nfes;
    d.stage = 0;
    set.nfes.push_back(r.stages[0].nfes);
    set.drafts.push_back(std::move(d));
  }
  return set;
}

CellOutcome revise(const Denoiser& model, const DraftSet& drafts,
                   const std::optional<StageConfig>& stage2, std::uint64_t seed) {
  if (drafts.drafts.empty()) throw UsageError("revise: empty draft set");
  CellOutcome out;
  const double n = static_cast<double>(drafts.drafts.size());
  for (std::size_t v : drafts.nfes) out.nfe_stage1 += static_cast<double>(v) / n;
  if (!stage2) {
    for (const auto& d : drafts.drafts) out.samples.push_back(d.x);
    return out;
  }
  const StagePlan plan(drafts.drafts[0].x.size(), {drafts.config, *stage2});
  const std::uint64_t base = derive_seed(seed, "revise");
  for (std::size_t i = 0; i < drafts.drafts.size(); ++i) {
    Rng rng(derive_seed(base, i));
    GenerationResult r = generate_from(model, plan, drafts.drafts[i], 1, rng);
    out.nfe_stage2 += static_cast<double>(r.stages[0].nfes) / n;
    out.samples.push_back(std::move(r.x));
  }
  return out;
}

namespace {

StageConfig revision_stage(const StageConfig& draft, std::size_t block, double gamma,
                           RemaskPolicy policy) {
  StageConfig s = draft;
  s.block_size = block;
  s.gamma = gamma;
  s.remask = policy;
  s.steps_per_block = 0;
  return s;
}

// NELBO of `model` on the held-out set at one block size, memoized per
// (model, seed, block) so grid cells sharing a setting report one number.
class NelboColumn {
 public:
  explicit NelboColumn(const GridOptions& opt) : opt_(opt) {}

  std::string get(const Denoiser& model, std::uint64_t seed, std::size_t block) {
    if (opt_.heldout.empty()) return "";
    const auto key = std::make_tuple(&model, seed, block);
    auto it = memo_.find(key);
    if (it == memo_.end()) {
      Rng rng(derive_seed(derive_seed(seed, "nelbo"), block));
      const double v = nelbo_eval(model, opt_.heldout, block, opt_.nelbo_mc, rng).mean;
      it = memo_.emplace(key, format_double(v)).first;
    }
    return it->second;
  }

 private:
  const GridOptions& opt_;
  std::map<std::tuple<const Denoiser*, std::uint64_t, std::size_t>, std::string> memo_;
};

std::vector<std::string> metric_cells(const Scorer& scorer, const CellOutcome& c,
                                      const std::string& nelbo) {
  return {format_double(gen_ppl(scorer, c.samples).ppl), nelbo, format_double(c.nfe_stage1),
          format_double(c.nfe_stage2)};
}

void append(std::vector<std::string>& row, const std::vector<std::string>& more) {
  row.insert(row.end(), more.begin(), more.end());
}

}  // namespace

CsvTable revision_scope_grid(const Denoiser& model, const Scorer& scorer, const GridOptions& opt,
                             const std::vector<std::size_t>& blocks,
                             const std::vector<double>& gammas) {
  CsvTable t{{"block2", "gamma", "seed", "gen_ppl", "nelbo", "nfe_stage1", "nfe_stage2"}, {}};
  NelboColumn nelbo(opt);
  std::vector<DraftSet> drafts;
  for (std::uint64_t s : opt.seeds)
    drafts.push_back(make_drafts(model, opt.length, opt.draft, opt.n_samples, s));
  for (std::size_t b : blocks) {
    for (double g : gammas) {
      for (std::size_t si = 0; si < opt.seeds.size(); ++si) {
        const std::uint64_t s = opt.seeds[si];
        const auto cell = revise(model, drafts[si],
                                 revision_stage(opt.draft, b, g, RemaskPolicy::kSnapshot), s);
        std::vector<std::string> row{std::to_string(b), format_double(g), std::to_string(s)};
        append(row, metric_cells(scorer, cell, nelbo.get(model, s, b)));
        t.rows.push_back(std::move(row));
      }
    }
  }
  return t;
}

CsvTable remask_strategy_grid(const Denoiser& model, const Scorer& scorer, const GridOptions& opt,
                              std::size_t block2, double gamma) {
  CsvTable t{{"strategy", "seed", "gen_ppl", "nelbo", "nfe_stage1", "nfe_stage2"}, {}};
  NelboColumn nelbo(opt);
  std::vector<DraftSet> drafts;
  for (std::uint64_t s : opt.seeds)
    drafts.push_back(make_drafts(model, opt.length, opt.draft, opt.n_samples, s));
  const std::vector<std::pair<std::string, std::optional<RemaskPolicy>>> strategies{
      {"stage1", std::nullopt},
      {"snapshot", RemaskPolicy::kSnapshot},
      {"posthoc", RemaskPolicy::kPosthoc},
      {"random", RemaskPolicy::kRandom}};
  for (const auto& [name, policy] : strategies) {
    for (std::size_t si = 0; si < opt.seeds.size(); ++si) {
      const std::uint64_t s = opt.seeds[si];
      std::optional<StageConfig> stage2;
      if (policy) stage2 = revision_stage(opt.draft, block2, gamma, *policy);
      const auto cell = revise(model, drafts[si], stage2, s);
      std::vector<std::string> row{name, std::to_string(s)};
      append(row, metric_cells(scorer, cell,
                               nelbo.get(model, s, policy ? block2 : opt.draft.block_size)));
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

CsvTable training_mix_grid(const std::vector<NamedModel>& models, const Scorer& scorer,
                           const GridOptions& opt, std::size_t block2, double gamma) {
  CsvTable t{{"mix", "stage", "seed", "gen_ppl", "nelbo", "nfe_stage1", "nfe_stage2"}, {}};
  NelboColumn nelbo(opt);
  for (const NamedModel& nm : models) {
    if (nm.model == nullptr) throw UsageError("training_mix_grid: null model");
    std::vector<DraftSet> drafts;
    for (std::uint64_t s : opt.seeds)
      drafts.push_back(make_drafts(*nm.model, opt.length, opt.draft, opt.n_samples, s));
    for (int stage = 1; stage <= 2; ++stage) {
      for (std::size_t si = 0; si < opt.seeds.size(); ++si) {
        const std::uint64_t s = opt.seeds[si];
        std::optional<StageConfig> stage2;
        if (stage == 2) stage2 = revision_stage(opt.draft, block2, gamma, RemaskPolicy::kSnapshot);
        const auto cell = revise(*nm.model, drafts[si], stage2, s);
        std::vector<std::string> row{nm.name, std::to_string(stage), std::to_string(s)};
        append(row, metric_cells(scorer, cell,
                                 nelbo.get(*nm.model, s, stage == 2 ? block2 : opt.draft.block_size)));
        t.rows.push_back(std::move(row));
      }
    }
  }
  return t;
}

std::vector<std::size_t> default_scope_blocks(std::size_t length, std::size_t draft_block) {
  std::vector<std::size_t> out;
  for (std::size_t b : {std::size_t{4}, std::size_t{16}, std::size_t{64}, std::size_t{256}, length}) {
    if (b > length || length % b != 0 || b < draft_block) continue;
    if (std::find(out.begin(), out.end(), b) == out.end()) out.push_back(b);
  }
  return out;
}

std::vector<double> default_gammas() { return {0.0, 0.1, 0.25, 0.5, 0.75, 1.0}; }

double median(std::vector<double> v) {
  if (v.empty()) throw UsageError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

SignTest sign_test_less(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("sign test: unpaired inputs");
  SignTest t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) {
      ++t.wins;
    } else if (a[i] > b[i]) {
      ++t.losses;
    } else {
      ++t.ties;
    }
  }
  const std::size_t n = t.wins + t.losses;
  double p = 0.0;
  for (std::size_t k = t.wins; k <= n; ++k) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) -
                  static_cast<double>(n) * std::log(2.0));
  }
  t.p_value = std::min(1.0, p);
  return t;
}

std::vector<double> select_values(const CsvTable& t,
                                  const std::vector<std::pair<std::string, std::string>>& where,
                                  const std::string& value) {
  std::vector<std::pair<std::size_t, std::string>> filters;
  for (const auto& [col, text] : where) filters.emplace_back(t.column(col), text);
  const std::size_t vc = t.column(value);
  std::vector<double> out;
  for (const auto& row : t.rows) {
    bool ok = true;
    for (const auto& [c, text] : filters) ok = ok && row[c] == text;
    if (ok) out.push_back(std::stod(row[vc]));
  }
  return out;
}

}  // namespace sbd
