#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sbd/data.hpp"
#include "sbd/denoiser.hpp"
#include "sbd/sampler.hpp"
#include "sbd/train.hpp"
#include "sbd/transformer.hpp"

namespace sbd {

// Assigns log p(x_i | x_{<i}) to every position of a sequence.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual int vocab_size() const = 0;
  virtual std::string name() const = 0;
  virtual std::vector<double> log_probs(std::span<const Token> x) const = 0;
};

class UniformScorer final : public Scorer {
 public:
  explicit UniformScorer(int vocab_size) : vocab_(vocab_size) {}
  int vocab_size() const override { return vocab_; }
  std::string name() const override { return "uniform"; }
  std::vector<double> log_probs(std::span<const Token> x) const override;

 private:
  int vocab_;
};

// Exact conditionals of a known Markov source.
class MarkovScorer final : public Scorer {
 public:
  explicit MarkovScorer(MarkovSpec spec);
  int vocab_size() const override { return spec_.states; }
  std::string name() const override { return "markov"; }
  std::vector<double> log_probs(std::span<const Token> x) const override;
  const MarkovSpec& spec() const { return spec_; }

 private:
  MarkovSpec spec_;
};

// A denoiser trained with the autoregressive objective. One forward over
// [mask]^L ++ x under the block-size-1 two-stream mask scores all positions.
class ArScorer final : public Scorer {
 public:
  explicit ArScorer(std::shared_ptr<const Transformer<float>> model);
  int vocab_size() const override { return model_->vocab_size(); }
  std::string name() const override { return "ar"; }
  std::vector<double> log_probs(std::span<const Token> x) const override;

 private:
  std::shared_ptr<const Transformer<float>> model_;
};

// The Bayes-optimal denoiser of a known Markov source: at each position the
// exact marginal given every visible token under the block-causal rule,
// i.e. the nearest unmasked neighbours on each side. The position's own
// token is left out, so rows at unmasked positions are leave-one-out
// posteriors. Logits are log-probabilities.
class MarkovPosteriorDenoiser final : public Denoiser {
 public:
  MarkovPosteriorDenoiser(MarkovSpec spec, std::size_t max_len);
  int vocab_size() const override { return spec_.states; }
  std::size_t max_len() const override { return max_len_; }
  std::unique_ptr<DecodeCache> new_cache() const override;

 protected:
  Tensor<double> do_evaluate(DecodeCache& cache, std::span<const Token> tokens,
                             const BlockLayout& layout, std::size_t append,
                             std::size_t n_out) const override;

 private:
  MarkovSpec spec_;
  std::size_t max_len_;
  std::vector<double> initial_;
  std::vector<std::vector<double>> powers_;  // powers_[k] = P^k, row-major V x V
};

struct GenPplResult {
  double ppl = 0.0;
  double mean_nll = 0.0;
  std::size_t tokens = 0;
  std::size_t clamped = 0;  // tokens whose probability was below 1e-12
};

// exp(mean over all tokens of -log p). Probabilities are clamped at 1e-12
// and counted in `clamped`. Throws UsageError on an empty sample set and
// StateError if a sample contains the mask id or an out-of-range token.
GenPplResult gen_ppl(const Scorer& scorer, const std::vector<std::vector<Token>>& samples);

struct NelboEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t draws = 0;
};

// Monte Carlo per-token NELBO: n_mc draws of (t, mask) per sequence, each
// scored block by block with a cache (one forward per block carrying the
// previous clean block). Draw order matches nelbo_loss().
NelboEstimate nelbo_eval(const Denoiser& model, const std::vector<std::vector<Token>>& heldout,
                         std::size_t block_size, std::size_t n_mc, Rng& rng,
                         const NoiseSchedule& schedule = NoiseSchedule());

// Closed-form NFE predictions per stage, from the per-block masked counts
// the sampler reported: a block with m masked tokens costs min(T, m)
// forwards (T = m when steps_per_block is 0); post-hoc remasking adds one.
struct NfeAudit {
  std::vector<std::size_t> predicted;
  std::vector<std::size_t> reported;
  std::uint64_t total = 0;
};

// Throws InvariantError with a per-block breakdown on any mismatch, including
// a mismatch against `observed_forwards` (an instrumented forward counter).
NfeAudit nfe_audit(const GenerationResult& result, const StagePlan& plan,
                   std::optional<std::uint64_t> observed_forwards = std::nullopt);

// NFEs of a plan when every stage after the first commits one token per
// forward: stage 1 = (L / B) * min(T, B), stage k = floor(gamma L) (+1 for
// post-hoc scoring).
std::vector<std::size_t> closed_form_nfes(const StagePlan& plan);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
  std::string to_string() const;
  void write(const std::string& path) const;
};

std::string format_double(double v);

// Stage-1 drafts shared by every cell of a grid. Sample i of seed s draws
// from Rng(derive_seed(derive_seed(s, "draft"), i)).
struct DraftSet {
  StageConfig config;
  std::vector<DraftState> drafts;
  std::vector<std::size_t> nfes;
};

DraftSet make_drafts(const Denoiser& model, std::size_t length, const StageConfig& draft,
                     std::size_t n, std::uint64_t seed);

struct CellOutcome {
  std::vector<std::vector<Token>> samples;
  double nfe_stage1 = 0.0;  // mean per sample
  double nfe_stage2 = 0.0;
};

// Applies an optional second stage to every draft; sample i revises with
// Rng(derive_seed(derive_seed(seed, "revise"), i)), the same stream in
// every cell.
CellOutcome revise(const Denoiser& model, const DraftSet& drafts,
                   const std::optional<StageConfig>& stage2, std::uint64_t seed);

struct GridOptions {
  std::size_t length = 64;
  StageConfig draft;
  std::size_t n_samples = 32;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<std::vector<Token>> heldout;  // empty: nelbo column left blank
  std::size_t nelbo_mc = 1;
};

// In every grid the nelbo column is the model's held-out NELBO at the block
// size of the cell's last stage, and nfe columns are per-sample means.

// Revision scope sweep. Columns: block2, gamma, seed, gen_ppl, nelbo, nfe_stage1, nfe_stage2.
CsvTable revision_scope_grid(const Denoiser& model, const Scorer& scorer, const GridOptions& opt,
                             const std::vector<std::size_t>& blocks,
                             const std::vector<double>& gammas);

// Remask strategies at (block2, gamma). Strategies: stage1, snapshot, posthoc,
// random. Columns: strategy, seed, gen_ppl, nelbo, nfe_stage1, nfe_stage2.
CsvTable remask_strategy_grid(const Denoiser& model, const Scorer& scorer, const GridOptions& opt,
                              std::size_t block2, double gamma);

struct NamedModel {
  std::string name;
  const Denoiser* model;
};

// Training mixes: every model at stage 1 and after snapshot revision.
// Columns: mix, stage, seed, gen_ppl, nelbo, nfe_stage1, nfe_stage2.
CsvTable training_mix_grid(const std::vector<NamedModel>& models, const Scorer& scorer,
                           const GridOptions& opt, std::size_t block2, double gamma);

// Default revision-scope blocks {4, 16, 64, 256, L} restricted to sizes that
// divide L, are at most L and are at least the draft block.
std::vector<std::size_t> default_scope_blocks(std::size_t length, std::size_t draft_block);
std::vector<double> default_gammas();

double median(std::vector<double> v);

// One-sided sign test of "a < b" over pairs; ties are dropped.
// p = P(Binomial(n, 1/2) >= wins).
struct SignTest {
  std::size_t wins = 0;
  std::size_t losses = 0;
  std::size_t ties = 0;
  double p_value = 1.0;
};
SignTest sign_test_less(const std::vector<double>& a, const std::vector<double>& b);

// Column `value` of the rows matching every (column, text) filter, in row
// order. Rows are emitted seed-major within a setting, so equal filters on
// two grids give seed-aligned vectors.
std::vector<double> select_values(const CsvTable& t,
                                  const std::vector<std::pair<std::string, std::string>>& where,
                                  const std::string& value);

}  // namespace sbd
