#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sbd/checkpoint.hpp"
#include "sbd/config.hpp"
#include "sbd/data.hpp"
#include "sbd/evalsuite.hpp"

namespace sbd::cli {

struct Dataset {
  Vocab vocab;
  std::optional<MarkovSpec> markov;
  std::function<std::vector<std::vector<Token>>(std::size_t batch, std::int64_t step)> batches;
  std::vector<std::vector<Token>> heldout;
};

// Markov sources print state s as the s-th symbol of 0-9A-Za-z.
Vocab markov_vocab(int states);

// Builds the data source. Missing or malformed inputs raise ConfigError.
// `vocab` (from a checkpoint) replaces the corpus-derived vocabulary for
// text sources so ids match the model.
Dataset load_dataset(const RunConfig& c, const std::optional<Vocab>& vocab = std::nullopt);

// Sample files hold one sequence per line; backslash, newline and carriage
// return inside a sequence are written as \\, \n and \r.
std::string escape_line(const std::string& s);
std::string unescape_line(const std::string& s);
void write_samples(const std::string& path, const std::vector<std::string>& lines);
std::vector<std::string> read_samples(const std::string& path);

// Creates c.out and writes the resolved config to c.out/config.json.
void prepare_output(const RunConfig& c);

// Outputs: model.ckpt (plus step_N.ckpt every checkpoint_every steps) and
// loss.csv. A non-empty c.ckpt resumes from that checkpoint.
void cmd_train(const RunConfig& c, std::ostream& log);

// Outputs: samples.txt and metrics.csv (seed, sample, nfe per stage, total).
void cmd_sample(const RunConfig& c, std::ostream& log);

// Outputs: eval.csv. Samples come from c.eval.samples or are generated.
GenPplResult cmd_eval(const RunConfig& c, std::ostream& log);

// Outputs: <axis>.csv.
CsvTable cmd_ablate(const RunConfig& c, std::ostream& log);

// Prints one line per check; returns the number of failures. With a
// non-empty out directory the report is also written to oracle_check.txt.
int cmd_oracle_check(bool mutate, const std::string& out, std::ostream& log);

// Trains a denoiser in memory; used by cmd_train and by scorer training.
Checkpoint train_checkpoint(const RunConfig& c, const Dataset& data, std::ostream& log,
                            const std::optional<Checkpoint>& resume = std::nullopt,
                            const std::string& checkpoint_dir = "");

std::unique_ptr<Scorer> make_scorer(const RunConfig& c, const Dataset& data, std::ostream& log);

}  // namespace sbd::cli
