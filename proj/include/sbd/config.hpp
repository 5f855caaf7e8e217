#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sbd/data.hpp"
#include "sbd/sampler.hpp"
#include "sbd/train.hpp"
#include "sbd/transformer.hpp"

namespace sbd {

using Json = nlohmann::json;

// Data source. kind "markov": `path` is a transition-matrix file and
// sequences are drawn from the chain. kind "text": `path` is a UTF-8 corpus
// cut into length-L chunks, the last `heldout_fraction` held out.
struct DataConfig {
  std::string kind = "markov";
  std::string path = "data/markov16.txt";
  std::size_t length = 64;
  std::string vocab_mode = "char";
  std::size_t heldout = 64;  // markov: held-out sequences
  double heldout_fraction = 0.1;
};

struct EvalConfig {
  std::string scorer = "markov";  // markov | ar | uniform
  std::string scorer_ckpt;        // ar: loaded, or trained and saved when absent
  std::int64_t scorer_steps = 1000;
  std::string samples;  // decoded samples file; empty: generate n samples
  std::size_t nelbo_mc = 4;
  std::size_t nelbo_block = 0;  // 0: the first stage's block size
};

struct AblateConfig {
  std::string axis = "revision_scope";  // revision_scope | remask_strategy | training_mix
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t n_samples = 32;
  std::vector<std::size_t> blocks;  // empty: {4, 16, 64, 256, L} filtered
  std::vector<double> gammas;       // empty: {0, 0.1, 0.25, 0.5, 0.75, 1}
  std::size_t block2 = 0;           // 0: L
  double gamma = 0.5;
  std::map<std::string, std::string> checkpoints;  // training_mix: name -> path
};

// One JSON document with sections "model", "train", "stages", "data",
// "eval", "ablate" and top-level "seed", "out", "n", "ckpt", "use_cache".
// Every key is optional; unknown keys are rejected.
struct RunConfig {
  DenoiserConfig model;  // vocab_size comes from the data; max_len 0 means L
  TrainConfig train;
  std::vector<StageConfig> stages{StageConfig{}};
  bool use_cache = true;
  DataConfig data;
  EvalConfig eval;
  AblateConfig ablate;
  std::uint64_t seed = 0;
  std::string out = "out";
  std::size_t n = 16;
  std::string ckpt;
};

Json to_json(const DenoiserConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const StageConfig& c);
Json to_json(const Vocab& v);
Json to_json(const RunConfig& c);

DenoiserConfig denoiser_config_from_json(const Json& j);
TrainConfig train_config_from_json(const Json& j);
StageConfig stage_config_from_json(const Json& j);
Vocab vocab_from_json(const Json& j);

// Throws ConfigError on malformed JSON, unknown keys or wrong types.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

std::string to_string(BlockMix m);
BlockMix parse_block_mix(const std::string& s);

// Structural checks that need no files: block sizes divide L, stage plan
// order, probabilities in range, known enum names. Throws ConfigError or
// LayoutError.
void validate_run_config(const RunConfig& c);

}  // namespace sbd
