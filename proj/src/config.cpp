#include "sbd/config.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <type_traits>

#include "sbd/errors.hpp"

namespace sbd {

namespace {

void check_keys(const Json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& item : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* k) { return item.key() == k; });
    if (!known) throw ConfigError(section + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
void read(const Json& j, const std::string& section, const char* key, T& out) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  const std::string where = section + "." + key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(where + ": expected a string");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
    if (std::is_unsigned_v<T> && v.get<std::int64_t>() < 0 && !v.is_number_unsigned())
      throw ConfigError(where + ": must be non-negative");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(where + ": expected a number");
  }
  try {
    out = v.get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

template <typename T>
void read_list(const Json& j, const std::string& section, const char* key, std::vector<T>& out) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_array()) throw ConfigError(section + "." + key + ": expected an array");
  std::vector<T> items;
  for (std::size_t i = 0; i < v.size(); ++i) {
    T item{};
    read(Json{{"item", v[i]}}, section + "." + key + "[" + std::to_string(i) + "]", "item", item);
    items.push_back(item);
  }
  out = std::move(items);
}

}  // namespace

std::string to_string(BlockMix m) { return m == BlockMix::kBimodal ? "bimodal" : "uniform"; }

BlockMix parse_block_mix(const std::string& s) {
  if (s == "bimodal") return BlockMix::kBimodal;
  if (s == "uniform") return BlockMix::kUniform;
  throw ConfigError("unknown block mix '" + s + "' (expected bimodal or uniform)");
}

Json to_json(const DenoiserConfig& c) {
  return Json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads},       {"d_model", c.d_model},
              {"vocab_size", c.vocab_size}, {"max_len", c.max_len}};
}

DenoiserConfig denoiser_config_from_json(const Json& j) {
  check_keys(j, "model", {"n_layers", "n_heads", "d_model", "vocab_size", "max_len"});
  DenoiserConfig c;
  read(j, "model", "n_layers", c.n_layers);
  read(j, "model", "n_heads", c.n_heads);
  read(j, "model", "d_model", c.d_model);
  read(j, "model", "vocab_size", c.vocab_size);
  read(j, "model", "max_len", c.max_len);
  return c;
}

Json to_json(const TrainConfig& c) {
  return Json{{"lambda", c.lambda},
              {"block_draft", c.block_draft},
              {"block_global", c.block_global},
              {"mix", to_string(c.mix)},
              {"batch", c.batch},
              {"steps", c.steps},
              {"t_min", c.t_min},
              {"checkpoint_every", c.checkpoint_every},
              {"autoregressive", c.autoregressive},
              {"lr", c.optim.lr},
              {"beta1", c.optim.beta1},
              {"beta2", c.optim.beta2},
              {"eps", c.optim.eps},
              {"weight_decay", c.optim.weight_decay},
              {"warmup_steps", c.optim.warmup_steps}};
}

TrainConfig train_config_from_json(const Json& j) {
  check_keys(j, "train",
             {"lambda", "block_draft", "block_global", "mix", "batch", "steps", "t_min",
              "checkpoint_every", "autoregressive", "lr", "beta1", "beta2", "eps",
              "weight_decay", "warmup_steps"});
  TrainConfig c;
  read(j, "train", "lambda", c.lambda);
  read(j, "train", "block_draft", c.block_draft);
  read(j, "train", "block_global", c.block_global);
  std::string mix = to_string(c.mix);
  read(j, "train", "mix", mix);
  c.mix = parse_block_mix(mix);
  read(j, "train", "batch", c.batch);
  read(j, "train", "steps", c.steps);
  read(j, "train", "t_min", c.t_min);
  read(j, "train", "checkpoint_every", c.checkpoint_every);
  read(j, "train", "autoregressive", c.autoregressive);
  read(j, "train", "lr", c.optim.lr);
  read(j, "train", "beta1", c.optim.beta1);
  read(j, "train", "beta2", c.optim.beta2);
  read(j, "train", "eps", c.optim.eps);
  read(j, "train", "weight_decay", c.optim.weight_decay);
  read(j, "train", "warmup_steps", c.optim.warmup_steps);
  return c;
}

Json to_json(const StageConfig& c) {
  return Json{{"block_size", c.block_size},
              {"gamma", c.gamma},
              {"steps_per_block", c.steps_per_block},
              {"unmask", to_string(c.unmask)},
              {"remask", to_string(c.remask)},
              {"temperature", c.temperature},
              {"nucleus_p", c.nucleus_p}};
}

StageConfig stage_config_from_json(const Json& j) {
  check_keys(j, "stage",
             {"block_size", "gamma", "steps_per_block", "unmask", "remask", "temperature",
              "nucleus_p"});
  StageConfig c;
  read(j, "stage", "block_size", c.block_size);
  read(j, "stage", "gamma", c.gamma);
  read(j, "stage", "steps_per_block", c.steps_per_block);
  std::string unmask = to_string(c.unmask), remask = to_string(c.remask);
  read(j, "stage", "unmask", unmask);
  read(j, "stage", "remask", remask);
  c.unmask = parse_unmask_policy(unmask);
  c.remask = parse_remask_policy(remask);
  read(j, "stage", "temperature", c.temperature);
  read(j, "stage", "nucleus_p", c.nucleus_p);
  return c;
}

Json to_json(const Vocab& v) {
  return Json{{"mode", to_string(v.mode())}, {"symbols", v.symbols()}};
}

Vocab vocab_from_json(const Json& j) {
  check_keys(j, "vocab", {"mode", "symbols"});
  std::string mode = "char";
  std::vector<std::uint32_t> symbols;
  read(j, "vocab", "mode", mode);
  read_list(j, "vocab", "symbols", symbols);
  try {
    return Vocab(parse_vocab_mode(mode), std::move(symbols));
  } catch (const DataError& e) {
    throw ConfigError(std::string("vocab: ") + e.what());
  }
}

Json to_json(const RunConfig& c) {
  Json stages = Json::array();
  for (const auto& s : c.stages) stages.push_back(to_json(s));
  Json model = to_json(c.model);
  model.erase("vocab_size");
  return Json{
      {"model", model},
      {"train", to_json(c.train)},
      {"stages", stages},
      {"use_cache", c.use_cache},
      {"data",
       {{"kind", c.data.kind},
        {"path", c.data.path},
        {"length", c.data.length},
        {"vocab_mode", c.data.vocab_mode},
        {"heldout", c.data.heldout},
        {"heldout_fraction", c.data.heldout_fraction}}},
      {"eval",
       {{"scorer", c.eval.scorer},
        {"scorer_ckpt", c.eval.scorer_ckpt},
        {"scorer_steps", c.eval.scorer_steps},
        {"samples", c.eval.samples},
        {"nelbo_mc", c.eval.nelbo_mc},
        {"nelbo_block", c.eval.nelbo_block}}},
      {"ablate",
       {{"axis", c.ablate.axis},
        {"seeds", c.ablate.seeds},
        {"n_samples", c.ablate.n_samples},
        {"blocks", c.ablate.blocks},
        {"gammas", c.ablate.gammas},
        {"block2", c.ablate.block2},
        {"gamma", c.ablate.gamma},
        {"checkpoints", c.ablate.checkpoints}}},
      {"seed", c.seed},
      {"out", c.out},
      {"n", c.n},
      {"ckpt", c.ckpt}};
}

RunConfig parse_run_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "config",
             {"model", "train", "stages", "use_cache", "data", "eval", "ablate", "seed", "out",
              "n", "ckpt"});
  RunConfig c;
  if (j.contains("model")) {
    Json m = j.at("model");
    if (m.is_object() && m.contains("vocab_size"))
      throw ConfigError("model.vocab_size is derived from the data and cannot be set");
    c.model = denoiser_config_from_json(m);
  }
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("stages")) {
    const Json& s = j.at("stages");
    if (!s.is_array() || s.empty()) throw ConfigError("stages: expected a non-empty array");
    c.stages.clear();
    for (const auto& item : s) c.stages.push_back(stage_config_from_json(item));
  }
  read(j, "config", "use_cache", c.use_cache);
  if (j.contains("data")) {
    const Json& d = j.at("data");
    check_keys(d, "data", {"kind", "path", "length", "vocab_mode", "heldout", "heldout_fraction"});
    read(d, "data", "kind", c.data.kind);
    read(d, "data", "path", c.data.path);
    read(d, "data", "length", c.data.length);
    read(d, "data", "vocab_mode", c.data.vocab_mode);
    read(d, "data", "heldout", c.data.heldout);
    read(d, "data", "heldout_fraction", c.data.heldout_fraction);
  }
  if (j.contains("eval")) {
    const Json& e = j.at("eval");
    check_keys(e, "eval",
               {"scorer", "scorer_ckpt", "scorer_steps", "samples", "nelbo_mc", "nelbo_block"});
    read(e, "eval", "scorer", c.eval.scorer);
    read(e, "eval", "scorer_ckpt", c.eval.scorer_ckpt);
    read(e, "eval", "scorer_steps", c.eval.scorer_steps);
    read(e, "eval", "samples", c.eval.samples);
    read(e, "eval", "nelbo_mc", c.eval.nelbo_mc);
    read(e, "eval", "nelbo_block", c.eval.nelbo_block);
  }
  if (j.contains("ablate")) {
    const Json& a = j.at("ablate");
    check_keys(a, "ablate",
               {"axis", "seeds", "n_samples", "blocks", "gammas", "block2", "gamma",
                "checkpoints"});
    read(a, "ablate", "axis", c.ablate.axis);
    read_list(a, "ablate", "seeds", c.ablate.seeds);
    read(a, "ablate", "n_samples", c.ablate.n_samples);
    read_list(a, "ablate", "blocks", c.ablate.blocks);
    read_list(a, "ablate", "gammas", c.ablate.gammas);
    read(a, "ablate", "block2", c.ablate.block2);
    read(a, "ablate", "gamma", c.ablate.gamma);
    if (a.contains("checkpoints")) {
      const Json& cp = a.at("checkpoints");
      if (!cp.is_object()) throw ConfigError("ablate.checkpoints: expected an object");
      for (const auto& item : cp.items()) {
        if (!item.value().is_string())
          throw ConfigError("ablate.checkpoints." + item.key() + ": expected a path string");
        c.ablate.checkpoints[item.key()] = item.value().get<std::string>();
      }
    }
  }
  read(j, "config", "seed", c.seed);
  read(j, "config", "out", c.out);
  read(j, "config", "n", c.n);
  read(j, "config", "ckpt", c.ckpt);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  return parse_run_config(text);
}

void validate_run_config(const RunConfig& c) {
  const std::size_t L = c.data.length;
  if (L == 0) throw ConfigError("data.length must be positive");
  if (c.data.kind != "markov" && c.data.kind != "text")
    throw ConfigError("data.kind must be markov or text, got '" + c.data.kind + "'");
  parse_vocab_mode(c.data.vocab_mode);
  if (!(c.data.heldout_fraction >= 0.0 && c.data.heldout_fraction < 1.0))
    throw ConfigError("data.heldout_fraction must lie in [0, 1)");

  DenoiserConfig m = c.model;
  m.vocab_size = std::max(m.vocab_size, 1);
  if (m.max_len == 0) m.max_len = static_cast<int>(L);
  m.validate();
  if (static_cast<std::size_t>(m.max_len) < L)
    throw ConfigError("model.max_len " + std::to_string(m.max_len) + " is below data.length " +
                      std::to_string(L));

  c.train.validate(L);
  if (c.train.optim.lr <= 0.0 || !std::isfinite(c.train.optim.lr))
    throw ConfigError("train.lr must be positive");
  StagePlan(L, c.stages);

  if (c.eval.scorer != "markov" && c.eval.scorer != "ar" && c.eval.scorer != "uniform")
    throw ConfigError("eval.scorer must be markov, ar or uniform, got '" + c.eval.scorer + "'");
  if (c.eval.scorer == "markov" && c.data.kind != "markov")
    throw ConfigError("eval.scorer markov needs a markov data source");
  if (c.eval.nelbo_mc == 0) throw ConfigError("eval.nelbo_mc must be positive");
  if (c.eval.nelbo_block != 0) BlockLayout(L, c.eval.nelbo_block);

  const auto& a = c.ablate;
  if (a.axis != "revision_scope" && a.axis != "remask_strategy" && a.axis != "training_mix")
    throw ConfigError("ablate.axis must be revision_scope, remask_strategy or training_mix");
  if (a.seeds.empty()) throw ConfigError("ablate.seeds must not be empty");
  if (a.n_samples == 0) throw ConfigError("ablate.n_samples must be positive");
  const std::size_t draft = c.stages.front().block_size;
  for (std::size_t b : a.blocks) {
    BlockLayout(L, b);
    if (b < draft) throw ConfigError("ablate.blocks: revision block below the draft block");
  }
  for (double g : a.gammas) remask_count(g, L);
  if (a.block2 != 0) BlockLayout(L, a.block2);
  remask_count(a.gamma, L);
  if (c.n == 0) throw ConfigError("n must be positive");
}

}  // namespace sbd
