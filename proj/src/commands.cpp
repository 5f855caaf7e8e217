#include "sbd/commands.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sbd/checks.hpp"
#include "sbd/errors.hpp"

namespace sbd::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kMarkovAlphabet =
    "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";

std::size_t length_of(const RunConfig& c) { return c.data.length; }

DenoiserConfig resolved_model(const RunConfig& c, int vocab_size) {
  DenoiserConfig m = c.model;
  m.vocab_size = vocab_size;
  if (m.max_len == 0) m.max_len = static_cast<int>(length_of(c));
  return m;
}

Checkpoint require_checkpoint(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string(what) + ": --ckpt is required");
  if (!fs::exists(path)) throw ConfigError(std::string(what) + ": missing checkpoint " + path);
  return load_checkpoint(path);
}

void check_length(const RunConfig& c, const Checkpoint& ck) {
  if (length_of(c) > static_cast<std::size_t>(ck.model.max_len)) {
    throw ConfigError("data.length " + std::to_string(length_of(c)) +
                      " exceeds the checkpoint's max_len " + std::to_string(ck.model.max_len));
  }
}

std::vector<std::string> decode_all(const Vocab& v, const std::vector<std::vector<Token>>& xs) {
  std::vector<std::string> out;
  for (const auto& x : xs) out.push_back(decode(v, x));
  return out;
}

struct Generated {
  std::vector<std::vector<Token>> samples;
  std::vector<std::vector<std::size_t>> nfes;  // per sample, per stage
};

Generated generate_samples(const Denoiser& model, const RunConfig& c) {
  const StagePlan plan(length_of(c), c.stages);
  Generated g;
  const std::uint64_t base = derive_seed(c.seed, "sample");
  for (std::size_t i = 0; i < c.n; ++i) {
    Rng rng(derive_seed(base, i));
    model.reset_nfe();
    auto r = generate(model, plan, rng, SamplerOptions{c.use_cache});
    nfe_audit(r, plan, model.nfe());
    std::vector<std::size_t> per_stage;
    for (const auto& m : r.stages) per_stage.push_back(m.nfes);
    g.nfes.push_back(std::move(per_stage));
    g.samples.push_back(std::move(r.x));
  }
  return g;
}

}  // namespace

Vocab markov_vocab(int states) {
  if (states < 1 || static_cast<std::size_t>(states) > kMarkovAlphabet.size())
    throw ConfigError("markov sources support 1 to 62 states, got " + std::to_string(states));
  std::vector<std::uint32_t> symbols;
  for (int s = 0; s < states; ++s) symbols.push_back(static_cast<unsigned char>(kMarkovAlphabet[s]));
  return Vocab(VocabMode::kChar, symbols);
}

Dataset load_dataset(const RunConfig& c, const std::optional<Vocab>& vocab) {
  const std::size_t L = length_of(c);
  Dataset d;
  if (!fs::exists(c.data.path)) throw ConfigError("data.path does not exist: " + c.data.path);
  if (c.data.kind == "markov") {
    MarkovSpec spec;
    try {
      spec = load_markov(c.data.path);
      validate_markov(spec);
    } catch (const SpecError& e) {
      throw ConfigError(c.data.path + ": " + e.what());
    }
    d.vocab = markov_vocab(spec.states);
    if (vocab && !(*vocab == d.vocab))
      throw ConfigError("checkpoint vocabulary does not match the markov source");
    d.markov = spec;
    const std::uint64_t data_seed = derive_seed(c.seed, "data");
    d.batches = [spec, L, data_seed](std::size_t batch, std::int64_t step) {
      Rng rng(derive_seed(data_seed, static_cast<std::uint64_t>(step)));
      return gen_markov(spec, batch, L, rng);
    };
    Rng held(derive_seed(c.seed, "heldout"));
    d.heldout = gen_markov(spec, c.data.heldout, L, held);
    return d;
  }

  const std::string text = read_file(c.data.path);
  d.vocab = vocab ? *vocab : build_vocab(text, parse_vocab_mode(c.data.vocab_mode));
  std::vector<Token> ids;
  try {
    ids = encode(d.vocab, text);
  } catch (const DataError& e) {
    throw ConfigError(std::string("corpus does not fit the checkpoint vocabulary: ") + e.what());
  }
  const std::size_t chunks = ids.size() / L;
  const auto held =
      static_cast<std::size_t>(std::floor(c.data.heldout_fraction * static_cast<double>(chunks)));
  if (chunks - held == 0)
    throw ConfigError("corpus has " + std::to_string(ids.size()) + " symbols, too few for " +
                      "training chunks of length " + std::to_string(L));
  std::vector<Token> train(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>((chunks - held) * L));
  for (std::size_t k = chunks - held; k < chunks; ++k) {
    d.heldout.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(k * L),
                           ids.begin() + static_cast<std::ptrdiff_t>((k + 1) * L));
  }
  auto iter = std::make_shared<std::map<std::size_t, BatchIterator>>();
  const std::uint64_t batch_seed = derive_seed(c.seed, "batches");
  d.batches = [iter, train, L, batch_seed](std::size_t batch, std::int64_t step) {
    auto it = iter->find(batch);
    if (it == iter->end()) it = iter->emplace(batch, BatchIterator(train, L, batch, batch_seed)).first;
    return it->second.batch(step);
  };
  return d;
}

std::string escape_line(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '\\') {
      out += "\\\\";
    } else if (ch == '\n') {
      out += "\\n";
    } else if (ch == '\r') {
      out += "\\r";
    } else {
      out += ch;
    }
  }
  return out;
}

std::string unescape_line(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i == s.size()) throw DataError("dangling escape at end of sample line");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 'n': out += '\n'; break;
      case 'r': out += '\r'; break;
      default: throw DataError(std::string("unknown escape \\") + s[i] + " in sample line");
    }
  }
  return out;
}

void write_samples(const std::string& path, const std::vector<std::string>& lines) {
  std::string body;
  for (const auto& l : lines) body += escape_line(l) + "\n";
  write_file(path, body);
}

std::vector<std::string> read_samples(const std::string& path) {
  const std::string text = read_file(path);
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(unescape_line(line));
  }
  return out;
}

void prepare_output(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec) throw IoError("cannot create output directory " + c.out + ": " + ec.message());
  write_file((fs::path(c.out) / "config.json").string(), to_json(c).dump(2) + "\n");
}

Checkpoint train_checkpoint(const RunConfig& c, const Dataset& data, std::ostream& log,
                            const std::optional<Checkpoint>& resume,
                            const std::string& checkpoint_dir) {
  const DenoiserConfig mc = resolved_model(c, data.vocab.size());
  TrainConfig tc = c.train;
  tc.seed = c.seed;
  Json train_echo = to_json(tc);
  train_echo["seed"] = tc.seed;

  std::unique_ptr<Transformer<float>> model;
  TrainState state = initial_train_state(tc);
  if (resume) {
    if (!(resume->model == mc))
      throw ConfigError("checkpoint model config differs from the run config");
    if (!(resume->vocab == data.vocab))
      throw ConfigError("checkpoint vocabulary differs from the data source");
    model = std::make_unique<Transformer<float>>(model_from_checkpoint(*resume));
    state.step = resume->step;
    state.rng = Rng::from_state(resume->rng);
  } else {
    model = std::make_unique<Transformer<float>>(mc, c.seed);
  }

  auto snapshot = [&](std::int64_t step, const TrainState& st) {
    Checkpoint ck;
    ck.model = mc;
    ck.vocab = data.vocab;
    ck.train_json = train_echo.dump();
    ck.step = step;
    ck.rng = st.rng.state();
    ck.params = model->params();
    return ck;
  };

  const std::size_t batch = tc.batch;
  const BatchSource source = [&](std::int64_t step) { return data.batches(batch, step); };
  const std::int64_t every = std::max<std::int64_t>(1, tc.steps / 20);
  std::ofstream loss;
  if (!checkpoint_dir.empty()) {
    loss.open((fs::path(checkpoint_dir) / "loss.csv").string(), std::ios::binary);
    if (!loss) throw IoError("cannot write loss.csv in " + checkpoint_dir);
    loss << "step,lr,batch_loss,sequence,loss,block_size,t\n";
    loss.precision(10);
  }
  TrainHooks hooks;
  hooks.on_step = [&](const TrainStepRecord& r) {
    if (loss.is_open()) {
      for (std::size_t i = 0; i < r.sequences.size(); ++i) {
        const auto& s = r.sequences[i];
        loss << r.step << "," << r.lr << "," << r.loss << "," << i << "," << s.loss << ","
             << s.block_size << "," << s.t << "\n";
      }
    }
    if ((r.step + 1) % every == 0 || r.step + 1 == tc.steps)
      log << "step " << r.step + 1 << "/" << tc.steps << " loss " << r.loss << "\n";
  };
  hooks.on_checkpoint = [&](std::int64_t step, const TrainState& st) {
    if (checkpoint_dir.empty() || step == tc.steps) return;
    save_checkpoint((fs::path(checkpoint_dir) / ("step_" + std::to_string(step) + ".ckpt")).string(),
                    snapshot(step, st));
  };
  train_loop(*model, source, tc, state, hooks);
  return snapshot(state.step, state);
}

void cmd_train(const RunConfig& c, std::ostream& log) {
  validate_run_config(c);
  std::optional<Checkpoint> resume;
  if (!c.ckpt.empty()) resume = require_checkpoint(c.ckpt, "train --ckpt (resume)");
  const Dataset data = load_dataset(c, resume ? std::optional<Vocab>(resume->vocab) : std::nullopt);
  prepare_output(c);
  const Checkpoint ck = train_checkpoint(c, data, log, resume, c.out);
  const std::string path = (fs::path(c.out) / "model.ckpt").string();
  save_checkpoint(path, ck);
  log << "wrote " << path << "\n";
}

void cmd_sample(const RunConfig& c, std::ostream& log) {
  validate_run_config(c);
  const Checkpoint ck = require_checkpoint(c.ckpt, "sample");
  check_length(c, ck);
  const Transformer<float> model = model_from_checkpoint(ck);
  prepare_output(c);
  const Generated g = generate_samples(model, c);
  write_samples((fs::path(c.out) / "samples.txt").string(), decode_all(ck.vocab, g.samples));

  CsvTable t;
  t.header = {"seed", "sample"};
  for (std::size_t k = 0; k < c.stages.size(); ++k)
    t.header.push_back("nfe_stage" + std::to_string(k + 1));
  t.header.push_back("nfe_total");
  for (std::size_t i = 0; i < g.samples.size(); ++i) {
    std::vector<std::string> row{std::to_string(c.seed), std::to_string(i)};
    std::size_t total = 0;
    for (std::size_t v : g.nfes[i]) {
      row.push_back(std::to_string(v));
      total += v;
    }
    row.push_back(std::to_string(total));
    t.rows.push_back(std::move(row));
  }
  t.write((fs::path(c.out) / "metrics.csv").string());
  log << "wrote " << g.samples.size() << " samples to " << c.out << "\n";
}

std::unique_ptr<Scorer> make_scorer(const RunConfig& c, const Dataset& data, std::ostream& log) {
  if (c.eval.scorer == "uniform") return std::make_unique<UniformScorer>(data.vocab.size());
  if (c.eval.scorer == "markov") {
    if (!data.markov) throw ConfigError("eval.scorer markov needs a markov data source");
    return std::make_unique<MarkovScorer>(*data.markov);
  }
  if (c.eval.scorer_ckpt.empty()) throw ConfigError("eval.scorer ar needs eval.scorer_ckpt");
  Checkpoint ck;
  if (fs::exists(c.eval.scorer_ckpt)) {
    ck = load_checkpoint(c.eval.scorer_ckpt);
    if (!(ck.vocab == data.vocab))
      throw ConfigError("scorer checkpoint vocabulary differs from the data source");
  } else {
    log << "training AR scorer -> " << c.eval.scorer_ckpt << "\n";
    RunConfig sc = c;
    sc.seed = derive_seed(c.seed, "scorer");
    sc.train.autoregressive = true;
    sc.train.steps = c.eval.scorer_steps;
    ck = train_checkpoint(sc, data, log);
    const fs::path parent = fs::path(c.eval.scorer_ckpt).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    save_checkpoint(c.eval.scorer_ckpt, ck);
  }
  return std::make_unique<ArScorer>(
      std::make_shared<const Transformer<float>>(model_from_checkpoint(ck)));
}

GenPplResult cmd_eval(const RunConfig& c, std::ostream& log) {
  validate_run_config(c);
  const Checkpoint ck = require_checkpoint(c.ckpt, "eval");
  check_length(c, ck);
  const Dataset data = load_dataset(c, ck.vocab);
  const Transformer<float> model = model_from_checkpoint(ck);
  const auto scorer = make_scorer(c, data, log);
  prepare_output(c);

  std::vector<std::vector<Token>> samples;
  std::vector<double> nfe_means;
  if (!c.eval.samples.empty()) {
    if (!fs::exists(c.eval.samples))
      throw ConfigError("eval.samples does not exist: " + c.eval.samples);
    for (const auto& line : read_samples(c.eval.samples)) samples.push_back(encode(ck.vocab, line));
    if (samples.empty()) throw DataError("samples file " + c.eval.samples + " has no samples");
  } else {
    const Generated g = generate_samples(model, c);
    samples = g.samples;
    nfe_means.assign(c.stages.size(), 0.0);
    for (const auto& per : g.nfes)
      for (std::size_t k = 0; k < per.size(); ++k)
        nfe_means[k] += static_cast<double>(per[k]) / static_cast<double>(g.nfes.size());
  }
  const GenPplResult ppl = gen_ppl(*scorer, samples);

  const std::size_t block = c.eval.nelbo_block ? c.eval.nelbo_block : c.stages.front().block_size;
  Rng nelbo_rng(derive_seed(c.seed, "nelbo"));
  const NelboEstimate nelbo = data.heldout.empty()
                                  ? NelboEstimate{}
                                  : nelbo_eval(model, data.heldout, block, c.eval.nelbo_mc, nelbo_rng);

  CsvTable t{{"scorer", "seed", "n_samples", "tokens", "gen_ppl", "mean_nll", "clamped", "nelbo",
              "nelbo_se", "nelbo_block", "entropy_rate"},
             {}};
  for (std::size_t k = 0; k < c.stages.size(); ++k)
    t.header.push_back("nfe_stage" + std::to_string(k + 1));
  std::vector<std::string> row{scorer->name(),
                               std::to_string(c.seed),
                               std::to_string(samples.size()),
                               std::to_string(ppl.tokens),
                               format_double(ppl.ppl),
                               format_double(ppl.mean_nll),
                               std::to_string(ppl.clamped),
                               data.heldout.empty() ? "" : format_double(nelbo.mean),
                               data.heldout.empty() ? "" : format_double(nelbo.stderr_),
                               std::to_string(block),
                               data.markov ? format_double(entropy_rate(*data.markov)) : ""};
  for (std::size_t k = 0; k < c.stages.size(); ++k)
    row.push_back(nfe_means.empty() ? "" : format_double(nfe_means[k]));
  t.rows.push_back(std::move(row));
  t.write((fs::path(c.out) / "eval.csv").string());

  log << "gen_ppl " << ppl.ppl << " (" << scorer->name() << " scorer, " << ppl.tokens
      << " tokens";
  if (ppl.clamped) log << ", " << ppl.clamped << " clamped";
  log << ")";
  if (!data.heldout.empty()) log << ", nelbo " << nelbo.mean << " +- " << nelbo.stderr_;
  log << "\n";
  return ppl;
}

CsvTable cmd_ablate(const RunConfig& c, std::ostream& log) {
  validate_run_config(c);
  const std::size_t L = length_of(c);
  const auto& a = c.ablate;

  std::vector<std::pair<std::string, Checkpoint>> ckpts;
  if (a.axis == "training_mix") {
    if (a.checkpoints.empty())
      throw ConfigError("ablate.checkpoints must name the training-mix checkpoints");
    for (const auto& [name, path] : a.checkpoints) {
      if (!fs::exists(path))
        throw ConfigError("ablate.checkpoints." + name + ": missing checkpoint " + path);
      ckpts.emplace_back(name, load_checkpoint(path));
    }
  } else {
    ckpts.emplace_back("model", require_checkpoint(c.ckpt, "ablate"));
  }
  for (const auto& [name, ck] : ckpts) {
    check_length(c, ck);
    if (!(ck.vocab == ckpts.front().second.vocab))
      throw ConfigError("ablate checkpoints use different vocabularies");
  }
  const Dataset data = load_dataset(c, ckpts.front().second.vocab);
  const auto scorer = make_scorer(c, data, log);
  prepare_output(c);

  std::vector<Transformer<float>> models;
  models.reserve(ckpts.size());
  for (const auto& [name, ck] : ckpts) models.push_back(model_from_checkpoint(ck));

  GridOptions opt;
  opt.length = L;
  opt.draft = c.stages.front();
  opt.n_samples = a.n_samples;
  opt.seeds = a.seeds;
  opt.heldout = data.heldout;
  opt.nelbo_mc = c.eval.nelbo_mc;
  const std::size_t block2 = a.block2 ? a.block2 : L;

  CsvTable t;
  if (a.axis == "revision_scope") {
    const auto blocks = a.blocks.empty() ? default_scope_blocks(L, opt.draft.block_size) : a.blocks;
    const auto gammas = a.gammas.empty() ? default_gammas() : a.gammas;
    t = revision_scope_grid(models.front(), *scorer, opt, blocks, gammas);
  } else if (a.axis == "remask_strategy") {
    t = remask_strategy_grid(models.front(), *scorer, opt, block2, a.gamma);
  } else {
    std::vector<NamedModel> named;
    for (std::size_t i = 0; i < models.size(); ++i) named.push_back({ckpts[i].first, &models[i]});
    t = training_mix_grid(named, *scorer, opt, block2, a.gamma);
  }
  const std::string path = (fs::path(c.out) / (a.axis + ".csv")).string();
  t.write(path);
  log << "wrote " << t.rows.size() << " rows to " << path << "\n";
  return t;
}

int cmd_oracle_check(bool mutate, const std::string& out, std::ostream& log) {
  checks::CheckOptions opt;
  opt.mutate = mutate;
  std::string report;
  int failed = 0;
  for (const auto& r : checks::run_all(opt)) {
    const std::string line = checks::format(r);
    log << line << "\n" << std::flush;
    report += line + "\n";
    failed += r.passed ? 0 : 1;
  }
  const std::string summary = std::to_string(failed) + " check(s) failed";
  log << summary << "\n";
  if (!out.empty()) {
    fs::create_directories(out);
    write_file((fs::path(out) / "oracle_check.txt").string(), report + summary + "\n");
  }
  return failed;
}

}  // namespace sbd::cli
