#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "sbd/checkpoint.hpp"
#include "sbd/commands.hpp"
#include "sbd/config.hpp"
#include "sbd/errors.hpp"

using namespace sbd;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sbd_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig smoke_config(const fs::path& dir) {
  RunConfig c = parse_run_config(R"({
    "seed": 3,
    "n": 3,
    "data": {"kind": "markov", "length": 8, "heldout": 4},
    "model": {"n_layers": 1, "n_heads": 2, "d_model": 8},
    "train": {"batch": 2, "steps": 6, "lr": 0.003, "warmup_steps": 2, "checkpoint_every": 3},
    "stages": [{"block_size": 2}, {"block_size": 8, "gamma": 0.5}],
    "eval": {"nelbo_mc": 2},
    "ablate": {"seeds": [0, 1], "n_samples": 2}
  })");
  c.data.path = (dir / "chain.txt").string();
  write_file(c.data.path, "3\n0.8 0.1 0.1\n0.1 0.8 0.1\n0.1 0.1 0.8\n");
  c.out = (dir / "out").string();
  return c;
}

}  // namespace

TEST_CASE("run config parsing") {
  const RunConfig d = parse_run_config("{}");
  CHECK(d.data.length == 64);
  CHECK(d.stages.size() == 1);

  const RunConfig c = parse_run_config(R"({
    // comments are allowed
    "seed": 9,
    "train": {"lambda": 0.25, "mix": "uniform", "lr": 0.01},
    "stages": [{"block_size": 4, "unmask": "confidence-topk"},
               {"block_size": 64, "gamma": 0.3, "remask": "posthoc"}]
  })");
  CHECK(c.seed == 9);
  CHECK(c.train.lambda == 0.25);
  CHECK(c.train.mix == BlockMix::kUniform);
  CHECK(c.train.optim.lr == 0.01);
  CHECK(c.stages[0].unmask == UnmaskPolicy::kConfidenceTopK);
  CHECK(c.stages[1].remask == RemaskPolicy::kPosthoc);

  const RunConfig back = parse_run_config(to_json(c).dump());
  CHECK(to_json(back) == to_json(c));

  CHECK_THROWS_AS(parse_run_config("{"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"sede": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"lambda": "high"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"batch": -1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"train": {"mix": "trimodal"}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"stages": []})"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(R"({"model": {"vocab_size": 3}})"), ConfigError);
}

TEST_CASE("run config validation") {
  RunConfig c;
  CHECK_NOTHROW(validate_run_config(c));
  c.stages = {StageConfig{}};
  c.stages[0].block_size = 5;
  CHECK_THROWS_AS(validate_run_config(c), LayoutError);
  c = RunConfig{};
  c.train.block_draft = 6;
  CHECK_THROWS_AS(validate_run_config(c), LayoutError);
  c = RunConfig{};
  c.train.lambda = 1.5;
  CHECK_THROWS_AS(validate_run_config(c), ConfigError);
  c = RunConfig{};
  c.model.max_len = 32;
  CHECK_THROWS_AS(validate_run_config(c), ConfigError);
  c = RunConfig{};
  c.eval.scorer = "gpt";
  CHECK_THROWS_AS(validate_run_config(c), ConfigError);
  c = RunConfig{};
  c.data.kind = "text";
  CHECK_THROWS_AS(validate_run_config(c), ConfigError);
}

TEST_CASE("checkpoint roundtrip is bit-exact") {
  DenoiserConfig mc;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_model = 8;
  mc.vocab_size = 4;
  mc.max_len = 8;
  Transformer<float> model(mc, 5);
  for (auto& slot : model.params().slots()) {
    slot.m.fill(0.5f);
    slot.v.fill(0.25f);
  }
  Checkpoint ck;
  ck.model = mc;
  ck.vocab = cli::markov_vocab(4);
  ck.step = 17;
  ck.rng = Rng::State{11, 22};
  ck.params = model.params();

  const std::string bytes = serialize_checkpoint(ck);
  CHECK(bytes.substr(0, 4) == "SBD1");
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(back.model == mc);
  CHECK(back.vocab == ck.vocab);
  CHECK(back.step == 17);
  CHECK(back.rng == ck.rng);
  CHECK(serialize_checkpoint(back) == bytes);
  CHECK(back.params.slot(0).m.values()[0] == 0.5f);

  const Transformer<float> loaded = model_from_checkpoint(back);
  const std::vector<Token> x{0, 4, 2, 4, 1, 3, 4, 4};
  const BlockLayout layout(8, 2);
  CHECK(loaded.evaluate_full(x, layout) == model.evaluate_full(x, layout));

  CHECK_THROWS_AS(deserialize_checkpoint("SBD2" + bytes.substr(4)), IoError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), IoError);
}

TEST_CASE("sample line escaping") {
  const std::string s = "a\\b\nc\rd";
  CHECK(cli::escape_line(s) == "a\\\\b\\nc\\rd");
  CHECK(cli::unescape_line(cli::escape_line(s)) == s);
  CHECK_THROWS_AS(cli::unescape_line("bad\\"), DataError);
  CHECK_THROWS_AS(cli::unescape_line("bad\\q"), DataError);
}

TEST_CASE("train, resume, sample, eval and ablate") {
  const fs::path dir = scratch("pipeline");
  RunConfig c = smoke_config(dir);
  std::ostringstream log;

  cli::cmd_train(c, log);
  const std::string final_ckpt = c.out + "/model.ckpt";
  CHECK(fs::exists(final_ckpt));
  CHECK(fs::exists(c.out + "/step_3.ckpt"));
  CHECK(fs::exists(c.out + "/loss.csv"));
  CHECK(parse_run_config(read_file(c.out + "/config.json")).seed == 3);

  RunConfig again = c;
  again.out = (dir / "again").string();
  cli::cmd_train(again, log);
  CHECK(read_file(again.out + "/model.ckpt") == read_file(final_ckpt));

  RunConfig resume = c;
  resume.out = (dir / "resume").string();
  resume.ckpt = c.out + "/step_3.ckpt";
  cli::cmd_train(resume, log);
  CHECK(read_file(resume.out + "/model.ckpt") == read_file(final_ckpt));

  RunConfig s = c;
  s.ckpt = final_ckpt;
  s.out = (dir / "sample").string();
  cli::cmd_sample(s, log);
  const auto samples = cli::read_samples(s.out + "/samples.txt");
  CHECK(samples.size() == 3);
  for (const auto& line : samples) CHECK(line.size() == 8);
  const std::string metrics = read_file(s.out + "/metrics.csv");
  CHECK(metrics.rfind("seed,sample,nfe_stage1,nfe_stage2,nfe_total\n", 0) == 0);
  CHECK(metrics.find("3,0,8,4,12\n") != std::string::npos);
  const std::string first = read_file(s.out + "/samples.txt");
  cli::cmd_sample(s, log);
  CHECK(read_file(s.out + "/samples.txt") == first);

  RunConfig e = s;
  e.out = (dir / "eval").string();
  e.eval.samples = s.out + "/samples.txt";
  const auto ppl = cli::cmd_eval(e, log);
  CHECK(ppl.tokens == 24);
  CHECK(std::isfinite(ppl.ppl));
  write_file((dir / "empty.txt").string(), "");
  e.eval.samples = (dir / "empty.txt").string();
  CHECK_THROWS_AS(cli::cmd_eval(e, log), DataError);

  RunConfig ar = s;
  ar.out = (dir / "eval_ar").string();
  ar.eval.scorer = "ar";
  ar.eval.scorer_ckpt = (dir / "scorer" / "ar.ckpt").string();
  ar.eval.scorer_steps = 3;
  cli::cmd_eval(ar, log);
  CHECK(fs::exists(ar.eval.scorer_ckpt));
  CHECK(load_checkpoint(ar.eval.scorer_ckpt).step == 3);

  RunConfig a = s;
  a.out = (dir / "ablate").string();
  const CsvTable scope = cli::cmd_ablate(a, log);
  CHECK(scope.rows.size() == 2 * 6 * 2);
  a.ablate.axis = "training_mix";
  CHECK_THROWS_AS(cli::cmd_ablate(a, log), ConfigError);
  a.ablate.checkpoints = {{"bimodal", final_ckpt}, {"none", (dir / "nope.ckpt").string()}};
  CHECK_THROWS_AS(cli::cmd_ablate(a, log), ConfigError);
  a.ablate.checkpoints = {{"bimodal", final_ckpt}, {"again", again.out + "/model.ckpt"}};
  CHECK(cli::cmd_ablate(a, log).rows.size() == 2 * 2 * 2);

  RunConfig bad = c;
  bad.out = (dir / "bad").string();
  bad.stages[0].block_size = 3;
  CHECK_THROWS_AS(cli::cmd_train(bad, log), LayoutError);
  CHECK_FALSE(fs::exists(bad.out));
  RunConfig missing = s;
  missing.ckpt = (dir / "missing.ckpt").string();
  CHECK_THROWS_AS(cli::cmd_sample(missing, log), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("text corpus source") {
  const fs::path dir = scratch("text");
  RunConfig c = smoke_config(dir);
  c.data.kind = "text";
  c.data.path = (dir / "corpus.txt").string();
  c.data.heldout_fraction = 0.25;
  c.eval.scorer = "uniform";
  std::string text;
  for (int i = 0; i < 20; ++i) text += "ab\ncd ";
  write_file(c.data.path, text);
  const auto data = cli::load_dataset(c);
  CHECK(data.vocab.size() == 6);
  CHECK(data.heldout.size() == 3);
  CHECK(data.batches(2, 0).size() == 2);
  CHECK(data.batches(2, 5) == cli::load_dataset(c).batches(2, 5));

  std::ostringstream log;
  cli::cmd_train(c, log);
  RunConfig s = c;
  s.ckpt = c.out + "/model.ckpt";
  s.out = (dir / "sample").string();
  cli::cmd_sample(s, log);
  CHECK(cli::read_samples(s.out + "/samples.txt").size() == 3);
  fs::remove_all(dir);
}
