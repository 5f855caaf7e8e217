#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "sbd/checkpoint.hpp"
#include "sbd/checks.hpp"
#include "sbd/commands.hpp"
#include "sbd/config.hpp"
#include "sbd/errors.hpp"
#include "sbd/evalsuite.hpp"
#include "sbd/sampler.hpp"

namespace py = pybind11;
using namespace sbd;

namespace {

using Sequences = std::vector<std::vector<Token>>;

RunConfig run_config(const std::string& json_text) {
  RunConfig c = parse_run_config(json_text);
  validate_run_config(c);
  return c;
}

std::vector<StageConfig> stages_from_json(const std::string& json_text) {
  const Json j = Json::parse(json_text, nullptr, true, true);
  if (!j.is_array()) throw ConfigError("stages must be a JSON array");
  std::vector<StageConfig> out;
  for (const auto& s : j) out.push_back(stage_config_from_json(s));
  return out;
}

class Model {
 public:
  explicit Model(const std::string& path)
      : ckpt_(load_checkpoint(path)),
        model_(std::make_shared<Transformer<float>>(model_from_checkpoint(ckpt_))) {}

  int vocab_size() const { return model_->vocab_size(); }
  std::size_t max_len() const { return ckpt_.model.max_len; }
  std::int64_t step() const { return ckpt_.step; }

  py::dict generate(std::size_t length, const std::string& stages, std::uint64_t seed,
                    bool use_cache) const {
    const StagePlan plan(length, stages_from_json(stages));
    Rng rng(seed);
    GenerationResult r;
    {
      py::gil_scoped_release release;
      r = sbd::generate(*model_, plan, rng, SamplerOptions{use_cache});
    }
    std::vector<std::size_t> nfes;
    for (const auto& s : r.stages) nfes.push_back(s.nfes);
    py::dict out;
    out["tokens"] = r.x;
    out["text"] = decode(ckpt_.vocab, r.x);
    out["stage_nfes"] = nfes;
    out["total_nfes"] = r.total_nfes;
    return out;
  }

  py::dict nelbo(const Sequences& heldout, std::size_t block_size, std::size_t n_mc,
                 std::uint64_t seed) const {
    Rng rng(seed);
    NelboEstimate e;
    {
      py::gil_scoped_release release;
      e = nelbo_eval(*model_, heldout, block_size, n_mc, rng);
    }
    py::dict out;
    out["mean"] = e.mean;
    out["stderr"] = e.stderr_;
    out["draws"] = e.draws;
    return out;
  }

  std::vector<Token> encode_text(const std::string& text) const { return encode(ckpt_.vocab, text); }
  std::string decode_ids(const std::vector<Token>& ids) const { return decode(ckpt_.vocab, ids); }

 private:
  Checkpoint ckpt_;
  std::shared_ptr<Transformer<float>> model_;
};

py::dict ppl_dict(const GenPplResult& r) {
  py::dict out;
  out["ppl"] = r.ppl;
  out["mean_nll"] = r.mean_nll;
  out["tokens"] = r.tokens;
  out["clamped"] = r.clamped;
  return out;
}

}  // namespace

PYBIND11_MODULE(_sbd, m) {
  m.doc() = "Structural block diffusion core";

  auto error = py::register_exception<Error>(m, "SbdError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", error.ptr());
  py::register_exception<LayoutError>(m, "LayoutError", error.ptr());
  py::register_exception<DataError>(m, "DataError", error.ptr());
  py::register_exception<IoError>(m, "IoError", error.ptr());
  py::register_exception<TrainingError>(m, "TrainingError", error.ptr());

  m.def("resolve_config", [](const std::string& text) { return to_json(run_config(text)).dump(); },
        py::arg("config_json"), "Parse, validate and return the fully resolved config as JSON.");

  m.def(
      "train",
      [](const std::string& text) {
        const RunConfig c = run_config(text);
        std::ostringstream log;
        {
          py::gil_scoped_release release;
          cli::cmd_train(c, log);
        }
        return log.str();
      },
      py::arg("config_json"), "Train; writes model.ckpt and loss.csv to the config's out dir.");
  m.def(
      "sample",
      [](const std::string& text) {
        const RunConfig c = run_config(text);
        std::ostringstream log;
        {
          py::gil_scoped_release release;
          cli::cmd_sample(c, log);
        }
        return log.str();
      },
      py::arg("config_json"), "Sample; writes samples.txt and metrics.csv.");
  m.def(
      "evaluate",
      [](const std::string& text) {
        const RunConfig c = run_config(text);
        std::ostringstream log;
        GenPplResult r;
        {
          py::gil_scoped_release release;
          r = cli::cmd_eval(c, log);
        }
        return ppl_dict(r);
      },
      py::arg("config_json"), "Evaluate; writes eval.csv and returns the gen-ppl summary.");
  m.def(
      "ablate",
      [](const std::string& text) {
        const RunConfig c = run_config(text);
        std::ostringstream log;
        CsvTable t;
        {
          py::gil_scoped_release release;
          t = cli::cmd_ablate(c, log);
        }
        return py::make_tuple(t.header, t.rows);
      },
      py::arg("config_json"), "Ablation grid; writes <axis>.csv and returns (header, rows).");

  m.def(
      "oracle_check",
      [](bool mutate) {
        std::vector<checks::CheckResult> rs;
        {
          py::gil_scoped_release release;
          rs = checks::run_all(checks::CheckOptions{mutate});
        }
        py::list out;
        for (const auto& r : rs) out.append(py::make_tuple(r.name, r.passed, r.measured, r.tolerance));
        return out;
      },
      py::arg("mutate") = false, "Run the property suite; returns (name, passed, measured, tolerance).");

  m.def(
      "markov_entropy_rate", [](const std::string& path) { return entropy_rate(load_markov(path)); },
      py::arg("path"));
  m.def(
      "markov_sample",
      [](const std::string& path, std::size_t n, std::size_t length, std::uint64_t seed) {
        Rng rng(seed);
        return gen_markov(load_markov(path), n, length, rng);
      },
      py::arg("path"), py::arg("n"), py::arg("length"), py::arg("seed") = 0);
  m.def(
      "markov_gen_ppl",
      [](const std::string& path, const Sequences& samples) {
        return ppl_dict(gen_ppl(MarkovScorer(load_markov(path)), samples));
      },
      py::arg("path"), py::arg("samples"));

  m.def("remask_count", &remask_count, py::arg("gamma"), py::arg("length"));
  m.def(
      "closed_form_nfes",
      [](std::size_t length, const std::string& stages) {
        return closed_form_nfes(StagePlan(length, stages_from_json(stages)));
      },
      py::arg("length"), py::arg("stages_json"));

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def_property_readonly("vocab_size", &Model::vocab_size)
      .def_property_readonly("max_len", &Model::max_len)
      .def_property_readonly("step", &Model::step)
      .def("generate", &Model::generate, py::arg("length"), py::arg("stages_json"),
           py::arg("seed") = 0, py::arg("use_cache") = true)
      .def("nelbo", &Model::nelbo, py::arg("heldout"), py::arg("block_size"), py::arg("n_mc") = 1,
           py::arg("seed") = 0)
      .def("encode", &Model::encode_text, py::arg("text"))
      .def("decode", &Model::decode_ids, py::arg("ids"));
}
