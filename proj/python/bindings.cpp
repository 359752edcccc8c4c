#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "raretail/config.hpp"
#include "raretail/diagnostics.hpp"
#include "raretail/error.hpp"
#include "raretail/estimator.hpp"
#include "raretail/model.hpp"
#include "raretail/observable.hpp"
#include "raretail/oracle.hpp"
#include "raretail/parallel.hpp"
#include "raretail/pipeline.hpp"
#include "raretail/store.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace raretail;

namespace {

// Python objects cross the boundary as JSON text.
nlohmann::json to_json(const py::handle& obj) {
  if (py::isinstance<py::str>(obj)) return nlohmann::json::parse(obj.cast<std::string>());
  const auto text = py::module_::import("json").attr("dumps")(obj).cast<std::string>();
  return nlohmann::json::parse(text);
}

py::object to_python(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

std::shared_ptr<Model> mutable_model(ModelPtr m) { return std::const_pointer_cast<Model>(std::move(m)); }

Trajectory scored(const Model& model, const TokenSeq& prompt, const TokenSeq& completion) {
  model.check_tokens(prompt);
  model.check_tokens(completion);
  Trajectory t{prompt, {}, {}};
  TokenSeq seq(prompt);
  for (Token tok : completion) {
    t.step_logprobs.push_back(model.next_logprobs(seq)[tok]);
    seq.push_back(tok);
    t.completion.push_back(tok);
  }
  return t;
}

py::dict histogram_dict(const HistogramEstimate& h) {
  py::dict d;
  d["edges"] = h.edges;
  d["density"] = h.density;
  d["ci_lo"] = h.ci_lo;
  d["ci_hi"] = h.ci_hi;
  d["n_eff"] = h.n_eff;
  return d;
}

ExperimentConfig config_from(const py::handle& obj) {
  if (py::isinstance(obj, py::module_::import("os").attr("PathLike")))
    return ExperimentConfig::load(obj.cast<fs::path>());
  if (py::isinstance<py::str>(obj)) {
    const auto s = obj.cast<std::string>();
    if (!s.empty() && s.front() != '{') return ExperimentConfig::load(s);
  }
  return ExperimentConfig::from_json(to_json(obj));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Tail probabilities of autoregressive models";
  m.attr("__version__") = "0.1.0";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  auto validation = py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<CapExceededError>(m, "CapExceededError", validation.ptr());
  py::register_exception<ConvergenceError>(m, "ConvergenceError", base.ptr());
  auto io = py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<NetworkError>(m, "NetworkError", io.ptr());
  py::register_exception<ProtocolError>(m, "ProtocolError", base.ptr());

  // Models ----------------------------------------------------------------
  py::class_<Model, std::shared_ptr<Model>>(m, "Model")
      .def_property_readonly("vocab_size", &Model::vocab_size)
      .def_property_readonly("vocab", [](const Model& self) { return self.vocab().pieces(); })
      .def_property_readonly("eos", &Model::eos)
      .def("next_logprobs",
           [](const Model& self, const TokenSeq& prefix) { return self.next_logprobs(prefix); },
           py::arg("prefix"))
      .def("encode", [](const Model& self, const std::string& text) { return self.vocab().encode(text); })
      .def("decode", [](const Model& self, const TokenSeq& tokens) { return self.vocab().detokenize(tokens); });

  m.def("uniform_model",
        [](std::size_t v) { return mutable_model(std::make_shared<UniformModel>(v)); },
        py::arg("vocab_size"));
  m.def("load_model",
        [](py::object doc) {
          if (py::isinstance(doc, py::module_::import("os").attr("PathLike")))
            return mutable_model(load_model_file(doc.cast<fs::path>()));
          return mutable_model(load_model(to_json(doc)));
        },
        py::arg("definition"), "Model from a definition dict, JSON text or file path.");
  m.def("train_ngram",
        [](const std::string& text, std::size_t order, const std::string& scheme) {
          const auto s = scheme == "char" ? TokenizerScheme::Char : TokenizerScheme::Word;
          return mutable_model(NGramModel::train(text, order, s));
        },
        py::arg("text"), py::arg("order"), py::arg("scheme") = "word");

  m.def("score",
        [](const Model& model, const TokenSeq& prompt, const TokenSeq& completion) {
          return score(model, prompt, completion);
        },
        py::arg("model"), py::arg("prompt"), py::arg("completion"));
  m.def("sample_completion",
        [](const Model& model, const TokenSeq& prompt, std::size_t max_len, std::uint64_t seed) {
          Rng rng(seed);
          const auto t = sample_completion(model, prompt, max_len, rng);
          return py::make_tuple(t.completion, t.logprob());
        },
        py::arg("model"), py::arg("prompt"), py::arg("max_len"), py::arg("seed") = 0,
        "Returns (completion, log-probability).");

  // Observables -----------------------------------------------------------
  m.def("ari", &ari, py::arg("text"), py::arg("cap") = kAriDefaultCap);
  m.def("repeats", [](const TokenSeq& tokens) { return repeats(std::span<const Token>(tokens)); },
        py::arg("tokens"));
  m.def("observe",
        [](const std::string& name, const Model& model, const TokenSeq& prompt,
           const TokenSeq& completion, double cap) {
          return Observable::parse(name, cap)(scored(model, prompt, completion), model);
        },
        py::arg("observable"), py::arg("model"), py::arg("prompt"), py::arg("completion"),
        py::arg("cap") = kAriDefaultCap);

  // Intervals and diagnostics ---------------------------------------------
  m.def("wilson_interval",
        [](std::size_t k, std::size_t n, double coverage) {
          const auto w = wilson_interval(k, n, coverage);
          return py::make_tuple(w.lower, w.upper);
        },
        py::arg("successes"), py::arg("trials"), py::arg("coverage") = kDefaultCoverage);
  m.def("gelman_rubin",
        [](const std::vector<std::vector<double>>& chains, double threshold) {
          const auto r = gelman_rubin(chains, threshold);
          py::dict d;
          d["gr"] = r.gr;
          d["between"] = r.between;
          d["within"] = r.within;
          d["divergent"] = r.divergent;
          d["passed"] = r.pass;
          return d;
        },
        py::arg("chains"), py::arg("threshold") = kDefaultGrThreshold);

  // MBAR ------------------------------------------------------------------
  py::class_<WeightedSampleSet>(m, "SampleSet")
      .def(py::init<>())
      .def("add",
           [](WeightedSampleSet& self, double lambda, const std::vector<double>& values,
              double weight) {
             const auto s = self.state_for(lambda);
             for (double v : values) self.add(s, v, weight);
           },
           py::arg("lambda_"), py::arg("values"), py::arg("weight") = 1.0)
      .def("solve",
           [](WeightedSampleSet& self, double tol, std::size_t max_iter) {
             return solve_mbar(self, tol, max_iter).log_z;
           },
           py::arg("tol") = kDefaultMbarTol, py::arg("max_iter") = kDefaultMbarMaxIter,
           "Solves the MBAR equations; returns log Z per state.")
      .def_property_readonly("lambdas", &WeightedSampleSet::lambdas)
      .def_property_readonly("counts", &WeightedSampleSet::counts)
      .def_readonly("log_z", &WeightedSampleSet::log_z)
      .def("log_partition", [](const WeightedSampleSet& self, double l) { return log_partition(l, self); })
      .def("weight", [](const WeightedSampleSet& self, double o) { return importance_weight(o, self); })
      .def("histogram",
           [](const WeightedSampleSet& self, const std::vector<double>& edges) {
             return histogram_dict(reconstruct_histogram(self, edges));
           },
           py::arg("edges"))
      .def("overlap",
           [](const WeightedSampleSet& self, double cutoff) {
             const auto o = overlap_matrix(self, cutoff);
             py::dict d;
             d["matrix"] = o.matrix;
             d["lambdas"] = o.lambdas;
             d["flagged"] = o.flagged;
             return d;
           },
           py::arg("cutoff") = kOverlapCutoff);

  // Oracle ----------------------------------------------------------------
  py::class_<EnumeratedEnsemble>(m, "Ensemble")
      .def("__len__", [](const EnumeratedEnsemble& e) { return e.entries.size(); })
      .def_property_readonly("completions",
                             [](const EnumeratedEnsemble& e) {
                               std::vector<TokenSeq> out;
                               for (const auto& x : e.entries) out.push_back(x.completion);
                               return out;
                             })
      .def_property_readonly("probabilities",
                             [](const EnumeratedEnsemble& e) {
                               std::vector<double> out;
                               for (const auto& x : e.entries) out.push_back(x.prob);
                               return out;
                             })
      .def_property_readonly("values",
                             [](const EnumeratedEnsemble& e) {
                               std::vector<double> out;
                               for (const auto& x : e.entries) out.push_back(x.value);
                               return out;
                             })
      .def("log_z", [](const EnumeratedEnsemble& e, double l) { return log_partition_function(e, l); })
      .def("z", [](const EnumeratedEnsemble& e, double l) { return partition_function(e, l); })
      .def("tilted_pmf", [](const EnumeratedEnsemble& e, double l) { return tilted_pmf(e, l); })
      .def("tilted_mean", [](const EnumeratedEnsemble& e, double l) { return tilted_mean(e, l); })
      .def("marginal",
           [](const EnumeratedEnsemble& e, const std::vector<double>& edges, double l) {
             return marginal(e, edges, l);
           },
           py::arg("edges"), py::arg("lambda_") = 0.0);
  m.def("enumerate",
        [](const Model& model, const TokenSeq& prompt, std::size_t length,
           const std::string& observable, double cap) {
          return enumerate(model, prompt, length, Observable::parse(observable, cap));
        },
        py::arg("model"), py::arg("prompt"), py::arg("length"), py::arg("observable") = "ARI",
        py::arg("cap") = kAriDefaultCap);

  // Pipeline --------------------------------------------------------------
  m.def("run_pipeline",
        [](py::object config, const fs::path& out, std::optional<std::size_t> workers) {
          const auto c = config_from(config);
          RunManifest manifest;
          {
            py::gil_scoped_release release;
            manifest = run_pipeline(c, out, workers.value_or(default_workers()));
          }
          return to_python(manifest.to_json());
        },
        py::arg("config"), py::arg("out"), py::arg("workers") = py::none(),
        "Sample, estimate, diagnose and report into `out`; returns the manifest.");
  m.def("resume_pipeline",
        [](const fs::path& run, std::optional<std::size_t> workers) {
          py::gil_scoped_release release;
          return resume_pipeline(run, workers.value_or(default_workers()));
        },
        py::arg("run"), py::arg("workers") = py::none());
  m.def("read_histogram",
        [](const fs::path& csv) { return histogram_dict(read_histogram_csv(csv)); },
        py::arg("path"));
  m.def("diagnose", [](const fs::path& run) { return to_python(diagnose_run(run)); },
        py::arg("run"));
  m.def("config_hash", [](py::object config) { return config_from(config).hash(); },
        py::arg("config"));
}
