// raretail command-line driver.
//
// Exit codes: 0 success, 2 validation error, 3 non-convergence, 4 I/O
// failure. RARETAIL_WORKERS bounds the worker pool.

#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "raretail/config.hpp"
#include "raretail/error.hpp"
#include "raretail/oracle.hpp"
#include "raretail/parallel.hpp"
#include "raretail/pipeline.hpp"
#include "raretail/store.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace raretail;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitConvergence = 3;
constexpr int kExitIo = 4;

// "3,1,4" or "3 1 4" -> token ids; nullopt if any piece is not an integer.
std::optional<TokenSeq> parse_token_list(const std::string& text) {
  std::string s = text;
  for (char& c : s)
    if (c == ',') c = ' ';
  std::istringstream in(s);
  TokenSeq out;
  std::string piece;
  while (in >> piece) {
    if (piece.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
    out.push_back(static_cast<Token>(std::stoul(piece)));
  }
  if (out.empty()) return std::nullopt;
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::string s = text;
  for (char& c : s)
    if (c == ',') c = ' ';
  std::istringstream in(s);
  std::vector<double> out;
  for (double x; in >> x;) out.push_back(x);
  if (!in.eof() || out.empty()) throw ValidationError("cannot parse number list '" + text + "'");
  return out;
}

int cmd_oracle(const std::string& model_path, const std::string& prompt,
               std::size_t len, const std::string& lambdas,
               const std::string& observable_name, double cap,
               const std::string& bins, std::size_t max_pmf,
               const std::string& out_path) {
  const ModelPtr model = load_model_file(model_path);
  TokenSeq tokens;
  if (auto ids = parse_token_list(prompt)) {
    tokens = *ids;
  } else {
    tokens = model->vocab().encode(prompt);
  }
  const Observable obs = Observable::parse(observable_name, cap);
  const auto ensemble = enumerate(*model, tokens, len, obs);

  std::vector<double> values;
  for (const auto& e : ensemble.entries)
    if (e.prob > 0.0) values.push_back(e.value);
  const auto edges = BinSpec::parse(bins).resolve(obs.id(), values);

  json doc;
  doc["model"] = model_path;
  doc["prompt"] = tokens;
  doc["length"] = len;
  doc["observable"] = obs.name();
  doc["completions"] = ensemble.entries.size();
  doc["total_probability"] = ensemble.total_probability();
  doc["edges"] = edges;
  doc["lambdas"] = json::array();
  const bool write_pmf = ensemble.entries.size() <= max_pmf;
  for (double lambda : parse_double_list(lambdas)) {
    json row;
    row["lambda"] = lambda;
    row["log_z"] = log_partition_function(ensemble, lambda);
    row["z"] = partition_function(ensemble, lambda);
    row["mean"] = tilted_mean(ensemble, lambda);
    row["marginal"] = marginal(ensemble, edges, lambda);
    if (write_pmf) {
      const auto pmf = tilted_pmf(ensemble, lambda);
      json entries = json::array();
      for (std::size_t i = 0; i < pmf.size(); ++i)
        entries.push_back({{"completion", ensemble.entries[i].completion},
                           {"value", ensemble.entries[i].value},
                           {"p", pmf[i]}});
      row["pmf"] = std::move(entries);
    }
    doc["lambdas"].push_back(std::move(row));
  }
  if (!write_pmf) doc["pmf_suppressed"] = true;
  if (out_path.empty() || out_path == "-") {
    std::cout << doc.dump(2) << '\n';
  } else {
    write_json(out_path, doc);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rare-event estimation for autoregressive models"};
  app.require_subcommand(1);
  const std::size_t workers = default_workers();

  std::string config_path, out_dir, in_dir, bins, csv_out, seed_text;
  std::optional<std::size_t> replicas;
  std::optional<double> coverage;

  auto* sample = app.add_subcommand("sample", "Run direct sampling and annealed TPS");
  sample->add_option("--config", config_path, "Experiment config (JSON)")->required();
  sample->add_option("--seed", seed_text, "Master seed (overrides config)");
  sample->add_option("--out", out_dir, "Run directory")->required();

  auto* estimate = app.add_subcommand("estimate", "MBAR histogram with bootstrap CIs");
  estimate->add_option("--in", in_dir, "Run directory")->required();
  estimate->add_option("--bins", bins, "auto, lo:hi:width, or a file of edges");
  estimate->add_option("--replicas", replicas, "Bootstrap replicas");
  estimate->add_option("--coverage", coverage, "CI coverage");
  estimate->add_option("--out", csv_out, "Histogram CSV (default <in>/hist.csv)");

  auto* diagnose = app.add_subcommand("diagnose", "Convergence and overlap diagnostics");
  diagnose->add_option("--in", in_dir, "Run directory")->required();

  std::string model_path, prompt, lambdas = "0", observable = "ARI", oracle_bins = "auto";
  std::size_t len = 0, max_pmf = 100000;
  double cap = kAriDefaultCap;
  auto* oracle = app.add_subcommand("oracle", "Exact enumeration of a small model");
  oracle->add_option("--model", model_path, "Model definition (JSON)")->required();
  oracle->add_option("--prompt", prompt, "Token ids (comma separated) or text")->required();
  oracle->add_option("--len", len, "Completion length")->required();
  oracle->add_option("--lambda", lambdas, "Comma-separated biases");
  oracle->add_option("--observable", observable, "ARI, LOGPROB, REPEATS or a registered name");
  oracle->add_option("--cap", cap, "ARI cap");
  oracle->add_option("--bins", oracle_bins, "Bins for marginals");
  oracle->add_option("--max-pmf", max_pmf, "Omit PMFs above this many completions");
  oracle->add_option("--out", csv_out, "Output JSON (default stdout)");

  auto* report = app.add_subcommand("report", "Relative-CI, bias-shift and trace tables");
  report->add_option("--in", in_dir, "Run directory")->required();

  auto* run = app.add_subcommand("run", "Full pipeline");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed", seed_text, "Master seed (overrides config)");
  run->add_option("--out", out_dir, "Run directory")->required();

  auto* resume = app.add_subcommand("resume", "Continue an interrupted run");
  resume->add_option("--in", in_dir, "Run directory")->required();
  resume->add_option("--config", config_path, "Config to check against the run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  auto with_seed = [&](ExperimentConfig c) {
    if (!seed_text.empty()) {
      try {
        c.seed = std::stoull(seed_text);
      } catch (const std::exception&) {
        throw ValidationError("seed must be an unsigned 64-bit integer");
      }
    }
    return c;
  };

  try {
    if (*sample) {
      const auto manifest = sample_run(with_seed(ExperimentConfig::load(config_path)),
                                       out_dir, workers);
      std::cout << "sampled " << manifest.chains.size() << " chains, "
                << manifest.total_tokens() << " tokens\n";
    } else if (*estimate) {
      EstimateOptions opts;
      if (!bins.empty()) opts.bins = BinSpec::parse(bins);
      opts.replicas = replicas;
      opts.coverage = coverage;
      if (!csv_out.empty()) opts.out_csv = csv_out;
      opts.workers = workers;
      const auto out = estimate_run(in_dir, opts);
      for (const auto& w : out.summary["warnings"])
        std::cerr << "warning: " << w.get<std::string>() << '\n';
    } else if (*diagnose) {
      std::cout << diagnose_run(in_dir).dump(2) << '\n';
    } else if (*oracle) {
      return cmd_oracle(model_path, prompt, len, lambdas, observable, cap, oracle_bins,
                        max_pmf, csv_out);
    } else if (*report) {
      report_run(in_dir);
      emit_plot_data(in_dir);
    } else if (*run) {
      auto configs = ExperimentConfig::load_all(config_path);
      if (configs.size() == 1) {
        const auto m = run_pipeline(with_seed(configs.front()), out_dir, workers);
        std::cout << "run complete, " << m.total_tokens() << " tokens\n";
      } else {
        for (std::size_t i = 0; i < configs.size(); ++i) {
          char name[32];
          std::snprintf(name, sizeof name, "prompt_%03zu", i);
          const auto m = run_pipeline(with_seed(configs[i]), fs::path(out_dir) / name, workers);
          std::cout << name << ": run complete, " << m.total_tokens() << " tokens\n";
        }
      }
    } else if (*resume) {
      std::optional<ExperimentConfig> cfg;
      if (!config_path.empty()) cfg = ExperimentConfig::load(config_path);
      const bool did = resume_pipeline(in_dir, workers, cfg);
      std::cout << (did ? "run resumed and completed\n" : "run already complete\n");
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ConvergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConvergence;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ProtocolError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
