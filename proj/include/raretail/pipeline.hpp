#pragma once

// Run lifecycle. A run directory holds
//
//   config.json        the fully expanded experiment config
//   manifest.json      config hash, per-chain files, status, token counters
//   records/*.jsonl.gz one record file per chain (direct.jsonl.gz for the
//                      direct-sampling pool)
//
// and, once estimated, hist.csv, estimate.json, direct_hist.csv,
// diagnostics.json, relative_ci.csv, bias_shift.csv and traces.csv.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raretail/config.hpp"
#include "raretail/estimator.hpp"
#include "raretail/records.hpp"

namespace raretail {

enum class ChainStatus { Pending, Complete, Failed };

struct ChainEntry {
  std::int64_t id = 0;
  int arm = kPositiveArm;
  std::string file;  // relative to the run directory
  ChainStatus status = ChainStatus::Pending;
  std::uint64_t tokens_generated = 0;
  std::uint64_t records = 0;
  std::string failure;
};

struct RunManifest {
  std::string config_hash;
  std::string status = "pending";  // pending | sampled | complete | failed
  std::string failure;
  std::vector<ChainEntry> chains;

  std::uint64_t total_tokens() const;
  bool sampling_complete() const;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  static RunManifest load(const std::filesystem::path& run_dir);
  void save(const std::filesystem::path& run_dir) const;
};

// Chain layout for a config: direct pool (id -1) if requested, positive arm
// chains 0..J-1, negative arm chains J..2J-1.
RunManifest plan_run(const ExperimentConfig& config);

// Samples every chain not yet complete. Writes config.json and the manifest.
// A failing chain leaves its partial file marked and the manifest status
// "failed"; the first error is rethrown after all chains finish.
RunManifest sample_run(const ExperimentConfig& config,
                       const std::filesystem::path& run_dir,
                       std::size_t workers);

ExperimentConfig load_run_config(const std::filesystem::path& run_dir);

// Records of every complete chain. Throws IoError if a complete chain's file
// is missing.
std::vector<ChainData> load_run_records(const std::filesystem::path& run_dir);

struct EstimateOptions {
  std::optional<BinSpec> bins;            // default: from config
  std::optional<std::size_t> replicas;    // default: from config
  std::optional<double> coverage;         // default: from config
  std::optional<std::filesystem::path> out_csv;  // default: <run>/hist.csv
  std::size_t workers = 1;
};

struct EstimateOutput {
  BootstrapResult bootstrap;
  HistogramEstimate direct;  // empty when there are no direct samples
  nlohmann::json summary;    // contents of estimate.json
};

// MBAR + bootstrap on stored records; writes the histogram CSV, its
// companion estimate.json and direct_hist.csv.
EstimateOutput estimate_run(const std::filesystem::path& run_dir,
                            const EstimateOptions& options);

// Per-bias GR, acceptance rates, overlap matrix, flagged pairs and dropped
// biases; also written to diagnostics.json.
nlohmann::json diagnose_run(const std::filesystem::path& run_dir);

// relative_ci.csv and bias_shift.csv. Requires a prior estimate.
void report_run(const std::filesystem::path& run_dir);

// traces.csv: per-step observable and per-bias cumulative mean for every
// MCMC chain, with gap rows where records are missing.
void emit_plot_data(const std::filesystem::path& run_dir);

// sample + estimate + diagnose + report. Refuses a directory that already
// holds a manifest.
RunManifest run_pipeline(const ExperimentConfig& config,
                         const std::filesystem::path& run_dir,
                         std::size_t workers);

// Continues an interrupted run. Returns false (and touches nothing) when the
// run is already complete. A supplied config whose hash differs from the
// stored one is refused.
bool resume_pipeline(const std::filesystem::path& run_dir, std::size_t workers,
                     const std::optional<ExperimentConfig>& config = std::nullopt);

}  // namespace raretail
