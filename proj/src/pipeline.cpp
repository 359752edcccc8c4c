#include "raretail/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <mutex>
#include <sstream>

#include "raretail/diagnostics.hpp"
#include "raretail/error.hpp"
#include "raretail/parallel.hpp"
#include "raretail/rng.hpp"
#include "raretail/store.hpp"

namespace raretail {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kConfigFile = "config.json";

const char* status_name(ChainStatus s) {
  switch (s) {
    case ChainStatus::Pending:
      return "pending";
    case ChainStatus::Complete:
      return "complete";
    case ChainStatus::Failed:
      return "failed";
  }
  return "pending";
}

ChainStatus parse_status(const std::string& s) {
  if (s == "complete") return ChainStatus::Complete;
  if (s == "failed") return ChainStatus::Failed;
  if (s == "pending") return ChainStatus::Pending;
  throw IoError("unknown chain status '" + s + "' in manifest");
}

std::string chain_file(const char* prefix, std::size_t index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "records/%s_%03zu.jsonl.gz", prefix, index);
  return buf;
}

std::uint64_t chain_seed(const ExperimentConfig& c, const ChainEntry& e) {
  if (e.arm == kDirectArm) return derive_seed(c.seed, stream::kDirect, 0);
  const auto j = static_cast<std::uint64_t>(c.chains_per_arm);
  if (e.arm == kPositiveArm)
    return derive_seed(c.seed, stream::kPositiveArm, static_cast<std::uint64_t>(e.id));
  return derive_seed(c.seed, stream::kNegativeArm, static_cast<std::uint64_t>(e.id) - j);
}

// Runs one chain into its file; returns tokens generated and record count.
std::pair<std::uint64_t, std::uint64_t> run_chain(const ExperimentConfig& config,
                                                  const Model& model,
                                                  const TokenSeq& prompt,
                                                  const Observable& observable,
                                                  const ChainEntry& entry,
                                                  const fs::path& run_dir) {
  Rng rng(chain_seed(config, entry));
  GzRecordSink sink(run_dir / entry.file);
  SamplerStats stats;
  std::uint64_t records = 0;
  if (entry.arm == kDirectArm) {
    auto recs = direct_sample(model, prompt, observable, config.max_len(),
                              config.direct_samples, rng, &stats);
    for (const auto& r : recs) sink.append(r);
    records = recs.size();
  } else {
    const auto& biases =
        entry.arm == kPositiveArm ? config.positive_arm : config.negative_arm;
    AnnealingSchedule schedule{biases, config.steps_per_bias};
    if (config.replica_exchange && biases.size() >= 2) {
      stats = run_replica_exchange(model, prompt, observable, schedule,
                                   config.max_len(), rng, sink, entry.id);
    } else {
      stats = run_annealed_tps(model, prompt, observable, schedule,
                               config.max_len(), rng, sink, entry.id);
    }
    records = biases.size() * config.steps_per_bias;
  }
  sink.close();
  return {stats.tokens_generated, records};
}

void require_manifest(const fs::path& run_dir) {
  if (!fs::exists(run_dir / kManifestFile))
    throw IoError("no run manifest in " + run_dir.string());
}

std::vector<double> all_values(std::span<const ChainData> chains) {
  std::vector<double> v;
  for (const auto& c : chains)
    for (const auto& r : c.records) v.push_back(r.o);
  return v;
}

PipelineSettings settings_for(const ExperimentConfig& c, std::vector<double> edges) {
  PipelineSettings s;
  s.burn_in = c.burn_in;
  s.gr_threshold = c.gr_threshold;
  s.edges = std::move(edges);
  s.mbar_tol = c.mbar_tol;
  s.mbar_max_iter = c.mbar_max_iter;
  return s;
}

std::string optional_cell(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

json bias_json(const BiasKey& b) {
  return {{"arm", b.arm}, {"k", b.k}, {"lambda", b.lambda}};
}

}  // namespace

std::uint64_t RunManifest::total_tokens() const {
  std::uint64_t total = 0;
  for (const auto& c : chains) total += c.tokens_generated;
  return total;
}

bool RunManifest::sampling_complete() const {
  for (const auto& c : chains)
    if (c.status != ChainStatus::Complete) return false;
  return true;
}

json RunManifest::to_json() const {
  json j;
  j["config_hash"] = config_hash;
  j["status"] = status;
  if (!failure.empty()) j["failure"] = failure;
  j["total_tokens"] = total_tokens();
  j["chains"] = json::array();
  for (const auto& c : chains) {
    json e = {{"id", c.id},
              {"arm", c.arm},
              {"file", c.file},
              {"status", status_name(c.status)},
              {"tokens_generated", c.tokens_generated},
              {"records", c.records}};
    if (!c.failure.empty()) e["failure"] = c.failure;
    j["chains"].push_back(std::move(e));
  }
  return j;
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  try {
    m.config_hash = j.at("config_hash").get<std::string>();
    m.status = j.at("status").get<std::string>();
    m.failure = j.value("failure", std::string());
    for (const auto& e : j.at("chains")) {
      ChainEntry c;
      c.id = e.at("id").get<std::int64_t>();
      c.arm = e.at("arm").get<int>();
      c.file = e.at("file").get<std::string>();
      c.status = parse_status(e.at("status").get<std::string>());
      c.tokens_generated = e.at("tokens_generated").get<std::uint64_t>();
      c.records = e.at("records").get<std::uint64_t>();
      c.failure = e.value("failure", std::string());
      m.chains.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

RunManifest RunManifest::load(const fs::path& run_dir) {
  require_manifest(run_dir);
  return from_json(read_json(run_dir / kManifestFile));
}

void RunManifest::save(const fs::path& run_dir) const {
  write_json(run_dir / kManifestFile, to_json());
}

static ChainEntry entry(std::int64_t id, int arm, std::string file) {
  ChainEntry e;
  e.id = id;
  e.arm = arm;
  e.file = std::move(file);
  return e;
}

RunManifest plan_run(const ExperimentConfig& config) {
  RunManifest m;
  m.config_hash = config.hash();
  if (config.direct_samples > 0)
    m.chains.push_back(entry(kDirectChain, kDirectArm, "records/direct.jsonl.gz"));
  const auto J = static_cast<std::int64_t>(config.chains_per_arm);
  if (!config.positive_arm.empty()) {
    for (std::int64_t j = 0; j < J; ++j)
      m.chains.push_back(entry(j, kPositiveArm, chain_file("pos", static_cast<std::size_t>(j))));
  }
  if (!config.negative_arm.empty()) {
    for (std::int64_t j = 0; j < J; ++j)
      m.chains.push_back(entry(J + j, kNegativeArm, chain_file("neg", static_cast<std::size_t>(j))));
  }
  return m;
}

ExperimentConfig load_run_config(const fs::path& run_dir) {
  return ExperimentConfig::from_json(read_json(run_dir / kConfigFile), run_dir);
}

RunManifest sample_run(const ExperimentConfig& config, const fs::path& run_dir,
                       std::size_t workers) {
  config.validate();
  RunManifest manifest;
  if (fs::exists(run_dir / kManifestFile)) {
    manifest = RunManifest::load(run_dir);
    if (manifest.config_hash != config.hash())
      throw ValidationError("run directory belongs to a different config");
  } else {
    manifest = plan_run(config);
    std::error_code ec;
    fs::create_directories(run_dir / "records", ec);
    if (ec) throw IoError("cannot create " + run_dir.string() + ": " + ec.message());
    write_json(run_dir / kConfigFile, config.to_json());
  }
  manifest.status = "pending";
  manifest.failure.clear();
  manifest.save(run_dir);

  const ModelPtr model = config.load_model();
  const TokenSeq prompt = config.prompt(*model);
  const Observable observable = config.make_observable();

  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < manifest.chains.size(); ++i)
    if (manifest.chains[i].status != ChainStatus::Complete) todo.push_back(i);

  std::mutex mutex;
  std::exception_ptr first_error;
  parallel_for(todo.size(), workers, [&](std::size_t t) {
    ChainEntry& entry = manifest.chains[todo[t]];
    try {
      const auto [tokens, records] =
          run_chain(config, *model, prompt, observable, entry, run_dir);
      std::lock_guard lock(mutex);
      entry.tokens_generated = tokens;
      entry.records = records;
      entry.status = ChainStatus::Complete;
      entry.failure.clear();
      manifest.save(run_dir);
    } catch (const std::exception& e) {
      std::lock_guard lock(mutex);
      entry.status = ChainStatus::Failed;
      entry.failure = e.what();
      if (!first_error) first_error = std::current_exception();
    }
  });

  if (first_error) {
    manifest.status = "failed";
    for (const auto& c : manifest.chains) {
      if (c.status == ChainStatus::Failed) {
        manifest.failure = "chain " + std::to_string(c.id) + ": " + c.failure;
        break;
      }
    }
    manifest.save(run_dir);
    std::rethrow_exception(first_error);
  }
  manifest.status = "sampled";
  manifest.save(run_dir);
  return manifest;
}

std::vector<ChainData> load_run_records(const fs::path& run_dir) {
  const RunManifest manifest = RunManifest::load(run_dir);
  std::vector<ChainData> chains;
  for (const auto& c : manifest.chains) {
    if (c.status != ChainStatus::Complete) continue;
    const fs::path file = run_dir / c.file;
    if (!fs::exists(file)) throw IoError("missing record file " + file.string());
    chains.push_back({c.id, c.arm, read_records(file)});
  }
  if (chains.empty()) throw ValidationError("run has no completed chains");
  return chains;
}

EstimateOutput estimate_run(const fs::path& run_dir, const EstimateOptions& options) {
  const ExperimentConfig config = load_run_config(run_dir);
  const RunManifest manifest = RunManifest::load(run_dir);
  const auto chains = load_run_records(run_dir);

  const BinSpec bins = options.bins.value_or(config.bins);
  const auto observed = all_values(chains);
  const auto edges = bins.resolve(config.make_observable().id(), observed);
  const PipelineSettings settings = settings_for(config, edges);

  BootstrapOptions boot;
  boot.replicas = options.replicas.value_or(config.replicas);
  boot.coverage = options.coverage.value_or(config.coverage);
  boot.seed = derive_seed(config.seed, stream::kBootstrap, 0);
  boot.workers = options.workers;

  EstimateOutput out;
  out.bootstrap = bootstrap_ci(chains, settings, boot);
  const fs::path csv = options.out_csv.value_or(run_dir / "hist.csv");
  write_histogram_csv(csv, out.bootstrap.estimate);

  std::vector<double> direct_values;
  for (const auto& c : chains)
    if (c.is_direct())
      for (const auto& r : c.records) direct_values.push_back(r.o);
  if (!direct_values.empty()) {
    out.direct = direct_histogram(direct_values, edges, boot.coverage);
    write_histogram_csv(run_dir / "direct_hist.csv", out.direct);
  }

  const auto& point = out.bootstrap.point;
  json states = json::array();
  for (std::size_t k = 0; k < point.pool.num_states(); ++k) {
    states.push_back({{"lambda", point.pool.lambdas()[k]},
                      {"samples", point.pool.counts()[k]},
                      {"log_z", point.mbar.log_z[k]}});
  }
  json dropped = json::array();
  for (const auto& b : point.dropped) dropped.push_back(bias_json(b));
  json warnings = point.mbar.warnings;
  for (const auto& w : out.bootstrap.warnings) warnings.push_back(w);

  json& s = out.summary;
  s["config"] = config.to_json();
  s["config_hash"] = manifest.config_hash;
  s["histogram"] = csv.filename().string();
  s["states"] = std::move(states);
  s["mbar"] = {{"iterations", point.mbar.iterations},
               {"residual", point.mbar.residual},
               {"damped", point.mbar.damped},
               {"normalization_residual", normalization_residual(point.pool)},
               {"tol", settings.mbar_tol},
               {"max_iter", settings.mbar_max_iter}};
  s["settings"] = {{"burn_in", settings.burn_in},
                   {"gr_threshold", settings.gr_threshold},
                   {"bins", bins.to_json()},
                   {"edges", edges},
                   {"replicas", boot.replicas},
                   {"coverage", boot.coverage},
                   {"bootstrap_seed", boot.seed}};
  s["bootstrap"] = {{"successful", out.bootstrap.replica_density.size()},
                    {"discarded", out.bootstrap.discarded}};
  s["dropped_biases"] = std::move(dropped);
  s["total_mass"] = out.bootstrap.estimate.total_mass();
  s["total_tokens"] = manifest.total_tokens();
  s["warnings"] = std::move(warnings);
  fs::path companion = csv;
  companion.replace_extension(".json");
  if (companion.filename() == "hist.json") companion = companion.parent_path() / "estimate.json";
  write_json(companion, s);
  return out;
}

json diagnose_run(const fs::path& run_dir) {
  const ExperimentConfig config = load_run_config(run_dir);
  const RunManifest manifest = RunManifest::load(run_dir);
  const auto chains = load_run_records(run_dir);

  json doc;
  doc["config_hash"] = manifest.config_hash;
  doc["burn_in"] = config.burn_in;
  doc["gr_threshold"] = config.gr_threshold;

  const auto burned = apply_burn_in(chains, config.burn_in);
  const auto filtered = filter_converged(burned, config.gr_threshold);
  json gr = json::array();
  for (const auto& b : filtered.report) {
    json row = bias_json(b.bias);
    row["assessed"] = b.assessed;
    if (b.assessed) {
      row["gr"] = b.report.gr;
      row["between"] = b.report.between;
      row["within"] = b.report.within;
      row["chains"] = b.report.chains;
      row["length"] = b.report.length;
      row["divergent"] = b.report.divergent;
      row["pass"] = b.report.pass;
    }
    gr.push_back(std::move(row));
  }
  doc["gelman_rubin"] = std::move(gr);
  json dropped = json::array();
  for (const auto& b : filtered.dropped) dropped.push_back(bias_json(b));
  doc["dropped_biases"] = std::move(dropped);

  json acc = json::array();
  double steps = 0.0, accepted = 0.0;
  for (const auto& a : acceptance_report(chains)) {
    acc.push_back({{"chain", a.chain}, {"arm", a.arm}, {"k", a.k}, {"lambda", a.lambda},
                   {"proposals", a.proposals}, {"accepted", a.accepted}, {"rate", a.rate}});
    steps += static_cast<double>(a.proposals);
    accepted += static_cast<double>(a.accepted);
  }
  doc["acceptance"] = std::move(acc);

  std::uint64_t mcmc_tokens = 0, mcmc_steps = 0;
  for (const auto& c : manifest.chains) {
    if (c.arm == kDirectArm || c.status != ChainStatus::Complete) continue;
    mcmc_tokens += c.tokens_generated;
    mcmc_steps += c.records;
  }
  doc["total_tokens"] = manifest.total_tokens();
  doc["tokens_per_tps_step"] =
      mcmc_steps ? json(static_cast<double>(mcmc_tokens) / static_cast<double>(mcmc_steps))
                 : json(nullptr);

  WeightedSampleSet pool = pool_chains(filtered.kept);
  if (pool.empty()) {
    doc["overlap"] = nullptr;
    doc["warnings"] = {"no samples left after filtering"};
  } else {
    const auto mbar = solve_mbar(pool, config.mbar_tol, config.mbar_max_iter);
    const auto ov = overlap_matrix(pool);
    json pairs = json::array();
    for (const auto& [a, b] : ov.flagged)
      pairs.push_back({{"i", a}, {"j", b}, {"lambda_i", ov.lambdas[a]},
                       {"lambda_j", ov.lambdas[b]}, {"overlap", std::min(ov.matrix[a][b], ov.matrix[b][a])}});
    doc["overlap"] = {{"lambdas", ov.lambdas}, {"counts", ov.counts},
                      {"matrix", ov.matrix}, {"cutoff", kOverlapCutoff}};
    doc["flagged_pairs"] = std::move(pairs);
    json warnings = mbar.warnings;
    for (const auto& w : ov.warnings) warnings.push_back(w);
    doc["warnings"] = std::move(warnings);
  }
  write_json(run_dir / "diagnostics.json", doc);
  return doc;
}

void report_run(const fs::path& run_dir) {
  const ExperimentConfig config = load_run_config(run_dir);
  const fs::path hist = run_dir / "hist.csv";
  if (!fs::exists(hist)) throw IoError("no histogram in run; run 'estimate' first");
  const HistogramEstimate full = read_histogram_csv(hist);
  const auto chains = load_run_records(run_dir);

  // Relative CI half-width: MBAR, and direct sampling under both empty-bin
  // substitutes.
  std::vector<std::optional<double>> direct_half, direct_ref;
  const fs::path direct_csv = run_dir / "direct_hist.csv";
  const bool have_direct = fs::exists(direct_csv);
  if (have_direct) {
    const HistogramEstimate direct = read_histogram_csv(direct_csv);
    direct_half = relative_ci_halfwidth(direct, EmptyBinFallback::HalfSmallestNonzero);
    direct_ref = relative_ci_halfwidth(direct, EmptyBinFallback::Reference, full.density);
  }
  const auto mbar_rel = relative_ci_halfwidth(full);
  std::ostringstream rel;
  rel << "bin_lo,bin_hi,mbar,direct_half_smallest,direct_mbar_height\n";
  for (std::size_t i = 0; i < full.bins(); ++i) {
    rel << format_double(full.edges[i]) << ',' << format_double(full.edges[i + 1]) << ','
        << optional_cell(mbar_rel[i]) << ','
        << (have_direct ? optional_cell(direct_half[i]) : "") << ','
        << (have_direct ? optional_cell(direct_ref[i]) : "") << '\n';
  }
  write_text_atomic(run_dir / "relative_ci.csv", rel.str());

  // Bias shift: first half of each post-burn-in segment, same pipeline.
  const auto half_chains = first_half_after_burn_in(chains, config.burn_in);
  PipelineSettings half_settings = settings_for(config, full.edges);
  half_settings.burn_in = 0.0;
  std::ostringstream shift;
  shift << "bin_lo,bin_hi,h_full,h_half,delta,delta_over_h_full,delta_over_ci_half\n";
  try {
    const auto half = run_estimate(half_chains, half_settings);
    for (const auto& row : bias_shift_report(full, half.histogram)) {
      shift << format_double(row.bin_lo) << ',' << format_double(row.bin_hi) << ','
            << optional_cell(row.h_full) << ',' << optional_cell(row.h_half) << ','
            << optional_cell(row.delta) << ',' << optional_cell(row.rel_height) << ','
            << optional_cell(row.rel_ci) << '\n';
    }
  } catch (const ConvergenceError&) {
    // Nothing survives filtering in the half data: every row is a gap.
    for (std::size_t i = 0; i < full.bins(); ++i)
      shift << format_double(full.edges[i]) << ',' << format_double(full.edges[i + 1])
            << ",,,,,\n";
  }
  write_text_atomic(run_dir / "bias_shift.csv", shift.str());
}

void emit_plot_data(const fs::path& run_dir) {
  const RunManifest manifest = RunManifest::load(run_dir);
  const ExperimentConfig config = load_run_config(run_dir);
  std::ostringstream out;
  out << "chain,arm,k,lambda,n,o,cum_mean,gap\n";
  auto gap_row = [&](const ChainEntry& c, std::size_t k, double lambda, std::size_t n) {
    out << c.id << ',' << c.arm << ',' << k << ',' << format_double(lambda) << ',' << n
        << ",,,1\n";
  };
  for (const auto& c : manifest.chains) {
    if (c.arm == kDirectArm) continue;
    const auto& biases = c.arm == kPositiveArm ? config.positive_arm : config.negative_arm;
    const fs::path file = run_dir / c.file;
    if (c.status != ChainStatus::Complete || !fs::exists(file)) {
      gap_row(c, 0, biases.empty() ? 0.0 : biases.front(), 0);
      continue;
    }
    auto records = read_records(file);
    // Replica-exchange files interleave biases step by step.
    std::stable_sort(records.begin(), records.end(),
                     [](const ChainRecord& a, const ChainRecord& b) { return a.k < b.k; });
    std::size_t next = 0;  // record index
    for (std::size_t k = 0; k < biases.size(); ++k) {
      std::size_t expected = 0, count = 0;
      double sum = 0.0;
      for (; next < records.size() && records[next].k == k; ++next) {
        const auto& r = records[next];
        if (r.n != expected) gap_row(c, k, r.lambda, expected);
        expected = r.n + 1;
        sum += r.o;
        ++count;
        out << c.id << ',' << c.arm << ',' << r.k << ',' << format_double(r.lambda) << ','
            << r.n << ',' << format_double(r.o) << ','
            << format_double(sum / static_cast<double>(count)) << ",0\n";
      }
      if (expected != config.steps_per_bias) gap_row(c, k, biases[k], expected);
    }
  }
  write_text_atomic(run_dir / "traces.csv", out.str());
}

RunManifest run_pipeline(const ExperimentConfig& config, const fs::path& run_dir,
                         std::size_t workers) {
  if (fs::exists(run_dir / kManifestFile))
    throw ValidationError("run directory " + run_dir.string() +
                          " already holds a run; use 'resume'");
  RunManifest manifest = sample_run(config, run_dir, workers);
  EstimateOptions opts;
  opts.workers = workers;
  estimate_run(run_dir, opts);
  diagnose_run(run_dir);
  report_run(run_dir);
  emit_plot_data(run_dir);
  manifest.status = "complete";
  manifest.save(run_dir);
  return manifest;
}

bool resume_pipeline(const fs::path& run_dir, std::size_t workers,
                     const std::optional<ExperimentConfig>& config) {
  RunManifest manifest = RunManifest::load(run_dir);
  const ExperimentConfig stored = load_run_config(run_dir);
  if (stored.hash() != manifest.config_hash)
    throw ValidationError("stored config does not match the manifest hash");
  if (config && config->hash() != manifest.config_hash)
    throw ValidationError("config hash mismatch: refusing to resume " + run_dir.string());
  if (manifest.status == "complete") return false;
  manifest = sample_run(stored, run_dir, workers);
  EstimateOptions opts;
  opts.workers = workers;
  estimate_run(run_dir, opts);
  diagnose_run(run_dir);
  report_run(run_dir);
  emit_plot_data(run_dir);
  manifest.status = "complete";
  manifest.save(run_dir);
  return true;
}

}  // namespace raretail
