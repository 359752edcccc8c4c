#include "raretail/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <openssl/evp.h>

#include "raretail/error.hpp"

namespace raretail {

namespace {

std::vector<double> default_arm(double sign) {
  std::vector<double> arm;
  for (int i = 1; i <= 10; ++i) arm.push_back(sign * 0.01 * i);
  return arm;
}

std::vector<double> read_edges_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open bin file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  auto doc = nlohmann::json::parse(text, nullptr, false);
  if (!doc.is_discarded() && doc.is_array()) return doc.get<std::vector<double>>();
  std::vector<double> edges;
  std::istringstream tokens(text);
  for (double x; tokens >> x;) edges.push_back(x);
  if (edges.empty()) throw ValidationError("bin file contains no edges");
  return edges;
}

}  // namespace

BinSpec BinSpec::parse(const std::string& spec) {
  BinSpec b;
  if (spec.empty() || spec == "auto") return b;
  if (std::count(spec.begin(), spec.end(), ':') == 2 &&
      !std::filesystem::exists(spec)) {
    std::istringstream in(spec);
    char c1 = 0, c2 = 0;
    in >> b.lo >> c1 >> b.hi >> c2 >> b.width;
    if (!in || c1 != ':' || c2 != ':')
      throw ValidationError("bin spec must be lo:hi:width, got '" + spec + "'");
    b.kind = Kind::Uniform;
    make_edges(b.lo, b.hi, b.width);
    return b;
  }
  b.kind = Kind::Explicit;
  b.edges = read_edges_file(spec);
  validate_edges(b.edges);
  return b;
}

BinSpec BinSpec::from_json(const nlohmann::json& j) {
  if (j.is_null()) return {};
  if (j.is_string()) return parse(j.get<std::string>());
  if (j.is_array()) {
    BinSpec b;
    b.kind = Kind::Explicit;
    b.edges = j.get<std::vector<double>>();
    validate_edges(b.edges);
    return b;
  }
  if (j.is_object()) {
    if (j.contains("edges")) return from_json(j["edges"]);
    BinSpec b;
    b.kind = Kind::Uniform;
    b.lo = j.at("lo").get<double>();
    b.hi = j.at("hi").get<double>();
    b.width = j.at("width").get<double>();
    make_edges(b.lo, b.hi, b.width);
    return b;
  }
  throw ValidationError("unsupported bin specification");
}

nlohmann::json BinSpec::to_json() const {
  switch (kind) {
    case Kind::Auto:
      return "auto";
    case Kind::Uniform:
      return {{"lo", lo}, {"hi", hi}, {"width", width}};
    case Kind::Explicit:
      return {{"edges", edges}};
  }
  return "auto";
}

std::vector<double> BinSpec::resolve(ObservableId observable,
                                     std::span<const double> observed) const {
  if (kind == Kind::Explicit) return edges;
  if (kind == Kind::Uniform) return make_edges(lo, hi, width);
  if (observable == ObservableId::Ari) return make_edges(-22.0, 15.5, 0.5);
  if (observed.empty()) throw ValidationError("cannot derive bins without data");
  const auto [mn, mx] = std::minmax_element(observed.begin(), observed.end());
  if (observable == ObservableId::Repeats) {
    return make_edges(std::floor(*mn) - 0.5, std::ceil(*mx) + 0.5, 1.0);
  }
  const double range = *mx - *mn;
  if (range <= 0.0) return {*mn - 0.5, *mn + 0.5};
  std::vector<double> e;
  const double width = range / 200.0;
  for (int i = 0; i <= 200; ++i) e.push_back(*mn + width * i);
  e.back() = std::nextafter(*mx, std::numeric_limits<double>::infinity());
  return e;
}

ExperimentConfig::ExperimentConfig()
    : positive_arm(default_arm(1.0)), negative_arm(default_arm(-1.0)) {}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j,
                                             const std::filesystem::path& base_dir) {
  ExperimentConfig c;
  c.base_dir = base_dir;
  try {
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    c.model = j.at("model");
    if (j.contains("prompt_tokens")) c.prompt_tokens = j["prompt_tokens"].get<TokenSeq>();
    c.prompt_text = j.value("prompt", c.prompt_text);
    c.completion_length = j.value("completion_length", c.completion_length);
    c.observable = j.value("observable", c.observable);
    c.ari_cap = j.value("ari_cap", c.ari_cap);
    if (j.contains("positive_arm")) c.positive_arm = j["positive_arm"].get<std::vector<double>>();
    if (j.contains("negative_arm")) c.negative_arm = j["negative_arm"].get<std::vector<double>>();
    c.chains_per_arm = j.value("chains_per_arm", c.chains_per_arm);
    c.steps_per_bias = j.value("steps_per_bias", c.steps_per_bias);
    c.direct_samples = j.value("direct_samples", c.direct_samples);
    c.replica_exchange = j.value("replica_exchange", c.replica_exchange);
    c.burn_in = j.value("burn_in", c.burn_in);
    c.gr_threshold = j.value("gr_threshold", c.gr_threshold);
    if (j.contains("bins")) c.bins = BinSpec::from_json(j["bins"]);
    c.replicas = j.value("replicas", c.replicas);
    c.coverage = j.value("coverage", c.coverage);
    c.mbar_tol = j.value("mbar_tol", c.mbar_tol);
    c.mbar_max_iter = j.value("mbar_max_iter", c.mbar_max_iter);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid config: ") + e.what());
  }
  if (c.model.is_string()) {
    std::filesystem::path p = c.model.get<std::string>();
    if (p.is_relative()) p = base_dir / p;
    std::ifstream in(p);
    if (!in) throw IoError("cannot open model file " + p.string());
    auto doc = nlohmann::json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw ValidationError("model file is not JSON");
    // Inline corpus paths relative to the model file.
    if (doc.contains("corpus") && doc["corpus"].is_string()) {
      std::filesystem::path corpus = doc["corpus"].get<std::string>();
      if (corpus.is_relative()) corpus = p.parent_path() / corpus;
      std::ifstream cin(corpus, std::ios::binary);
      if (!cin) throw IoError("cannot read corpus " + corpus.string());
      std::stringstream ss;
      ss << cin.rdbuf();
      doc.erase("corpus");
      doc["text"] = ss.str();
    }
    c.model = std::move(doc);
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  auto all = load_all(path);
  if (all.size() != 1)
    throw ValidationError("config defines several prompts; use 'run'");
  return std::move(all.front());
}

std::vector<ExperimentConfig> ExperimentConfig::load_all(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  auto doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ValidationError("config is not valid JSON");
  const auto base = path.parent_path();
  if (!doc.contains("prompts")) return {from_json(doc, base)};
  std::vector<ExperimentConfig> out;
  for (const auto& p : doc["prompts"]) {
    nlohmann::json single = doc;
    single.erase("prompts");
    single.erase("prompt");
    single.erase("prompt_tokens");
    if (p.is_string()) {
      single["prompt"] = p;
    } else {
      single["prompt_tokens"] = p;
    }
    out.push_back(from_json(single, base));
  }
  return out;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["model"] = model;
  if (prompt_tokens) {
    j["prompt_tokens"] = *prompt_tokens;
  } else {
    j["prompt"] = prompt_text;
  }
  j["completion_length"] = completion_length;
  j["observable"] = observable;
  j["ari_cap"] = ari_cap;
  j["positive_arm"] = positive_arm;
  j["negative_arm"] = negative_arm;
  j["chains_per_arm"] = chains_per_arm;
  j["steps_per_bias"] = steps_per_bias;
  j["direct_samples"] = direct_samples;
  j["replica_exchange"] = replica_exchange;
  j["burn_in"] = burn_in;
  j["gr_threshold"] = gr_threshold;
  j["bins"] = bins.to_json();
  j["replicas"] = replicas;
  j["coverage"] = coverage;
  j["mbar_tol"] = mbar_tol;
  j["mbar_max_iter"] = mbar_max_iter;
  j["seed"] = seed;
  return j;
}

void ExperimentConfig::validate() const {
  if (completion_length < 1) throw ValidationError("completion_length must be >= 1");
  if (positive_arm.empty() && negative_arm.empty() && direct_samples == 0)
    throw ValidationError("config requests no samples");
  for (const auto* arm : {&positive_arm, &negative_arm}) {
    if (!arm->empty()) AnnealingSchedule{*arm, steps_per_bias}.validate();
  }
  if ((!positive_arm.empty() || !negative_arm.empty()) && chains_per_arm < 1)
    throw ValidationError("chains_per_arm must be >= 1");
  if (!(burn_in >= 0.0 && burn_in < 1.0))
    throw ValidationError("burn_in must lie in [0, 1)");
  if (!(gr_threshold > 0.0)) throw ValidationError("gr_threshold must be > 0");
  if (!(coverage > 0.0 && coverage < 1.0))
    throw ValidationError("coverage must lie in (0, 1)");
  if (replicas < 1) throw ValidationError("replicas must be >= 1");
  if (!(mbar_tol > 0.0) || mbar_max_iter < 1)
    throw ValidationError("invalid MBAR solver settings");
  if (!model.is_object()) throw ValidationError("model must be a JSON object");
  Observable::parse(observable, ari_cap);
}

std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i)
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return out.str();
}

std::string ExperimentConfig::hash() const { return sha256_hex(to_json().dump()); }

ModelPtr ExperimentConfig::load_model() const {
  return raretail::load_model(model, base_dir);
}

TokenSeq ExperimentConfig::prompt(const Model& m) const {
  TokenSeq tokens = prompt_tokens ? *prompt_tokens : m.vocab().encode(prompt_text);
  if (tokens.empty()) throw ValidationError("prompt is empty");
  m.check_tokens(tokens);
  return tokens;
}

Observable ExperimentConfig::make_observable() const {
  return Observable::parse(observable, ari_cap);
}

}  // namespace raretail
