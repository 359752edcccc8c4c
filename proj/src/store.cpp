#include "raretail/store.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include "raretail/error.hpp"

namespace raretail {

nlohmann::json record_to_json(const ChainRecord& r) {
  return {{"chain", r.chain},   {"k", r.k}, {"lambda", r.lambda},
          {"n", r.n},           {"tokens", r.tokens}, {"o", r.o},
          {"accepted", r.accepted}, {"o_prop", r.o_prop}};
}

ChainRecord record_from_json(const nlohmann::json& j) {
  ChainRecord r;
  r.chain = j.at("chain").get<std::int64_t>();
  r.k = j.at("k").get<std::size_t>();
  r.lambda = j.at("lambda").get<double>();
  r.n = j.at("n").get<std::size_t>();
  r.tokens = j.at("tokens").get<TokenSeq>();
  r.o = j.at("o").get<double>();
  r.accepted = j.at("accepted").get<bool>();
  r.o_prop = j.at("o_prop").get<double>();
  return r;
}

GzRecordSink::GzRecordSink(std::filesystem::path path) : path_(std::move(path)) {
  std::error_code ec;
  std::filesystem::create_directories(path_.parent_path(), ec);
  std::filesystem::remove(path_.string() + ".partial", ec);
  file_ = gzopen(path_.c_str(), "wb");
  if (!file_) throw IoError("cannot open record file " + path_.string());
}

GzRecordSink::~GzRecordSink() {
  if (file_) gzclose(static_cast<gzFile>(file_));
}

void GzRecordSink::append(const ChainRecord& record) {
  std::lock_guard lock(mutex_);
  if (!file_) throw IoError("record file already closed: " + path_.string());
  line_ = record_to_json(record).dump();
  line_.push_back('\n');
  const int written = gzwrite(static_cast<gzFile>(file_), line_.data(),
                              static_cast<unsigned>(line_.size()));
  if (written != static_cast<int>(line_.size()))
    throw IoError("write failed on " + path_.string());
}

void GzRecordSink::mark_partial(const std::string& reason) {
  std::ofstream marker(path_.string() + ".partial");
  marker << reason << '\n';
}

void GzRecordSink::close() {
  std::lock_guard lock(mutex_);
  if (!file_) return;
  const int rc = gzclose(static_cast<gzFile>(file_));
  file_ = nullptr;
  if (rc != Z_OK) throw IoError("closing " + path_.string() + " failed");
}

std::vector<ChainRecord> read_records(const std::filesystem::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open record file " + path.string());
  std::vector<ChainRecord> out;
  std::string line;
  char buf[1 << 16];
  auto flush_line = [&] {
    if (line.empty()) return;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      gzclose(f);
      throw IoError("corrupt record in " + path.string());
    }
    try {
      out.push_back(record_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      gzclose(f);
      throw IoError("malformed record in " + path.string() + ": " + e.what());
    }
    line.clear();
  };
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) {
    for (int i = 0; i < n; ++i) {
      if (buf[i] == '\n') {
        flush_line();
      } else {
        line.push_back(buf[i]);
      }
    }
  }
  if (n < 0) {
    gzclose(f);
    throw IoError("read error on " + path.string());
  }
  flush_line();
  gzclose(f);
  return out;
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("cannot write " + path.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into " + path.string() + ": " + ec.message());
}

void write_histogram_csv(const std::filesystem::path& path,
                         const HistogramEstimate& h) {
  std::ostringstream out;
  out << "bin_lo,bin_hi,density,ci_lo,ci_hi,n_eff\n";
  for (std::size_t i = 0; i < h.bins(); ++i) {
    out << format_double(h.edges[i]) << ',' << format_double(h.edges[i + 1]) << ','
        << format_double(h.density[i]) << ',' << format_double(h.ci_lo[i]) << ','
        << format_double(h.ci_hi[i]) << ',' << format_double(h.n_eff[i]) << '\n';
  }
  write_text_atomic(path, out.str());
}

HistogramEstimate read_histogram_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open histogram " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "bin_lo,bin_hi,density,ci_lo,ci_hi,n_eff")
    throw IoError("unexpected histogram header in " + path.string());
  HistogramEstimate h;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double v[6];
    std::istringstream row(line);
    std::string cell;
    for (double& x : v) {
      if (!std::getline(row, cell, ',')) throw IoError("short histogram row");
      x = std::strtod(cell.c_str(), nullptr);
    }
    if (h.edges.empty()) h.edges.push_back(v[0]);
    h.edges.push_back(v[1]);
    h.density.push_back(v[2]);
    h.ci_lo.push_back(v[3]);
    h.ci_hi.push_back(v[4]);
    h.n_eff.push_back(v[5]);
  }
  return h;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& doc) {
  write_text_atomic(path, doc.dump(2) + "\n");
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  auto doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw IoError("invalid JSON in " + path.string());
  return doc;
}

}  // namespace raretail
