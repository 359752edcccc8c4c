#pragma once

// Append-only sample store: one gzip-compressed JSON-lines file per chain,
// one ChainRecord per line with fields chain, k, lambda, n, tokens, o,
// accepted, o_prop.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "raretail/estimator.hpp"
#include "raretail/sampler.hpp"

namespace raretail {

nlohmann::json record_to_json(const ChainRecord& record);
ChainRecord record_from_json(const nlohmann::json& j);

// Writes records to a .jsonl.gz file. Appends are serialized. A failed
// chain leaves "<path>.partial" holding the failure reason.
class GzRecordSink final : public RecordSink {
 public:
  explicit GzRecordSink(std::filesystem::path path);
  ~GzRecordSink() override;

  GzRecordSink(const GzRecordSink&) = delete;
  GzRecordSink& operator=(const GzRecordSink&) = delete;

  void append(const ChainRecord& record) override;
  void mark_partial(const std::string& reason) override;
  // Flushes and closes; throws IoError on failure.
  void close();

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  void* file_ = nullptr;  // gzFile
  std::mutex mutex_;
  std::string line_;
};

std::vector<ChainRecord> read_records(const std::filesystem::path& path);

// CSV with columns bin_lo,bin_hi,density,ci_lo,ci_hi,n_eff; numbers are
// written with round-trip precision.
void write_histogram_csv(const std::filesystem::path& path,
                         const HistogramEstimate& h);
HistogramEstimate read_histogram_csv(const std::filesystem::path& path);

std::string format_double(double x);

void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);

// Writes via a temporary file and rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace raretail
