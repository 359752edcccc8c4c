#include "raretail/records.hpp"

#include <cmath>

#include "raretail/error.hpp"

namespace raretail {

std::size_t WeightedSampleSet::state_for(double lambda) {
  if (!std::isfinite(lambda)) throw ValidationError("bias is not finite");
  for (std::size_t k = 0; k < lambdas_.size(); ++k) {
    if (lambdas_[k] == lambda) return k;
  }
  lambdas_.push_back(lambda);
  counts_.push_back(0.0);
  log_z.clear();
  return lambdas_.size() - 1;
}

void WeightedSampleSet::add(std::size_t state, double value, double weight) {
  if (state >= lambdas_.size()) throw ValidationError("unknown state index");
  if (!std::isfinite(value)) throw ValidationError("observable is not finite");
  if (!(weight >= 0.0)) throw ValidationError("sample weight must be >= 0");
  if (weight == 0.0) return;
  counts_[state] += weight;
  pooled_[value] += weight;
}

double WeightedSampleSet::total() const noexcept {
  double s = 0.0;
  for (double c : counts_) s += c;
  return s;
}

std::vector<double> WeightedSampleSet::values() const {
  std::vector<double> out;
  out.reserve(pooled_.size());
  for (const auto& [v, c] : pooled_) out.push_back(v);
  return out;
}

std::vector<double> WeightedSampleSet::multiplicities() const {
  std::vector<double> out;
  out.reserve(pooled_.size());
  for (const auto& [v, c] : pooled_) out.push_back(c);
  return out;
}

}  // namespace raretail
