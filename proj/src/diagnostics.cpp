#include "raretail/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "raretail/error.hpp"

namespace raretail {

std::size_t burn_in_count(std::size_t n, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0))
    throw ValidationError("burn-in fraction must lie in [0, 1)");
  // The tolerance keeps exact products such as 0.1 * 40000 from rounding up.
  const double drop = std::ceil(fraction * static_cast<double>(n) - 1e-9);
  return std::min(n, static_cast<std::size_t>(std::max(0.0, drop)));
}

std::vector<ChainData> apply_burn_in(std::span<const ChainData> chains,
                                     double fraction) {
  std::vector<ChainData> out;
  out.reserve(chains.size());
  for (const auto& chain : chains) {
    if (chain.is_direct() || fraction == 0.0) {
      out.push_back(chain);
      continue;
    }
    std::map<std::size_t, std::size_t> per_bias;
    for (const auto& r : chain.records) ++per_bias[r.k];
    std::map<std::size_t, std::size_t> to_drop;
    for (const auto& [k, n] : per_bias) to_drop[k] = burn_in_count(n, fraction);
    ChainData trimmed{chain.chain, chain.arm, {}};
    trimmed.records.reserve(chain.records.size());
    for (const auto& r : chain.records) {
      auto& remaining = to_drop[r.k];
      if (remaining > 0) {
        --remaining;
        continue;
      }
      trimmed.records.push_back(r);
    }
    out.push_back(std::move(trimmed));
  }
  return out;
}

GRReport gelman_rubin(std::span<const std::vector<double>> chains,
                      double threshold) {
  GRReport rep;
  rep.chains = chains.size();
  if (rep.chains < 2) throw ValidationError("Gelman-Rubin needs >= 2 chains");
  std::size_t L = std::numeric_limits<std::size_t>::max();
  for (const auto& c : chains) L = std::min(L, c.size());
  rep.length = L;
  if (L < 2) throw ValidationError("Gelman-Rubin needs >= 2 samples per chain");

  const double J = static_cast<double>(rep.chains);
  const double Ld = static_cast<double>(L);
  std::vector<double> means(rep.chains);
  double within = 0.0;
  for (std::size_t j = 0; j < rep.chains; ++j) {
    const auto& c = chains[j];
    double m = 0.0;
    for (std::size_t i = 0; i < L; ++i) m += c[i];
    m /= Ld;
    means[j] = m;
    double ss = 0.0;
    for (std::size_t i = 0; i < L; ++i) ss += (c[i] - m) * (c[i] - m);
    within += ss / (Ld - 1.0);
  }
  within /= J;
  const double grand = std::accumulate(means.begin(), means.end(), 0.0) / J;
  double between = 0.0;
  for (double m : means) between += (m - grand) * (m - grand);
  between *= Ld / (J - 1.0);
  rep.between = between;
  rep.within = within;

  // Relative scale for deciding that a variance is numerically zero.
  double scale = std::abs(grand);
  for (double m : means) scale = std::max(scale, std::abs(m));
  const double eps = 1e-24 * std::max(1.0, scale * scale);
  if (within <= eps) {
    if (between <= eps) {
      rep.gr = (Ld - 1.0) / Ld;
      rep.pass = rep.gr < threshold;
    } else {
      rep.gr = std::numeric_limits<double>::infinity();
      rep.divergent = true;
      rep.pass = false;
    }
    return rep;
  }
  rep.gr = ((Ld - 1.0) / Ld * within + between / Ld) / within;
  rep.pass = rep.gr < threshold;
  return rep;
}

std::vector<BiasConvergence> convergence_report(
    std::span<const ChainData> chains, double threshold) {
  // (arm, k) -> lambda and per-chain series
  std::map<BiasKey, std::vector<std::vector<double>>> series;
  for (const auto& chain : chains) {
    if (chain.is_direct()) continue;
    std::map<std::size_t, std::vector<double>> per_k;
    std::map<std::size_t, double> lambda_of;
    for (const auto& r : chain.records) {
      per_k[r.k].push_back(r.o);
      lambda_of[r.k] = r.lambda;
    }
    for (auto& [k, values] : per_k)
      series[BiasKey{chain.arm, k, lambda_of[k]}].push_back(std::move(values));
  }
  std::vector<BiasConvergence> out;
  for (const auto& [key, chain_values] : series) {
    BiasConvergence bc{key, {}, true};
    std::size_t min_len = std::numeric_limits<std::size_t>::max();
    for (const auto& v : chain_values) min_len = std::min(min_len, v.size());
    if (chain_values.size() < 2 || min_len < 2) {
      bc.assessed = false;
      bc.report.chains = chain_values.size();
      bc.report.length = chain_values.empty() ? 0 : min_len;
    } else {
      bc.report = gelman_rubin(chain_values, threshold);
    }
    out.push_back(std::move(bc));
  }
  return out;
}

FilterResult filter_converged(std::span<const ChainData> chains,
                              double threshold) {
  FilterResult result;
  result.report = convergence_report(chains, threshold);
  for (const auto& bc : result.report) {
    if (bc.assessed && !bc.report.pass) result.dropped.push_back(bc.bias);
  }
  auto is_dropped = [&](int arm, std::size_t k) {
    return std::any_of(result.dropped.begin(), result.dropped.end(),
                       [&](const BiasKey& b) { return b.arm == arm && b.k == k; });
  };
  result.kept.reserve(chains.size());
  for (const auto& chain : chains) {
    if (result.dropped.empty() || chain.is_direct()) {
      result.kept.push_back(chain);
      continue;
    }
    ChainData kept{chain.chain, chain.arm, {}};
    for (const auto& r : chain.records) {
      if (!is_dropped(chain.arm, r.k)) kept.records.push_back(r);
    }
    result.kept.push_back(std::move(kept));
  }
  return result;
}

OverlapMatrix overlap_matrix(const WeightedSampleSet& set, double cutoff) {
  OverlapMatrix out;
  if (set.log_z.size() != set.num_states())
    throw ValidationError("overlap matrix needs solved log partition values");
  if (set.empty()) throw ValidationError("overlap matrix needs samples");

  std::vector<std::size_t> states;
  for (std::size_t k = 0; k < set.num_states(); ++k) {
    if (set.counts()[k] > 0.0) {
      states.push_back(k);
    } else {
      out.warnings.push_back("distribution with lambda=" +
                             std::to_string(set.lambdas()[k]) +
                             " has no samples and is excluded");
    }
  }
  const std::size_t K = states.size();
  for (auto k : states) {
    out.lambdas.push_back(set.lambdas()[k]);
    out.counts.push_back(set.counts()[k]);
  }
  out.matrix.assign(K, std::vector<double>(K, 0.0));

  const auto values = set.values();
  const auto mult = set.multiplicities();
  std::vector<double> logp(K);  // log p_k(x) up to the common base factor
  for (std::size_t u = 0; u < values.size(); ++u) {
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < K; ++a) {
      const std::size_t k = states[a];
      logp[a] = -set.lambdas()[k] * values[u] - set.log_z[k];
      hi = std::max(hi, std::log(out.counts[a]) + logp[a]);
    }
    double denom = 0.0;
    for (std::size_t a = 0; a < K; ++a)
      denom += std::exp(std::log(out.counts[a]) + logp[a] - hi);
    const double log_denom = hi + std::log(denom);
    for (std::size_t i = 0; i < K; ++i) {
      const double attribution = std::exp(std::log(out.counts[i]) + logp[i] - log_denom);
      for (std::size_t j = 0; j < K; ++j) {
        out.matrix[i][j] += mult[u] * attribution * std::exp(logp[j] - log_denom);
      }
    }
  }
  // Columns sum to 1 exactly at the MBAR fixed point; normalize away the
  // residual of an approximately converged solve.
  for (std::size_t j = 0; j < K; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < K; ++i) col += out.matrix[i][j];
    if (col > 0.0) {
      for (std::size_t i = 0; i < K; ++i) out.matrix[i][j] /= col;
    }
  }

  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return out.lambdas[a] < out.lambdas[b];
  });
  for (std::size_t p = 0; p + 1 < K; ++p) {
    const std::size_t a = order[p];
    const std::size_t b = order[p + 1];
    if (std::min(out.matrix[a][b], out.matrix[b][a]) < cutoff)
      out.flagged.emplace_back(a, b);
  }
  return out;
}

std::vector<AcceptanceRate> acceptance_report(std::span<const ChainData> chains) {
  std::vector<AcceptanceRate> out;
  for (const auto& chain : chains) {
    if (chain.is_direct()) continue;
    std::map<std::size_t, AcceptanceRate> per_k;
    for (const auto& r : chain.records) {
      auto& a = per_k[r.k];
      a.chain = chain.chain;
      a.arm = chain.arm;
      a.k = r.k;
      a.lambda = r.lambda;
      ++a.proposals;
      a.accepted += r.accepted ? 1 : 0;
    }
    for (auto& [k, a] : per_k) {
      a.rate = a.proposals ? static_cast<double>(a.accepted) /
                                 static_cast<double>(a.proposals)
                           : 0.0;
      out.push_back(a);
    }
  }
  return out;
}

}  // namespace raretail
