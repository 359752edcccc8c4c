#include "raretail/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include <boost/math/distributions/normal.hpp>

#include "raretail/error.hpp"
#include "raretail/parallel.hpp"
#include "raretail/rng.hpp"

namespace raretail {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct LogSumExp {
  double hi = kNegInf;
  double sum = 0.0;
  void add(double x) {
    if (x == kNegInf) return;
    if (x > hi) {
      sum = sum * std::exp(hi - x) + 1.0;
      hi = x;
    } else {
      sum += std::exp(x - hi);
    }
  }
  double value() const { return hi == kNegInf ? kNegInf : hi + std::log(sum); }
};

// log sum_j N_j exp(-lambda_j o - f_j) over states with samples.
double log_mixture_denominator(double o, std::span<const double> log_counts,
                               std::span<const double> lambdas,
                               std::span<const double> log_z) {
  double hi = kNegInf;
  for (std::size_t j = 0; j < lambdas.size(); ++j) {
    if (log_counts[j] == kNegInf) continue;
    hi = std::max(hi, log_counts[j] - lambdas[j] * o - log_z[j]);
  }
  double s = 0.0;
  for (std::size_t j = 0; j < lambdas.size(); ++j) {
    if (log_counts[j] == kNegInf) continue;
    s += std::exp(log_counts[j] - lambdas[j] * o - log_z[j] - hi);
  }
  return hi + std::log(s);
}

std::vector<double> log_counts_of(const WeightedSampleSet& set) {
  std::vector<double> out;
  for (double c : set.counts()) out.push_back(c > 0.0 ? std::log(c) : kNegInf);
  return out;
}

void require_solved(const WeightedSampleSet& set) {
  if (set.log_z.size() != set.num_states() || set.num_states() == 0)
    throw ValidationError("sample set has no solved log partition values");
}

}  // namespace

MbarResult solve_mbar(WeightedSampleSet& set, double tol, std::size_t max_iter) {
  const std::size_t K = set.num_states();
  if (K == 0 || set.empty()) throw ValidationError("MBAR needs samples");
  MbarResult result;
  for (std::size_t k = 0; k < K; ++k) {
    if (!(set.counts()[k] > 0.0))
      result.warnings.push_back("state lambda=" + std::to_string(set.lambdas()[k]) +
                                " has no samples");
  }
  const auto& lambdas = set.lambdas();
  const auto values = set.values();
  const auto mult = set.multiplicities();
  const auto log_counts = log_counts_of(set);
  std::vector<double> log_mult(mult.size());
  for (std::size_t u = 0; u < mult.size(); ++u) log_mult[u] = std::log(mult[u]);

  std::optional<std::size_t> zero_state;
  for (std::size_t k = 0; k < K; ++k) {
    if (lambdas[k] == 0.0) zero_state = k;
  }

  std::vector<double> f(K, 0.0), next(K), log_denom(values.size());
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t it = 1; it <= max_iter; ++it) {
    for (std::size_t u = 0; u < values.size(); ++u)
      log_denom[u] = log_mixture_denominator(values[u], log_counts, lambdas, f);
    LogSumExp base;
    for (std::size_t k = 0; k < K; ++k) {
      LogSumExp acc;
      for (std::size_t u = 0; u < values.size(); ++u)
        acc.add(log_mult[u] - lambdas[k] * values[u] - log_denom[u]);
      next[k] = acc.value();
    }
    double shift;
    if (zero_state) {
      shift = next[*zero_state];
    } else {
      for (std::size_t u = 0; u < values.size(); ++u)
        base.add(log_mult[u] - log_denom[u]);
      shift = base.value();
    }
    double residual = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      next[k] -= shift;
      residual = std::max(residual, std::abs(next[k] - f[k]));
    }
    if (!std::isfinite(residual))
      throw ConvergenceError("MBAR produced a non-finite log partition value",
                             residual);
    if (residual > previous) result.damped = true;
    previous = residual;
    for (std::size_t k = 0; k < K; ++k)
      f[k] = result.damped ? f[k] + 0.5 * (next[k] - f[k]) : next[k];
    result.iterations = it;
    result.residual = residual;
    if (residual < tol) {
      set.log_z = f;
      result.log_z = f;
      if (K > 1) {
        const auto overlap = overlap_matrix(set, kOverlapCutoff);
        for (std::size_t a = 0; a < overlap.matrix.size(); ++a) {
          double off = 0.0;
          for (std::size_t b = 0; b < overlap.matrix.size(); ++b)
            if (a != b) off += overlap.matrix[b][a];
          if (off < 1e-12)
            result.warnings.push_back(
                "distribution lambda=" + std::to_string(overlap.lambdas[a]) +
                " has no overlap with the others; estimates are ill-conditioned");
        }
      }
      return result;
    }
  }
  throw ConvergenceError("MBAR did not converge within " +
                             std::to_string(max_iter) + " iterations (residual " +
                             std::to_string(result.residual) + ")",
                         result.residual);
}

double log_importance_weight(double o, const WeightedSampleSet& set) {
  require_solved(set);
  const double log_n = std::log(set.total());
  return log_n - log_mixture_denominator(o, log_counts_of(set), set.lambdas(),
                                         set.log_z);
}

double importance_weight(double o, const WeightedSampleSet& set) {
  return std::exp(log_importance_weight(o, set));
}

double log_partition(double lambda, const WeightedSampleSet& set) {
  require_solved(set);
  const auto values = set.values();
  const auto mult = set.multiplicities();
  const auto log_counts = log_counts_of(set);
  LogSumExp acc;
  for (std::size_t u = 0; u < values.size(); ++u) {
    acc.add(std::log(mult[u]) - lambda * values[u] -
            log_mixture_denominator(values[u], log_counts, set.lambdas(),
                                    set.log_z));
  }
  return acc.value();
}

double normalization_residual(const WeightedSampleSet& set) {
  require_solved(set);
  double worst = 0.0;
  for (std::size_t k = 0; k < set.num_states(); ++k) {
    const double lz = log_partition(set.lambdas()[k], set);
    worst = std::max(worst, std::abs(std::exp(lz - set.log_z[k]) - 1.0));
  }
  return worst;
}

double HistogramEstimate::total_mass() const {
  double s = 0.0;
  for (std::size_t i = 0; i < bins(); ++i) s += probability(i);
  return s;
}

std::vector<double> make_edges(double lo, double hi, double width) {
  if (!(width > 0.0) || !(hi > lo) || !std::isfinite(lo) || !std::isfinite(hi))
    throw ValidationError("bin specification needs lo < hi and width > 0");
  const auto n = static_cast<std::size_t>(std::ceil((hi - lo) / width - 1e-9));
  std::vector<double> edges;
  edges.reserve(n + 1);
  for (std::size_t i = 0; i <= n; ++i)
    edges.push_back(lo + static_cast<double>(i) * width);
  return edges;
}

void validate_edges(std::span<const double> edges) {
  if (edges.size() < 2) throw ValidationError("need at least two bin edges");
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (!std::isfinite(edges[i])) throw ValidationError("bin edge not finite");
    if (i > 0 && !(edges[i] > edges[i - 1]))
      throw ValidationError("bin edges must be strictly increasing");
  }
}

std::optional<std::size_t> bin_of(std::span<const double> edges, double value) {
  if (value < edges.front() || !(value < edges.back())) return std::nullopt;
  auto it = std::upper_bound(edges.begin(), edges.end(), value);
  return static_cast<std::size_t>(std::distance(edges.begin(), it)) - 1;
}

HistogramEstimate reconstruct_histogram(const WeightedSampleSet& set,
                                        std::span<const double> edges) {
  validate_edges(edges);
  require_solved(set);
  const std::size_t B = edges.size() - 1;
  HistogramEstimate h;
  h.edges.assign(edges.begin(), edges.end());
  std::vector<double> mass(B, 0.0), sum_w(B, 0.0), sum_w2(B, 0.0);
  const auto values = set.values();
  const auto mult = set.multiplicities();
  const double n_total = set.total();
  for (std::size_t u = 0; u < values.size(); ++u) {
    const auto bin = bin_of(edges, values[u]);
    if (!bin) continue;
    const double w = importance_weight(values[u], set);
    mass[*bin] += mult[u] * w / n_total;
    sum_w[*bin] += mult[u] * w;
    sum_w2[*bin] += mult[u] * w * w;
  }
  h.density.resize(B);
  h.n_eff.resize(B);
  for (std::size_t i = 0; i < B; ++i) {
    h.density[i] = mass[i] / h.width(i);
    h.n_eff[i] = sum_w2[i] > 0.0 ? sum_w[i] * sum_w[i] / sum_w2[i] : 0.0;
  }
  h.ci_lo = h.density;
  h.ci_hi = h.density;
  return h;
}

double coverage_z(double coverage) {
  if (!(coverage > 0.0 && coverage < 1.0))
    throw ValidationError("coverage must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal(),
                               1.0 - (1.0 - coverage) / 2.0);
}

Interval wilson_interval(std::size_t successes, std::size_t trials,
                         double coverage) {
  if (trials < 1 || successes > trials)
    throw ValidationError("Wilson interval needs 0 <= k <= n and n >= 1");
  const double z = coverage_z(coverage);
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double centre = (p + z2 / (2.0 * n)) / denom;
  const double half =
      z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  Interval out{centre - half, centre + half};
  if (successes == 0) {
    out.lower = 0.0;
    out.upper = z2 / (n + z2);
  }
  if (successes == trials) {
    out.upper = 1.0;
    out.lower = n / (n + z2);
  }
  return out;
}

HistogramEstimate direct_histogram(std::span<const double> values,
                                   std::span<const double> edges,
                                   double coverage) {
  validate_edges(edges);
  if (values.empty()) throw ValidationError("direct histogram needs samples");
  const std::size_t B = edges.size() - 1;
  std::vector<std::size_t> counts(B, 0);
  for (double v : values) {
    if (auto bin = bin_of(edges, v)) ++counts[*bin];
  }
  HistogramEstimate h;
  h.edges.assign(edges.begin(), edges.end());
  for (std::size_t i = 0; i < B; ++i) {
    const double w = h.edges[i + 1] - h.edges[i];
    const auto ci = wilson_interval(counts[i], values.size(), coverage);
    h.density.push_back(static_cast<double>(counts[i]) /
                        static_cast<double>(values.size()) / w);
    h.ci_lo.push_back(ci.lower / w);
    h.ci_hi.push_back(ci.upper / w);
    h.n_eff.push_back(static_cast<double>(counts[i]));
  }
  return h;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("percentile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

WeightedSampleSet pool_chains(std::span<const ChainData> chains) {
  WeightedSampleSet set;
  for (const auto& chain : chains) {
    for (const auto& r : chain.records) set.add_lambda(r.lambda, r.o);
  }
  return set;
}

PipelineResult run_estimate(std::span<const ChainData> chains,
                            const PipelineSettings& settings) {
  validate_edges(settings.edges);
  const auto burned = apply_burn_in(chains, settings.burn_in);
  auto filtered = filter_converged(burned, settings.gr_threshold);
  bool had_biased = false;
  bool has_biased = false;
  for (const auto& c : burned)
    had_biased |= !c.is_direct() && !c.records.empty();
  for (const auto& c : filtered.kept)
    has_biased |= !c.is_direct() && !c.records.empty();
  if (had_biased && !has_biased)
    throw ConvergenceError("convergence filtering removed every biased sample",
                           std::numeric_limits<double>::quiet_NaN());

  PipelineResult out;
  out.pool = pool_chains(filtered.kept);
  if (out.pool.empty()) throw ValidationError("no samples to estimate from");
  out.mbar = solve_mbar(out.pool, settings.mbar_tol, settings.mbar_max_iter);
  out.histogram = reconstruct_histogram(out.pool, settings.edges);
  out.dropped = std::move(filtered.dropped);
  out.convergence = std::move(filtered.report);
  return out;
}

BootstrapResult bootstrap_ci(std::span<const ChainData> chains,
                             const PipelineSettings& settings,
                             const BootstrapOptions& options) {
  if (options.replicas < 1) throw ValidationError("need at least one replica");
  BootstrapResult result;
  result.point = run_estimate(chains, settings);

  std::map<int, std::vector<std::size_t>> arms;
  for (std::size_t i = 0; i < chains.size(); ++i) arms[chains[i].arm].push_back(i);

  const std::size_t R = options.replicas;
  std::vector<std::optional<std::vector<double>>> densities(R);
  std::vector<std::string> failures(R);

  parallel_for(R, options.workers, [&](std::size_t r) {
    Rng rng(derive_seed(options.seed, stream::kBootstrap, r));
    std::vector<ChainData> replica;
    for (const auto& [arm, members] : arms) {
      if (arm == kDirectArm) {
        for (std::size_t idx : members) {
          const auto& src = chains[idx].records;
          ChainData d{chains[idx].chain, kDirectArm, {}};
          d.records.resize(src.size());
          for (auto& rec : d.records) {
            const auto& pick = src[rng.below(src.size())];
            rec.lambda = pick.lambda;
            rec.k = pick.k;
            rec.o = pick.o;
          }
          replica.push_back(std::move(d));
        }
        continue;
      }
      for (std::size_t m = 0; m < members.size(); ++m)
        replica.push_back(chains[members[rng.below(members.size())]]);
    }
    try {
      densities[r] = run_estimate(replica, settings).histogram.density;
    } catch (const Error& e) {
      failures[r] = e.what();
    }
  });

  for (std::size_t r = 0; r < R; ++r) {
    if (densities[r]) {
      result.replica_density.push_back(std::move(*densities[r]));
    } else {
      ++result.discarded;
      result.warnings.push_back("bootstrap replica " + std::to_string(r) +
                                " discarded: " + failures[r]);
    }
  }
  if (static_cast<double>(result.discarded) >
      options.max_discard_fraction * static_cast<double>(R)) {
    throw ConvergenceError(std::to_string(result.discarded) + " of " +
                               std::to_string(R) +
                               " bootstrap replicas were discarded",
                           static_cast<double>(result.discarded));
  }

  result.estimate = result.point.histogram;
  const double tail = (1.0 - options.coverage) / 2.0;
  const std::size_t B = result.estimate.bins();
  std::vector<double> column(result.replica_density.size());
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t r = 0; r < column.size(); ++r)
      column[r] = result.replica_density[r][i];
    const double est = result.estimate.density[i];
    result.estimate.ci_lo[i] = std::min(est, percentile(column, tail));
    result.estimate.ci_hi[i] = std::max(est, percentile(column, 1.0 - tail));
  }
  return result;
}

std::vector<std::optional<double>> relative_ci_halfwidth(
    const HistogramEstimate& est, EmptyBinFallback fallback,
    std::span<const double> reference_density) {
  double smallest = std::numeric_limits<double>::infinity();
  for (double d : est.density) {
    if (d > 0.0) smallest = std::min(smallest, d);
  }
  if (fallback == EmptyBinFallback::Reference &&
      reference_density.size() != est.bins())
    throw ValidationError("reference estimate has a different bin count");

  std::vector<std::optional<double>> out(est.bins());
  for (std::size_t i = 0; i < est.bins(); ++i) {
    const double half = (est.ci_hi[i] - est.ci_lo[i]) / 2.0;
    double height = est.density[i];
    if (height <= 0.0) {
      switch (fallback) {
        case EmptyBinFallback::None:
          break;
        case EmptyBinFallback::HalfSmallestNonzero:
          if (std::isfinite(smallest)) height = smallest / 2.0;
          break;
        case EmptyBinFallback::Reference:
          height = reference_density[i];
          break;
      }
    }
    if (height > 0.0) out[i] = half / height;
  }
  return out;
}

std::vector<ChainData> first_half_after_burn_in(std::span<const ChainData> chains,
                                                double burn_in) {
  auto burned = apply_burn_in(chains, burn_in);
  for (auto& chain : burned) {
    if (chain.is_direct()) continue;
    std::map<std::size_t, std::size_t> per_bias;
    for (const auto& r : chain.records) ++per_bias[r.k];
    std::map<std::size_t, std::size_t> seen;
    std::vector<ChainRecord> kept;
    for (auto& r : chain.records) {
      if (seen[r.k]++ < per_bias[r.k] / 2) kept.push_back(std::move(r));
    }
    chain.records = std::move(kept);
  }
  return burned;
}

std::vector<BiasShiftRow> bias_shift_report(const HistogramEstimate& full,
                                            const HistogramEstimate& half) {
  if (full.edges != half.edges)
    throw ValidationError("bias shift needs estimates on identical bins");
  std::vector<BiasShiftRow> rows(full.bins());
  for (std::size_t i = 0; i < full.bins(); ++i) {
    auto& row = rows[i];
    row.bin_lo = full.edges[i];
    row.bin_hi = full.edges[i + 1];
    if (full.density[i] <= 0.0 || half.density[i] <= 0.0) continue;
    row.h_full = full.density[i];
    row.h_half = half.density[i];
    row.delta = *row.h_full - *row.h_half;
    row.rel_height = *row.delta / *row.h_full;
    const double ci_half = (full.ci_hi[i] - full.ci_lo[i]) / 2.0;
    if (ci_half > 0.0) {
      row.rel_ci = *row.delta / ci_half;
    } else if (*row.delta == 0.0) {
      row.rel_ci = 0.0;
    }
  }
  return rows;
}

}  // namespace raretail
