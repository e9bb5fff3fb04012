#pragma once

#include "medvill/error.hpp"
#include "medvill/metrics.hpp"
#include "medvill/rng.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace medvill {

inline constexpr int kBootstrapResamples = 30;
inline constexpr int kBootstrapRetries = 100;
inline constexpr double kSignificance = 0.05;

struct BootstrapResult {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation of the resample values
  std::vector<double> values;
};

/// Indices of resample `r`, attempt `attempt`: `count` draws with replacement
/// from a stream derived from (seed, "bootstrap:<r>", attempt).
inline std::vector<std::size_t> bootstrap_indices(std::uint64_t seed, int r, int attempt, std::size_t count) {
  Rng rng(seed, "bootstrap:" + std::to_string(r), static_cast<std::uint64_t>(attempt));
  std::vector<std::size_t> idx(count);
  for (auto& i : idx) i = rng.index(count);
  return idx;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// `metric` receives the resampled item indices. A resample on which the
/// metric throws UndefinedMetric is redrawn up to kBootstrapRetries times.
inline BootstrapResult bootstrap(const std::function<double(const std::vector<std::size_t>&)>& metric,
                                 std::size_t item_count, std::uint64_t seed, int n = kBootstrapResamples) {
  if (item_count < 2) throw DataError("bootstrap needs at least 2 evaluation items");
  if (n < 1) throw DataError("bootstrap needs at least one resample");
  BootstrapResult out;
  for (int r = 0; r < n; ++r) {
    for (int attempt = 0;; ++attempt) {
      if (attempt >= kBootstrapRetries) {
        throw NumericError("metric undefined on " + std::to_string(kBootstrapRetries) + " consecutive redraws of resample " +
                           std::to_string(r));
      }
      try {
        out.values.push_back(metric(bootstrap_indices(seed, r, attempt, item_count)));
        break;
      } catch (const UndefinedMetric&) {
      }
    }
  }
  out.mean = mean_of(out.values);
  double ss = 0.0;
  for (double v : out.values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / static_cast<double>(out.values.size()));
  return out;
}

/// Two-sided Welch t-test p-value.
inline double t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw DataError("t-test needs at least 2 values per sample");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double ma = mean_of(a), mb = mean_of(b);
  double va = 0.0, vb = 0.0;
  for (double x : a) va += (x - ma) * (x - ma);
  for (double x : b) vb += (x - mb) * (x - mb);
  va /= na - 1.0;
  vb /= nb - 1.0;
  const double sa = va / na, sb = vb / nb;
  const double se2 = sa + sb;
  if (se2 == 0.0) {
    if (ma == mb) throw NumericError("t-test undefined: both samples are constant and equal");
    return 0.0;
  }
  const double t = (ma - mb) / std::sqrt(se2);
  const double df = se2 * se2 / ((sa * sa) / (na - 1.0) + (sb * sb) / (nb - 1.0));
  const boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

}  // namespace medvill
