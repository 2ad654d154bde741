#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "atlas/common.hpp"

namespace atlas {

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error(ErrorCode::invalid_argument, "need two equal samples of size >= 2");
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

inline double spearman(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

struct PairedTest {
  std::size_t n = 0;
  double mean_diff = 0.0;
  double t = 0.0;
  // One-sided p-value for H1: mean(a - b) > 0.
  double p_greater = 1.0;
};

inline PairedTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw Error(ErrorCode::invalid_argument, "need two paired samples of size >= 2");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  PairedTest r;
  r.n = d.size();
  r.mean_diff = mean_of(d);
  double ss = 0.0;
  for (double x : d) ss += (x - r.mean_diff) * (x - r.mean_diff);
  const double sd = std::sqrt(ss / static_cast<double>(r.n - 1));
  if (sd == 0.0) {
    r.t = r.mean_diff > 0.0 ? INFINITY : (r.mean_diff < 0.0 ? -INFINITY : 0.0);
    r.p_greater = r.mean_diff > 0.0 ? 0.0 : (r.mean_diff < 0.0 ? 1.0 : 0.5);
    return r;
  }
  r.t = r.mean_diff / (sd / std::sqrt(static_cast<double>(r.n)));
  boost::math::students_t dist(static_cast<double>(r.n - 1));
  r.p_greater = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

}  // namespace atlas
