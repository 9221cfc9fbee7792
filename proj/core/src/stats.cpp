#include "tsae/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "tsae/errors.hpp"

namespace tsae {

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("pearson: length mismatch");
  if (x.size() < 2) throw UndefinedError("pearson: need at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedError("pearson: constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("spearman: length mismatch");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

RankSumResult rank_sum_less(std::span<const double> x, std::span<const double> y) {
  if (x.empty() || y.empty()) throw UndefinedError("rank_sum_less: empty sample");
  std::vector<double> all(x.begin(), x.end());
  all.insert(all.end(), y.begin(), y.end());
  const auto ranks = average_ranks(all);
  const double n1 = static_cast<double>(x.size()), n2 = static_cast<double>(y.size());
  double r1 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) r1 += ranks[i];
  RankSumResult out;
  out.u = r1 - n1 * (n1 + 1.0) / 2.0;

  std::map<double, std::size_t> ties;
  for (double v : all) ++ties[v];
  double tie_term = 0.0;
  for (const auto& [v, t] : ties) {
    const double td = static_cast<double>(t);
    tie_term += td * td * td - td;
  }
  const double n = n1 + n2;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (var <= 0.0) throw UndefinedError("rank_sum_less: all values tied");
  const double mean = n1 * n2 / 2.0;
  // continuity correction towards the mean
  out.z = (out.u - mean + 0.5) / std::sqrt(var);
  out.p_value = 0.5 * std::erfc(-out.z / std::sqrt(2.0));
  return out;
}

}  // namespace tsae
