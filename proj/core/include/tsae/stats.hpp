#pragma once

#include <span>
#include <vector>

namespace tsae {

/// Throws UndefinedError for fewer than two points or a constant input.
double pearson(std::span<const double> x, std::span<const double> y);

/// Pearson correlation of average ranks.
double spearman(std::span<const double> x, std::span<const double> y);

/// Ranks starting at 1; ties share their average rank.
std::vector<double> average_ranks(std::span<const double> x);

struct RankSumResult {
  double u = 0.0;        // Mann-Whitney U of the first sample
  double z = 0.0;
  double p_value = 0.0;  // one-sided
};

/// One-sided Mann-Whitney test that `x` tends to be smaller than `y`
/// (normal approximation with tie correction).
RankSumResult rank_sum_less(std::span<const double> x, std::span<const double> y);

}  // namespace tsae
