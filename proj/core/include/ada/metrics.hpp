// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

namespace ada {

/// -mean(y ln p + (1-y) ln(1-p)) with predictions clamped to
/// [1e-7, 1 - 1e-7] before the logs. Mean taken by pairwise summation so a
/// sharded evaluation reduces order-independently.
double logloss(std::span<const double> predictions, std::span<const int> labels);

/// Area under the ROC curve via the rank statistic: the probability a random
/// positive outscores a random negative, ties counting one half. Requires at
/// least one example of each class.
double auc(std::span<const double> predictions, std::span<const int> labels);

inline constexpr double kPredictionClampLo = 1e-7;

}  // namespace ada
