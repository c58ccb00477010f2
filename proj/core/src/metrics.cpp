// SPDX-License-Identifier: Apache-2.0
#include "ada/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ada/error.hpp"

namespace ada {

namespace {

double pairwise_sum(std::span<const double> xs) {
    if (xs.size() <= 8) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s;
    }
    const std::size_t half = xs.size() / 2;
    return pairwise_sum(xs.subspan(0, half)) + pairwise_sum(xs.subspan(half));
}

}  // namespace

double logloss(std::span<const double> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size())
        throw DataError("logloss: " + std::to_string(predictions.size()) + " predictions vs " +
                        std::to_string(labels.size()) + " labels");
    if (predictions.empty()) throw DataError("logloss: empty input");
    std::vector<double> terms(predictions.size());
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double p =
            std::min(std::max(predictions[i], kPredictionClampLo), 1.0 - kPredictionClampLo);
        terms[i] = labels[i] ? -std::log(p) : -std::log(1.0 - p);
    }
    return pairwise_sum(terms) / static_cast<double>(terms.size());
}

double auc(std::span<const double> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size())
        throw DataError("auc: " + std::to_string(predictions.size()) + " predictions vs " +
                        std::to_string(labels.size()) + " labels");
    const std::size_t n = predictions.size();
    std::size_t positives = 0;
    for (int y : labels) positives += (y != 0);
    const std::size_t negatives = n - positives;
    if (positives == 0 || negatives == 0)
        throw DomainError("auc: undefined on a single-class label set");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return predictions[a] < predictions[b]; });

    // Midranks over tied scores, then the Mann-Whitney statistic.
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && predictions[order[j + 1]] == predictions[order[i]]) ++j;
        const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) rank[order[t]] = mid;
        i = j + 1;
    }
    double rank_sum = 0.0;
    for (std::size_t idx = 0; idx < n; ++idx)
        if (labels[idx]) rank_sum += rank[idx];
    const double u = rank_sum - static_cast<double>(positives) *
                                    (static_cast<double>(positives) + 1.0) / 2.0;
    return u / (static_cast<double>(positives) * static_cast<double>(negatives));
}

}  // namespace ada
