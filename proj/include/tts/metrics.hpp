#pragma once

#include "error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

namespace tts {

// Area under the ROC curve via the Mann-Whitney rank sum; tied scores count
// one half. Labels are 1 (positive) / 0 (negative).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw MetricError("auc: scores and labels differ in length");
    long n_pos = 0, n_neg = 0;
    for (int l : labels) {
        if (l == 1)
            ++n_pos;
        else if (l == 0)
            ++n_neg;
        else
            throw MetricError("auc: labels must be 0 or 1");
    }
    if (n_pos == 0 || n_neg == 0) throw MetricError("auc: both classes must be present");
    for (double s : scores)
        if (std::isnan(s)) throw MetricError("auc: NaN score");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Sum of (1-based, tie-averaged) ranks of the positives, kept doubled so it
    // stays an exact integer.
    long long twice_rank_sum = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const long long twice_avg_rank = static_cast<long long>(i + 1) + static_cast<long long>(j + 1);
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]] == 1) twice_rank_sum += twice_avg_rank;
        i = j + 1;
    }
    const double u = (static_cast<double>(twice_rank_sum) - static_cast<double>(n_pos) * (n_pos + 1)) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline double mean_of(std::span<const double> v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1); zero for fewer than two values.
inline double stddev_of(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

} // namespace tts
