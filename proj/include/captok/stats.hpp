#pragma once

// Small statistics helpers shared by evaluation reports and tests.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "captok/common.hpp"

namespace captok {

inline double mean_of(const std::vector<double>& xs) {
    if (xs.empty()) throw DataError("mean_of: empty sample");
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2)
        throw DataError("pearson: need two equal-length samples of size >= 2");
    const double mx = mean_of(xs), my = mean_of(ys);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx, dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw DataError("pearson: zero-variance sample");
    return sxy / std::sqrt(sxx * syy);
}

// Average ranks (ties share the mean of their rank range), 1-based.
inline std::vector<double> average_ranks(const std::vector<double>& xs) {
    const size_t n = xs.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

inline double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    return pearson(average_ranks(xs), average_ranks(ys));
}

// Chi-squared statistic against uniform expected counts.
inline double chi2_uniform(const std::vector<int>& counts) {
    if (counts.empty()) throw DataError("chi2_uniform: empty histogram");
    long total = 0;
    for (int c : counts) total += c;
    if (total <= 0) throw DataError("chi2_uniform: empty sample");
    const double expected = static_cast<double>(total) / static_cast<double>(counts.size());
    double stat = 0.0;
    for (int c : counts) {
        const double d = static_cast<double>(c) - expected;
        stat += d * d / expected;
    }
    return stat;
}

}  // namespace captok
