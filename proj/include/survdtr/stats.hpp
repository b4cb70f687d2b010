#pragma once

// Small shared statistics helpers used across modules.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace survdtr {

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("mean_of: empty vector");
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double sample_variance(const std::vector<double>& v) {
    if (v.size() < 2) throw std::invalid_argument("sample_variance: need at least 2 values");
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

// Linear-interpolation quantile (the common "type 7" convention).
inline double quantile_type7(std::vector<double> v, double q) {
    if (v.empty()) throw std::invalid_argument("quantile_type7: empty vector");
    if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile_type7: q outside [0,1]");
    std::sort(v.begin(), v.end());
    const double h = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= v.size()) return v.back();
    const double frac = h - static_cast<double>(lo);
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

} // namespace survdtr
