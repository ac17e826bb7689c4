#pragma once

#include <cmath>
#include <vector>

#include "cramf/common.hpp"

namespace cramf {

// Float storage, double accumulation: keeps index files small while the
// similarity math stays stable across summation orders.

inline double dot(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size())
        throw InputError("dot: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

inline double norm(const std::vector<float>& a) {
    double s = 0.0;
    for (float x : a) s += static_cast<double>(x) * x;
    return std::sqrt(s);
}

inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
    double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

// Returns false (vector untouched) when the input has zero norm.
inline bool normalize(std::vector<float>& a) {
    double n = norm(a);
    if (n == 0.0) return false;
    for (float& x : a) x = static_cast<float>(x / n);
    return true;
}

}  // namespace cramf
