// Copyright 2026 The dfcr Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dfcr/rng.hpp"
#include "dfcr/tensor.hpp"

namespace dfcr::testutil {

inline void fill_uniform(DTensor& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
}

template <typename T>
inline void fill_uniform_t(TensorT<T>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
}

/// Central finite difference of a scalar function w.r.t. every entry of t.
inline std::vector<double> fd_grad(const std::function<double()>& f, DTensor& t,
                                   double h = 1e-4) {
    std::vector<double> g(t.numel());
    for (int64_t i = 0; i < t.numel(); ++i) {
        const double saved = t[i];
        t[i] = saved + h;
        const double fp = f();
        t[i] = saved - h;
        const double fm = f();
        t[i] = saved;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Relative error with a floor that keeps finite-difference noise on
/// near-zero gradients from dominating.
inline double rel_err(double a, double b, double floor = 1e-2) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_err(const double* analytic, const std::vector<double>& numeric,
                          double floor = 1e-2) {
    double worst = 0.0;
    for (size_t i = 0; i < numeric.size(); ++i)
        worst = std::max(worst, rel_err(analytic[i], numeric[i], floor));
    return worst;
}

/// Scalar loss used to aggregate a tensor output for gradient checks: a fixed
/// random weighting of the entries, so every output element participates.
inline double weighted_sum(const DTensor& t, const std::vector<double>& w) {
    double s = 0;
    for (int64_t i = 0; i < t.numel(); ++i) s += w[i] * t[i];
    return s;
}

inline std::vector<double> make_weights(int64_t n, Rng& rng) {
    std::vector<double> w(n);
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    return w;
}

}  // namespace dfcr::testutil
