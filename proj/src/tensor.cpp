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

#include "dfcr/tensor.hpp"

#include <cmath>

namespace dfcr {

namespace {

template <typename T>
void check_binary_shapes(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.same_shape(b) || a.numel() == 1 || b.numel() == 1) return;
    throw std::invalid_argument(std::string(op) + ": incompatible shapes");
}

// Accumulates g into t.grad, summing when t is a broadcast scalar.
template <typename T>
void accumulate(TensorT<T> t, const TensorT<T>& out, const std::vector<T>& g) {
    t.ensure_grad();
    if (t.numel() == out.numel()) {
        T* tg = t.grad();
        for (int64_t i = 0; i < t.numel(); ++i) tg[i] += g[i];
    } else {
        T s = 0;
        for (T v : g) s += v;
        t.grad()[0] += s;
    }
}

}  // namespace

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape) {
    check_binary_shapes(a, b, "add");
    const bool as = a.numel() == 1, bs = b.numel() == 1;
    TensorT<T> out(as ? b.shape() : a.shape());
    const int64_t n = out.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[as ? 0 : i] + pb[bs ? 0 : i];
    if (tape) {
        tape->record("add", {out}, [a, b, out]() mutable {
            accumulate(a, out, out.grad_vec());
            accumulate(b, out, out.grad_vec());
        });
    }
    return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape) {
    check_binary_shapes(a, b, "mul");
    const bool as = a.numel() == 1, bs = b.numel() == 1;
    TensorT<T> out(as ? b.shape() : a.shape());
    const int64_t n = out.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[as ? 0 : i] * pb[bs ? 0 : i];
    if (tape) {
        tape->record("mul", {out}, [a, b, out, as, bs]() mutable {
            const int64_t n = out.numel();
            const T* g = out.grad();
            std::vector<T> ga(n), gb(n);
            const T* pa = a.data();
            const T* pb = b.data();
            for (int64_t i = 0; i < n; ++i) {
                ga[i] = g[i] * pb[bs ? 0 : i];
                gb[i] = g[i] * pa[as ? 0 : i];
            }
            accumulate(a, out, ga);
            accumulate(b, out, gb);
        });
    }
    return out;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x, TapeT<T>* tape) {
    TensorT<T> out(x.shape());
    const int64_t n = x.numel();
    const T* px = x.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    if (tape) {
        tape->record("relu", {out}, [x, out]() mutable {
            x.ensure_grad();
            const T* g = out.grad();
            const T* px = x.data();
            T* gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i)
                if (px[i] > T(0)) gx[i] += g[i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x, TapeT<T>* tape) {
    TensorT<T> out(x.shape());
    const int64_t n = x.numel();
    const T* px = x.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = sigmoid_scalar(px[i]);
    if (tape) {
        tape->record("sigmoid", {out}, [x, out]() mutable {
            x.ensure_grad();
            const T* g = out.grad();
            const T* po = out.data();
            T* gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * po[i] * (T(1) - po[i]);
        });
    }
    return out;
}

template <typename T>
TensorT<T> tanh(const TensorT<T>& x, TapeT<T>* tape) {
    TensorT<T> out(x.shape());
    const int64_t n = x.numel();
    const T* px = x.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = std::tanh(px[i]);
    if (tape) {
        tape->record("tanh", {out}, [x, out]() mutable {
            x.ensure_grad();
            const T* g = out.grad();
            const T* po = out.data();
            T* gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g[i] * (T(1) - po[i] * po[i]);
        });
    }
    return out;
}

// C[m,n] (+)= sum_k A[m,k] B[k,n]; row-sweep order keeps the inner loop
// contiguous. Each output row is written by exactly one thread, so results do
// not depend on the thread count.
template <typename T>
void gemm_nn_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] (+)= sum_k A[m,k] B[n,k]^T (B given row-major [n,k]).
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            const T* arow = a + i * k;
            const T* brow = b + j * k;
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

// C[m,n] (+)= sum_k A[k,m]^T B[k,n] (A given row-major [k,m]).
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = a[p * m + i];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: expected [M,K] x [K,N]");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> out({m, n});
    gemm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
    if (tape) {
        tape->record("matmul", {out}, [a, b, out, m, k, n]() mutable {
            a.ensure_grad();
            b.ensure_grad();
            gemm_nt_acc(out.grad(), b.data(), a.grad(), m, n, k);  // dA = G * B^T
            gemm_tn_acc(a.data(), out.grad(), b.grad(), k, m, n);  // dB = A^T * G
        });
    }
    return out;
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x, TapeT<T>* tape) {
    T s = 0;
    for (int64_t i = 0; i < x.numel(); ++i) s += x[i];
    TensorT<T> out = TensorT<T>::scalar(s);
    if (tape) {
        tape->record("sum_all", {out}, [x, out]() mutable {
            x.ensure_grad();
            const T g = out.grad()[0];
            T* gx = x.grad();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
        });
    }
    return out;
}

template <typename T>
TensorT<T> mean_scalars(const std::vector<TensorT<T>>& xs, TapeT<T>* tape) {
    if (xs.empty()) throw std::invalid_argument("mean_scalars: empty input");
    T s = 0;
    for (const auto& x : xs) {
        if (x.numel() != 1) throw std::invalid_argument("mean_scalars: inputs must be scalars");
        s += x[0];
    }
    TensorT<T> out = TensorT<T>::scalar(s / static_cast<T>(xs.size()));
    if (tape) {
        tape->record("mean_scalars", {out}, [xs, out]() mutable {
            const T g = out.grad()[0] / static_cast<T>(xs.size());
            for (auto x : xs) {
                x.ensure_grad();
                x.grad()[0] += g;
            }
        });
    }
    return out;
}

#define DFCR_INSTANTIATE(T)                                                                \
    template TensorT<T> add<T>(const TensorT<T>&, const TensorT<T>&, TapeT<T>*);           \
    template TensorT<T> mul<T>(const TensorT<T>&, const TensorT<T>&, TapeT<T>*);           \
    template TensorT<T> relu<T>(const TensorT<T>&, TapeT<T>*);                             \
    template TensorT<T> sigmoid<T>(const TensorT<T>&, TapeT<T>*);                          \
    template TensorT<T> tanh<T>(const TensorT<T>&, TapeT<T>*);                             \
    template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&, TapeT<T>*);        \
    template TensorT<T> sum_all<T>(const TensorT<T>&, TapeT<T>*);                          \
    template TensorT<T> mean_scalars<T>(const std::vector<TensorT<T>>&, TapeT<T>*);        \
    template void gemm_nn_acc<T>(const T*, const T*, T*, int64_t, int64_t, int64_t);       \
    template void gemm_nt_acc<T>(const T*, const T*, T*, int64_t, int64_t, int64_t);       \
    template void gemm_tn_acc<T>(const T*, const T*, T*, int64_t, int64_t, int64_t);

DFCR_INSTANTIATE(float)
DFCR_INSTANTIATE(double)

#undef DFCR_INSTANTIATE

}  // namespace dfcr
