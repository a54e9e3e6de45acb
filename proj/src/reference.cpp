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

#include "dfcr/reference.hpp"

#include <cmath>
#include <limits>

namespace dfcr::ref {

namespace {

template <typename T>
T read_padded(const TensorT<T>& x, int64_t n, int64_t c, int64_t h, int64_t w) {
    if (h < 0 || h >= x.dim(2) || w < 0 || w >= x.dim(3)) return T(0);
    return x.at(n, c, h, w);
}

// Plain four-corner bilinear read with zero padding. Integer coordinates fold
// into the left/upper cell, matching the primary convention.
template <typename T>
T bilinear_read(const TensorT<T>& x, int64_t n, int64_t c, T row, T col) {
    T r0f = std::floor(row), c0f = std::floor(col);
    T fr = row - r0f, fc = col - c0f;
    if (fr == T(0)) {
        r0f -= T(1);
        fr = T(1);
    }
    if (fc == T(0)) {
        c0f -= T(1);
        fc = T(1);
    }
    const int64_t r0 = static_cast<int64_t>(r0f), c0 = static_cast<int64_t>(c0f);
    return (T(1) - fr) * (T(1) - fc) * read_padded(x, n, c, r0, c0) +
           (T(1) - fr) * fc * read_padded(x, n, c, r0, c0 + 1) +
           fr * (T(1) - fc) * read_padded(x, n, c, r0 + 1, c0) +
           fr * fc * read_padded(x, n, c, r0 + 1, c0 + 1);
}

}  // namespace

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
            out.at(i, j) = acc;
        }
    return out;
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const ConvKernelT<T>& k) {
    const int64_t n_b = x.dim(0), h_in = x.dim(2), w_in = x.dim(3);
    const int64_t h_out = conv_output_extent(h_in, k.k_h(), k.stride_h, k.pad_h);
    const int64_t w_out = conv_output_extent(w_in, k.k_w(), k.stride_w, k.pad_w);
    TensorT<T> y({n_b, k.c_out(), h_out, w_out});
    for (int64_t n = 0; n < n_b; ++n)
        for (int64_t co = 0; co < k.c_out(); ++co)
            for (int64_t ho = 0; ho < h_out; ++ho)
                for (int64_t wo = 0; wo < w_out; ++wo) {
                    T acc = k.bias[co];
                    for (int64_t ci = 0; ci < k.c_in(); ++ci)
                        for (int64_t i = 0; i < k.k_h(); ++i)
                            for (int64_t j = 0; j < k.k_w(); ++j)
                                acc += k.weight.at(co, ci, i, j) *
                                       read_padded(x, n, ci, ho * k.stride_h - k.pad_h + i,
                                                   wo * k.stride_w - k.pad_w + j);
                    y.at(n, co, ho, wo) = acc;
                }
    return y;
}

template <typename T>
TensorT<T> deform_conv2d(const TensorT<T>& x, const ConvKernelT<T>& k, const OffsetFieldT<T>& off) {
    const int64_t n_b = x.dim(0), h_in = x.dim(2), w_in = x.dim(3);
    const int64_t h_out = conv_output_extent(h_in, k.k_h(), k.stride_h, k.pad_h);
    const int64_t w_out = conv_output_extent(w_in, k.k_w(), k.stride_w, k.pad_w);
    TensorT<T> y({n_b, k.c_out(), h_out, w_out});
    for (int64_t n = 0; n < n_b; ++n)
        for (int64_t co = 0; co < k.c_out(); ++co)
            for (int64_t ho = 0; ho < h_out; ++ho)
                for (int64_t wo = 0; wo < w_out; ++wo) {
                    T acc = k.bias[co];
                    for (int64_t ci = 0; ci < k.c_in(); ++ci)
                        for (int64_t i = 0; i < k.k_h(); ++i)
                            for (int64_t j = 0; j < k.k_w(); ++j) {
                                const int64_t tap = i * k.k_w() + j;
                                const T row = static_cast<T>(ho * k.stride_h - k.pad_h + i) +
                                              off.offsets.at(n, 2 * tap, ho, wo);
                                const T col = static_cast<T>(wo * k.stride_w - k.pad_w + j) +
                                              off.offsets.at(n, 2 * tap + 1, ho, wo);
                                acc += k.weight.at(co, ci, i, j) * bilinear_read(x, n, ci, row, col);
                            }
                    y.at(n, co, ho, wo) = acc;
                }
    return y;
}

template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& x, int k_h, int k_w, int s_h, int s_w) {
    const int64_t n_b = x.dim(0), c_n = x.dim(1), h_in = x.dim(2), w_in = x.dim(3);
    const int64_t h_out = conv_output_extent(h_in, k_h, s_h, 0);
    const int64_t w_out = conv_output_extent(w_in, k_w, s_w, 0);
    TensorT<T> y({n_b, c_n, h_out, w_out});
    for (int64_t n = 0; n < n_b; ++n)
        for (int64_t c = 0; c < c_n; ++c)
            for (int64_t ho = 0; ho < h_out; ++ho)
                for (int64_t wo = 0; wo < w_out; ++wo) {
                    T best = -std::numeric_limits<T>::infinity();
                    for (int64_t i = 0; i < k_h; ++i)
                        for (int64_t j = 0; j < k_w; ++j)
                            best = std::max(best, x.at(n, c, ho * s_h + i, wo * s_w + j));
                    y.at(n, c, ho, wo) = best;
                }
    return y;
}

template <typename T>
TensorT<T> adaptive_max_pool2d(const TensorT<T>& x, int64_t out_h, int64_t out_w) {
    const int64_t k_h = adaptive_kernel_size(x.dim(2), out_h);
    const int64_t k_w = adaptive_kernel_size(x.dim(3), out_w);
    return max_pool2d(x, static_cast<int>(k_h), static_cast<int>(k_w),
                      static_cast<int>(x.dim(2) / out_h), static_cast<int>(x.dim(3) / out_w));
}

template <typename T>
TensorT<T> batch_norm_train(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                            T eps) {
    const int64_t n_b = x.dim(0), c_n = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t m = n_b * h * w;
    TensorT<T> y(x.shape());
    for (int64_t c = 0; c < c_n; ++c) {
        T mean = 0;
        for (int64_t n = 0; n < n_b; ++n)
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) mean += x.at(n, c, i, j);
        mean /= static_cast<T>(m);
        T var = 0;
        for (int64_t n = 0; n < n_b; ++n)
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) {
                    const T d = x.at(n, c, i, j) - mean;
                    var += d * d;
                }
        var /= static_cast<T>(m);
        const T inv = T(1) / std::sqrt(var + eps);
        for (int64_t n = 0; n < n_b; ++n)
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j)
                    y.at(n, c, i, j) = gamma[c] * (x.at(n, c, i, j) - mean) * inv + beta[c];
    }
    return y;
}

template <typename T>
void lstm_step(const TensorT<T>& w, const TensorT<T>& u, const TensorT<T>& b,
               const std::vector<T>& x, const std::vector<T>& h_prev,
               const std::vector<T>& c_prev, std::vector<T>& h, std::vector<T>& c) {
    const int64_t hid = u.dim(1), in = w.dim(1);
    std::vector<T> z(4 * hid);
    for (int64_t r = 0; r < 4 * hid; ++r) {
        T acc = b[r];
        for (int64_t j = 0; j < in; ++j) acc += w.at(r, j) * x[j];
        for (int64_t j = 0; j < hid; ++j) acc += u.at(r, j) * h_prev[j];
        z[r] = acc;
    }
    h.resize(hid);
    c.resize(hid);
    for (int64_t j = 0; j < hid; ++j) {
        const T ig = sigmoid_scalar(z[j]);
        const T fg = sigmoid_scalar(z[hid + j]);
        const T gg = std::tanh(z[2 * hid + j]);
        const T og = sigmoid_scalar(z[3 * hid + j]);
        c[j] = fg * c_prev[j] + ig * gg;
        h[j] = og * std::tanh(c[j]);
    }
}

#define DFCR_REF_INSTANTIATE(T)                                                              \
    template TensorT<T> matmul<T>(const TensorT<T>&, const TensorT<T>&);                     \
    template TensorT<T> conv2d<T>(const TensorT<T>&, const ConvKernelT<T>&);                 \
    template TensorT<T> deform_conv2d<T>(const TensorT<T>&, const ConvKernelT<T>&,           \
                                         const OffsetFieldT<T>&);                            \
    template TensorT<T> max_pool2d<T>(const TensorT<T>&, int, int, int, int);                \
    template TensorT<T> adaptive_max_pool2d<T>(const TensorT<T>&, int64_t, int64_t);         \
    template TensorT<T> batch_norm_train<T>(const TensorT<T>&, const TensorT<T>&,            \
                                            const TensorT<T>&, T);                           \
    template void lstm_step<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,      \
                               const std::vector<T>&, const std::vector<T>&,                 \
                               const std::vector<T>&, std::vector<T>&, std::vector<T>&);

DFCR_REF_INSTANTIATE(float)
DFCR_REF_INSTANTIATE(double)

#undef DFCR_REF_INSTANTIATE

}  // namespace dfcr::ref
