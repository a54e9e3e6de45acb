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
//
// OpenMP kernels. Every parallel loop partitions the tensor being written, and
// accumulation order within a partition is fixed, so results are bitwise
// independent of the thread count. Serial counterparts live in reference.cpp.

#include "dfcr/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dfcr {

namespace {

// Valid output range [lo, hi) along one axis for kernel column j: the set of
// out with 0 <= out*stride - pad + j < in.
inline void tap_bounds(int64_t out_n, int64_t in_n, int64_t stride, int64_t pad, int64_t j,
                       int64_t& lo, int64_t& hi) {
    const int64_t num = pad - j;
    lo = num <= 0 ? 0 : (num + stride - 1) / stride;
    const int64_t last = in_n - 1 + pad - j;
    hi = last < 0 ? 0 : std::min(out_n, last / stride + 1);
    lo = std::min(lo, hi);
}

template <typename T>
void check_conv_input(const TensorT<T>& x, const ConvKernelT<T>& k, const char* op) {
    if (x.rank() != 4) throw std::invalid_argument(std::string(op) + ": input must be 4D");
    if (x.dim(1) != k.c_in())
        throw std::invalid_argument(std::string(op) + ": channel mismatch (input " +
                                    std::to_string(x.dim(1)) + ", kernel expects " +
                                    std::to_string(k.c_in()) + ")");
}

template <typename T>
struct Cell {
    int64_t r0, c0;
    T fr, fc;
    T w00, w01, w10, w11;
};

template <typename T>
inline Cell<T> make_cell(T row, T col) {
    Cell<T> cl;
    bilinear_cell(row, cl.r0, cl.fr);
    bilinear_cell(col, cl.c0, cl.fc);
    cl.w00 = (T(1) - cl.fr) * (T(1) - cl.fc);
    cl.w01 = (T(1) - cl.fr) * cl.fc;
    cl.w10 = cl.fr * (T(1) - cl.fc);
    cl.w11 = cl.fr * cl.fc;
    return cl;
}

template <typename T>
inline T cell_read(const T* plane, int64_t h, int64_t w, const Cell<T>& cl) {
    const bool r0v = cl.r0 >= 0 && cl.r0 < h, r1v = cl.r0 + 1 >= 0 && cl.r0 + 1 < h;
    const bool c0v = cl.c0 >= 0 && cl.c0 < w, c1v = cl.c0 + 1 >= 0 && cl.c0 + 1 < w;
    T v = 0;
    if (r0v && c0v) v += cl.w00 * plane[cl.r0 * w + cl.c0];
    if (r0v && c1v) v += cl.w01 * plane[cl.r0 * w + cl.c0 + 1];
    if (r1v && c0v) v += cl.w10 * plane[(cl.r0 + 1) * w + cl.c0];
    if (r1v && c1v) v += cl.w11 * plane[(cl.r0 + 1) * w + cl.c0 + 1];
    return v;
}

// Analytic d(value)/d(row), d(value)/d(col) for the cell, zero padding outside.
template <typename T>
inline void cell_coord_grad(const T* plane, int64_t h, int64_t w, const Cell<T>& cl, T& d_row,
                            T& d_col) {
    const bool r0v = cl.r0 >= 0 && cl.r0 < h, r1v = cl.r0 + 1 >= 0 && cl.r0 + 1 < h;
    const bool c0v = cl.c0 >= 0 && cl.c0 < w, c1v = cl.c0 + 1 >= 0 && cl.c0 + 1 < w;
    const T x00 = (r0v && c0v) ? plane[cl.r0 * w + cl.c0] : T(0);
    const T x01 = (r0v && c1v) ? plane[cl.r0 * w + cl.c0 + 1] : T(0);
    const T x10 = (r1v && c0v) ? plane[(cl.r0 + 1) * w + cl.c0] : T(0);
    const T x11 = (r1v && c1v) ? plane[(cl.r0 + 1) * w + cl.c0 + 1] : T(0);
    d_row = (x10 - x00) * (T(1) - cl.fc) + (x11 - x01) * cl.fc;
    d_col = (x01 - x00) * (T(1) - cl.fr) + (x11 - x10) * cl.fr;
}

template <typename T>
inline void cell_scatter(T* gplane, int64_t h, int64_t w, const Cell<T>& cl, T g) {
    const bool r0v = cl.r0 >= 0 && cl.r0 < h, r1v = cl.r0 + 1 >= 0 && cl.r0 + 1 < h;
    const bool c0v = cl.c0 >= 0 && cl.c0 < w, c1v = cl.c0 + 1 >= 0 && cl.c0 + 1 < w;
    if (r0v && c0v) gplane[cl.r0 * w + cl.c0] += cl.w00 * g;
    if (r0v && c1v) gplane[cl.r0 * w + cl.c0 + 1] += cl.w01 * g;
    if (r1v && c0v) gplane[(cl.r0 + 1) * w + cl.c0] += cl.w10 * g;
    if (r1v && c1v) gplane[(cl.r0 + 1) * w + cl.c0 + 1] += cl.w11 * g;
}

}  // namespace

int64_t conv_output_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    if (stride < 1 || pad < 0 || k < 1) throw std::invalid_argument("conv: bad geometry");
    const int64_t span = in + 2 * pad - k;
    if (span < 0 || span % stride != 0)
        throw std::invalid_argument("conv: geometry mismatch (extent " + std::to_string(in) +
                                    ", kernel " + std::to_string(k) + ", stride " +
                                    std::to_string(stride) + ", pad " + std::to_string(pad) + ")");
    return span / stride + 1;
}

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
static void conv2d_forward_kernel(const TensorT<T>& x, const ConvKernelT<T>& k, TensorT<T>& y) {
    const int64_t n_b = x.dim(0), c_in = k.c_in(), h_in = x.dim(2), w_in = x.dim(3);
    const int64_t c_out = k.c_out(), h_out = y.dim(2), w_out = y.dim(3);
    const int64_t k_h = k.k_h(), k_w = k.k_w();
    const T* xp = x.data();
    const T* wp = k.weight.data();
    const T* bp = k.bias.data();
    T* yp = y.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < n_b; ++n)
        for (int64_t co = 0; co < c_out; ++co) {
            T* yplane = yp + (n * c_out + co) * h_out * w_out;
            for (int64_t ho = 0; ho < h_out; ++ho) {
                T* yrow = yplane + ho * w_out;
                std::fill(yrow, yrow + w_out, bp[co]);
                for (int64_t ci = 0; ci < c_in; ++ci) {
                    const T* xplane = xp + (n * c_in + ci) * h_in * w_in;
                    const T* wtap = wp + (co * c_in + ci) * k_h * k_w;
                    for (int64_t i = 0; i < k_h; ++i) {
                        const int64_t hi = ho * k.stride_h - k.pad_h + i;
                        if (hi < 0 || hi >= h_in) continue;
                        const T* xrow = xplane + hi * w_in;
                        for (int64_t j = 0; j < k_w; ++j) {
                            const T wv = wtap[i * k_w + j];
                            int64_t lo, hi_w;
                            tap_bounds(w_out, w_in, k.stride_w, k.pad_w, j, lo, hi_w);
                            const int64_t base = j - k.pad_w;
                            if (k.stride_w == 1) {
                                const T* xs = xrow + base;
                                for (int64_t wo = lo; wo < hi_w; ++wo) yrow[wo] += wv * xs[wo];
                            } else {
                                for (int64_t wo = lo; wo < hi_w; ++wo)
                                    yrow[wo] += wv * xrow[wo * k.stride_w + base];
                            }
                        }
                    }
                }
            }
        }
}

template <typename T>
static void conv2d_backward_kernel(TensorT<T> x, ConvKernelT<T> k, TensorT<T> y) {
    const int64_t n_b = x.dim(0), c_in = k.c_in(), h_in = x.dim(2), w_in = x.dim(3);
    const int64_t c_out = k.c_out(), h_out = y.dim(2), w_out = y.dim(3);
    const int64_t k_h = k.k_h(), k_w = k.k_w();
    x.ensure_grad();
    k.weight.ensure_grad();
    k.bias.ensure_grad();
    const T* g = y.grad();
    const T* xp = x.data();
    const T* wp = k.weight.data();
    T* gx = x.grad();
    T* gw = k.weight.grad();
    T* gb = k.bias.grad();

// bias and weight gradients: one thread owns each output channel.
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < c_out; ++co) {
        T bacc = 0;
        for (int64_t n = 0; n < n_b; ++n) {
            const T* gplane = g + (n * c_out + co) * h_out * w_out;
            for (int64_t q = 0; q < h_out * w_out; ++q) bacc += gplane[q];
            for (int64_t ci = 0; ci < c_in; ++ci) {
                const T* xplane = xp + (n * c_in + ci) * h_in * w_in;
                T* gwtap = gw + (co * c_in + ci) * k_h * k_w;
                for (int64_t i = 0; i < k_h; ++i)
                    for (int64_t j = 0; j < k_w; ++j) {
                        T acc = 0;
                        for (int64_t ho = 0; ho < h_out; ++ho) {
                            const int64_t hi = ho * k.stride_h - k.pad_h + i;
                            if (hi < 0 || hi >= h_in) continue;
                            const T* grow = gplane + ho * w_out;
                            const T* xrow = xplane + hi * w_in;
                            int64_t lo, hi_w;
                            tap_bounds(w_out, w_in, k.stride_w, k.pad_w, j, lo, hi_w);
                            const int64_t base = j - k.pad_w;
                            for (int64_t wo = lo; wo < hi_w; ++wo)
                                acc += grow[wo] * xrow[wo * k.stride_w + base];
                        }
                        gwtap[i * k_w + j] += acc;
                    }
            }
        }
        gb[co] += bacc;
    }

// input gradient: one thread owns each (item, input-channel) plane.
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < n_b; ++n)
        for (int64_t ci = 0; ci < c_in; ++ci) {
            T* gxplane = gx + (n * c_in + ci) * h_in * w_in;
            for (int64_t co = 0; co < c_out; ++co) {
                const T* gplane = g + (n * c_out + co) * h_out * w_out;
                const T* wtap = wp + (co * c_in + ci) * k_h * k_w;
                for (int64_t ho = 0; ho < h_out; ++ho) {
                    const T* grow = gplane + ho * w_out;
                    for (int64_t i = 0; i < k_h; ++i) {
                        const int64_t hi = ho * k.stride_h - k.pad_h + i;
                        if (hi < 0 || hi >= h_in) continue;
                        T* gxrow = gxplane + hi * w_in;
                        for (int64_t j = 0; j < k_w; ++j) {
                            const T wv = wtap[i * k_w + j];
                            int64_t lo, hi_w;
                            tap_bounds(w_out, w_in, k.stride_w, k.pad_w, j, lo, hi_w);
                            const int64_t base = j - k.pad_w;
                            if (k.stride_w == 1) {
                                T* gxs = gxrow + base;
                                for (int64_t wo = lo; wo < hi_w; ++wo) gxs[wo] += wv * grow[wo];
                            } else {
                                for (int64_t wo = lo; wo < hi_w; ++wo)
                                    gxrow[wo * k.stride_w + base] += wv * grow[wo];
                            }
                        }
                    }
                }
            }
        }
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const ConvKernelT<T>& k, TapeT<T>* tape) {
    check_conv_input(x, k, "conv2d");
    const int64_t h_out = conv_output_extent(x.dim(2), k.k_h(), k.stride_h, k.pad_h);
    const int64_t w_out = conv_output_extent(x.dim(3), k.k_w(), k.stride_w, k.pad_w);
    TensorT<T> y({x.dim(0), k.c_out(), h_out, w_out});
    conv2d_forward_kernel(x, k, y);
    if (tape)
        tape->record("conv2d", {y}, [x, k, y]() { conv2d_backward_kernel(x, k, y); });
    return y;
}

// ---------------------------------------------------------------------------
// bilinear_sample

template <typename T>
TensorT<T> bilinear_sample(const TensorT<T>& x, const TensorT<T>& p, TapeT<T>* tape) {
    if (x.rank() != 3) throw std::invalid_argument("bilinear_sample: input must be [C,H,W]");
    if (p.numel() != 2) throw std::invalid_argument("bilinear_sample: point must hold (row, col)");
    const int64_t c_n = x.dim(0), h = x.dim(1), w = x.dim(2);
    const Cell<T> cl = make_cell(p[0], p[1]);
    TensorT<T> out({c_n});
    for (int64_t c = 0; c < c_n; ++c) out[c] = cell_read(x.data() + c * h * w, h, w, cl);
    if (tape) {
        tape->record("bilinear_sample", {out}, [x, p, out, cl, c_n, h, w]() mutable {
            x.ensure_grad();
            p.ensure_grad();
            const T* g = out.grad();
            T gr = 0, gc = 0;
            for (int64_t c = 0; c < c_n; ++c) {
                cell_scatter(x.grad() + c * h * w, h, w, cl, g[c]);
                T dr, dc;
                cell_coord_grad(x.data() + c * h * w, h, w, cl, dr, dc);
                gr += g[c] * dr;
                gc += g[c] * dc;
            }
            p.grad()[0] += gr;
            p.grad()[1] += gc;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// deform_conv2d

template <typename T>
static void check_offsets(const ConvKernelT<T>& k, const OffsetFieldT<T>& off, int64_t n_b,
                          int64_t h_out, int64_t w_out) {
    const auto& s = off.offsets.shape();
    if (s.size() != 4 || s[0] != n_b || s[1] != 2 * k.taps() || s[2] != h_out || s[3] != w_out)
        throw std::invalid_argument("deform_conv2d: offset shape mismatch");
}

// Sampled values per output location, laid out [N, Ho, Wo, C_in*taps] so the
// per-channel dot products in forward/backward stay contiguous.
template <typename T>
static void deform_sample_values(const TensorT<T>& x, const ConvKernelT<T>& k,
                                 const OffsetFieldT<T>& off, int64_t h_out, int64_t w_out,
                                 TensorT<T>& values) {
    const int64_t n_b = x.dim(0), c_in = k.c_in(), h_in = x.dim(2), w_in = x.dim(3);
    const int64_t taps = k.taps(), k_w = k.k_w();
    const T* xp = x.data();
    const T* op = off.offsets.data();
    T* vp = values.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < n_b; ++n)
        for (int64_t ho = 0; ho < h_out; ++ho) {
            const T* onh = op + n * 2 * taps * h_out * w_out;
            for (int64_t wo = 0; wo < w_out; ++wo) {
                T* v = vp + ((n * h_out + ho) * w_out + wo) * c_in * taps;
                for (int64_t t = 0; t < taps; ++t) {
                    const int64_t i = t / k_w, j = t % k_w;
                    const T row = static_cast<T>(ho * k.stride_h - k.pad_h + i) +
                                  onh[(2 * t * h_out + ho) * w_out + wo];
                    const T col = static_cast<T>(wo * k.stride_w - k.pad_w + j) +
                                  onh[((2 * t + 1) * h_out + ho) * w_out + wo];
                    const Cell<T> cl = make_cell(row, col);
                    for (int64_t ci = 0; ci < c_in; ++ci)
                        v[ci * taps + t] = cell_read(xp + (n * c_in + ci) * h_in * w_in, h_in, w_in, cl);
                }
            }
        }
}

template <typename T>
static void deform_forward_kernel(const ConvKernelT<T>& k, const TensorT<T>& values, TensorT<T>& y) {
    const int64_t n_b = y.dim(0), c_out = k.c_out(), h_out = y.dim(2), w_out = y.dim(3);
    const int64_t len = k.c_in() * k.taps();
    const T* wp = k.weight.data();
    const T* bp = k.bias.data();
    const T* vp = values.data();
    T* yp = y.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < n_b; ++n)
        for (int64_t co = 0; co < c_out; ++co) {
            const T* wrow = wp + co * len;
            T* yplane = yp + (n * c_out + co) * h_out * w_out;
            for (int64_t q = 0; q < h_out * w_out; ++q) {
                const T* v = vp + (n * h_out * w_out + q) * len;
                T acc = bp[co];
                for (int64_t e = 0; e < len; ++e) acc += wrow[e] * v[e];
                yplane[q] = acc;
            }
        }
}

template <typename T>
static void deform_backward_kernel(TensorT<T> x, ConvKernelT<T> k, OffsetFieldT<T> off,
                                   TensorT<T> values, TensorT<T> y) {
    const int64_t n_b = x.dim(0), c_in = k.c_in(), h_in = x.dim(2), w_in = x.dim(3);
    const int64_t c_out = k.c_out(), h_out = y.dim(2), w_out = y.dim(3);
    const int64_t taps = k.taps(), k_w = k.k_w(), len = c_in * taps;
    x.ensure_grad();
    k.weight.ensure_grad();
    k.bias.ensure_grad();
    off.offsets.ensure_grad();
    const T* g = y.grad();
    const T* xp = x.data();
    const T* wp = k.weight.data();
    const T* vp = values.data();
    const T* op = off.offsets.data();

#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < c_out; ++co) {
        T* gwrow = k.weight.grad() + co * len;
        T bacc = 0;
        for (int64_t n = 0; n < n_b; ++n) {
            const T* gplane = g + (n * c_out + co) * h_out * w_out;
            for (int64_t q = 0; q < h_out * w_out; ++q) {
                const T gv = gplane[q];
                bacc += gv;
                const T* v = vp + (n * h_out * w_out + q) * len;
                for (int64_t e = 0; e < len; ++e) gwrow[e] += gv * v[e];
            }
        }
        k.bias.grad()[co] += bacc;
    }

// input and offset gradients: one thread owns each batch item.
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < n_b; ++n) {
        std::vector<T> gw_loc(len);
        T* gx = x.grad();
        T* go = off.offsets.grad() + n * 2 * taps * h_out * w_out;
        const T* onh = op + n * 2 * taps * h_out * w_out;
        for (int64_t ho = 0; ho < h_out; ++ho)
            for (int64_t wo = 0; wo < w_out; ++wo) {
                // upstream into each sampled value: sum_co g * w
                std::fill(gw_loc.begin(), gw_loc.end(), T(0));
                for (int64_t co = 0; co < c_out; ++co) {
                    const T gv = g[((n * c_out + co) * h_out + ho) * w_out + wo];
                    const T* wrow = wp + co * len;
                    for (int64_t e = 0; e < len; ++e) gw_loc[e] += gv * wrow[e];
                }
                for (int64_t t = 0; t < taps; ++t) {
                    const int64_t i = t / k_w, j = t % k_w;
                    const T row = static_cast<T>(ho * k.stride_h - k.pad_h + i) +
                                  onh[(2 * t * h_out + ho) * w_out + wo];
                    const T col = static_cast<T>(wo * k.stride_w - k.pad_w + j) +
                                  onh[((2 * t + 1) * h_out + ho) * w_out + wo];
                    const Cell<T> cl = make_cell(row, col);
                    T grow_acc = 0, gcol_acc = 0;
                    for (int64_t ci = 0; ci < c_in; ++ci) {
                        const T s = gw_loc[ci * taps + t];
                        const T* xplane = xp + (n * c_in + ci) * h_in * w_in;
                        cell_scatter(gx + (n * c_in + ci) * h_in * w_in, h_in, w_in, cl, s);
                        T dr, dc;
                        cell_coord_grad(xplane, h_in, w_in, cl, dr, dc);
                        grow_acc += s * dr;
                        gcol_acc += s * dc;
                    }
                    go[(2 * t * h_out + ho) * w_out + wo] += grow_acc;
                    go[((2 * t + 1) * h_out + ho) * w_out + wo] += gcol_acc;
                }
            }
    }
}

template <typename T>
TensorT<T> deform_conv2d(const TensorT<T>& x, const ConvKernelT<T>& k, const OffsetFieldT<T>& off,
                         TapeT<T>* tape) {
    check_conv_input(x, k, "deform_conv2d");
    const int64_t h_out = conv_output_extent(x.dim(2), k.k_h(), k.stride_h, k.pad_h);
    const int64_t w_out = conv_output_extent(x.dim(3), k.k_w(), k.stride_w, k.pad_w);
    check_offsets(k, off, x.dim(0), h_out, w_out);
    TensorT<T> values({x.dim(0), h_out, w_out, k.c_in() * k.taps()});
    deform_sample_values(x, k, off, h_out, w_out, values);
    TensorT<T> y({x.dim(0), k.c_out(), h_out, w_out});
    deform_forward_kernel(k, values, y);
    if (tape)
        tape->record("deform_conv2d", {y},
                     [x, k, off, values, y]() { deform_backward_kernel(x, k, off, values, y); });
    return y;
}

template <typename T>
ConvKernelT<T> make_offset_branch(const ConvKernelT<T>& k) {
    ConvKernelT<T> branch = ConvKernelT<T>::make(2 * k.taps(), k.c_in(), k.k_h(), k.k_w());
    branch.stride_h = k.stride_h;
    branch.stride_w = k.stride_w;
    branch.pad_h = k.pad_h;
    branch.pad_w = k.pad_w;
    return branch;  // zero weights and bias: offsets start at the rigid grid
}

// ---------------------------------------------------------------------------
// pooling

template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& x, int k_h, int k_w, int s_h, int s_w, TapeT<T>* tape,
                      PoolIndices* indices) {
    if (x.rank() != 4) throw std::invalid_argument("max_pool2d: input must be 4D");
    const int64_t n_b = x.dim(0), c_n = x.dim(1), h_in = x.dim(2), w_in = x.dim(3);
    const int64_t h_out = conv_output_extent(h_in, k_h, s_h, 0);
    const int64_t w_out = conv_output_extent(w_in, k_w, s_w, 0);
    TensorT<T> y({n_b, c_n, h_out, w_out});
    auto argmax = std::make_shared<std::vector<int64_t>>(n_b * c_n * h_out * w_out);
    const T* xp = x.data();
    T* yp = y.data();
    int64_t* am = argmax->data();
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < n_b; ++n)
        for (int64_t c = 0; c < c_n; ++c) {
            const T* xplane = xp + (n * c_n + c) * h_in * w_in;
            const int64_t obase = (n * c_n + c) * h_out * w_out;
            for (int64_t ho = 0; ho < h_out; ++ho)
                for (int64_t wo = 0; wo < w_out; ++wo) {
                    T best = -std::numeric_limits<T>::infinity();
                    int64_t best_ix = 0;
                    for (int64_t i = 0; i < k_h; ++i) {
                        const int64_t hi = ho * s_h + i;
                        for (int64_t j = 0; j < k_w; ++j) {
                            const int64_t wi = wo * s_w + j;
                            const T v = xplane[hi * w_in + wi];
                            if (v > best) {  // strict: first hit keeps ties
                                best = v;
                                best_ix = hi * w_in + wi;
                            }
                        }
                    }
                    yp[obase + ho * w_out + wo] = best;
                    am[obase + ho * w_out + wo] = best_ix;
                }
        }
    if (indices) indices->argmax = *argmax;
    if (tape) {
        tape->record("max_pool2d", {y}, [x, y, argmax, c_n, h_in, w_in, h_out, w_out]() mutable {
            x.ensure_grad();
            const T* g = y.grad();
            T* gx = x.grad();
            const int64_t planes = x.dim(0) * c_n;
#pragma omp parallel for schedule(static)
            for (int64_t pc = 0; pc < planes; ++pc) {
                T* gxplane = gx + pc * h_in * w_in;
                const int64_t obase = pc * h_out * w_out;
                for (int64_t q = 0; q < h_out * w_out; ++q)
                    gxplane[(*argmax)[obase + q]] += g[obase + q];
            }
        });
    }
    return y;
}

int64_t adaptive_kernel_size(int64_t in_extent, int64_t out_extent) {
    if (in_extent < 1) throw std::invalid_argument("adaptive_kernel_size: input extent must be >= 1");
    if (out_extent < 1 || out_extent > in_extent)
        throw std::invalid_argument("adaptive_kernel_size: need 1 <= out <= in, got out=" +
                                    std::to_string(out_extent) + " in=" + std::to_string(in_extent));
    return in_extent - (out_extent - 1) * (in_extent / out_extent);
}

template <typename T>
TensorT<T> adaptive_max_pool2d(const TensorT<T>& x, int64_t out_h, int64_t out_w, TapeT<T>* tape,
                               PoolIndices* indices) {
    if (x.rank() != 4) throw std::invalid_argument("adaptive_max_pool2d: input must be 4D");
    const int64_t k_h = adaptive_kernel_size(x.dim(2), out_h);
    const int64_t k_w = adaptive_kernel_size(x.dim(3), out_w);
    return max_pool2d(x, static_cast<int>(k_h), static_cast<int>(k_w),
                      static_cast<int>(x.dim(2) / out_h), static_cast<int>(x.dim(3) / out_w), tape,
                      indices);
}

// ---------------------------------------------------------------------------
// batch norm

template <typename T>
TensorT<T> batch_norm(const TensorT<T>& x, BatchNormT<T>& bn, BnMode mode, TapeT<T>* tape) {
    if (x.rank() != 4) throw std::invalid_argument("batch_norm: input must be 4D");
    const int64_t n_b = x.dim(0), c_n = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c_n != bn.gamma.numel()) throw std::invalid_argument("batch_norm: channel mismatch");
    const int64_t m = n_b * h * w;
    if (mode == BnMode::kTrain && m == 0)
        throw std::invalid_argument("batch_norm: zero batch in training mode");

    TensorT<T> y(x.shape());
    auto mean = std::make_shared<std::vector<T>>(c_n);
    auto inv = std::make_shared<std::vector<T>>(c_n);
    const T* xp = x.data();
    T* yp = y.data();
    const int64_t plane = h * w;

    if (mode == BnMode::kTrain) {
#pragma omp parallel for schedule(static)
        for (int64_t c = 0; c < c_n; ++c) {
            T mu = 0;
            for (int64_t n = 0; n < n_b; ++n) {
                const T* xq = xp + (n * c_n + c) * plane;
                for (int64_t q = 0; q < plane; ++q) mu += xq[q];
            }
            mu /= static_cast<T>(m);
            T var = 0;
            for (int64_t n = 0; n < n_b; ++n) {
                const T* xq = xp + (n * c_n + c) * plane;
                for (int64_t q = 0; q < plane; ++q) {
                    const T d = xq[q] - mu;
                    var += d * d;
                }
            }
            var /= static_cast<T>(m);
            const T iv = T(1) / std::sqrt(var + bn.eps);
            (*mean)[c] = mu;
            (*inv)[c] = iv;
            const T gm = bn.gamma[c], bt = bn.beta[c];
            for (int64_t n = 0; n < n_b; ++n) {
                const T* xq = xp + (n * c_n + c) * plane;
                T* yq = yp + (n * c_n + c) * plane;
                for (int64_t q = 0; q < plane; ++q) yq[q] = gm * (xq[q] - mu) * iv + bt;
            }
            // running stats track the unbiased batch variance
            const T var_run = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
            bn.running_mean[c] = (T(1) - bn.momentum) * bn.running_mean[c] + bn.momentum * mu;
            bn.running_var[c] = (T(1) - bn.momentum) * bn.running_var[c] + bn.momentum * var_run;
        }
    } else {
#pragma omp parallel for schedule(static)
        for (int64_t c = 0; c < c_n; ++c) {
            const T mu = bn.running_mean[c];
            const T iv = T(1) / std::sqrt(bn.running_var[c] + bn.eps);
            (*mean)[c] = mu;
            (*inv)[c] = iv;
            const T gm = bn.gamma[c], bt = bn.beta[c];
            for (int64_t n = 0; n < n_b; ++n) {
                const T* xq = xp + (n * c_n + c) * plane;
                T* yq = yp + (n * c_n + c) * plane;
                for (int64_t q = 0; q < plane; ++q) yq[q] = gm * (xq[q] - mu) * iv + bt;
            }
        }
    }

    if (tape) {
        TensorT<T> gamma = bn.gamma, beta = bn.beta;
        const bool train = mode == BnMode::kTrain;
        tape->record("batch_norm", {y}, [x, gamma, beta, y, mean, inv, train]() mutable {
            const int64_t n_b = x.dim(0), c_n = x.dim(1), plane = x.dim(2) * x.dim(3);
            const int64_t m = n_b * plane;
            x.ensure_grad();
            gamma.ensure_grad();
            beta.ensure_grad();
            const T* g = y.grad();
            const T* xp = x.data();
            const T* gmp = gamma.data();
            const T* mu_c = mean->data();
            const T* iv_c = inv->data();
            T* gx = x.grad();
            T* g_gamma = gamma.grad();
            T* g_beta = beta.grad();
#pragma omp parallel for schedule(static)
            for (int64_t c = 0; c < c_n; ++c) {
                const T mu = mu_c[c], iv = iv_c[c], gm = gmp[c];
                T sum_g = 0, sum_gx = 0;
                for (int64_t n = 0; n < n_b; ++n) {
                    const T* gq = g + (n * c_n + c) * plane;
                    const T* xq = xp + (n * c_n + c) * plane;
                    for (int64_t q = 0; q < plane; ++q) {
                        sum_g += gq[q];
                        sum_gx += gq[q] * (xq[q] - mu) * iv;
                    }
                }
                g_gamma[c] += sum_gx;
                g_beta[c] += sum_g;
                if (train) {
                    const T mg = sum_g / static_cast<T>(m), mgx = sum_gx / static_cast<T>(m);
                    for (int64_t n = 0; n < n_b; ++n) {
                        const T* gq = g + (n * c_n + c) * plane;
                        const T* xq = xp + (n * c_n + c) * plane;
                        T* gxq = gx + (n * c_n + c) * plane;
                        for (int64_t q = 0; q < plane; ++q)
                            gxq[q] += gm * iv * (gq[q] - mg - (xq[q] - mu) * iv * mgx);
                    }
                } else {
                    for (int64_t n = 0; n < n_b; ++n) {
                        const T* gq = g + (n * c_n + c) * plane;
                        T* gxq = gx + (n * c_n + c) * plane;
                        for (int64_t q = 0; q < plane; ++q) gxq[q] += gm * iv * gq[q];
                    }
                }
            }
        });
    }
    return y;
}

template <typename T>
TensorT<T> residual_block_forward(const TensorT<T>& x, ResidualBlockT<T>& blk, BnMode mode,
                                  TapeT<T>* tape) {
    if (x.rank() != 4 || x.dim(1) != blk.conv1.c_in())
        throw std::invalid_argument("residual_block: channel mismatch");
    TensorT<T> h = conv2d(x, blk.conv1, tape);
    h = batch_norm(h, blk.bn1, mode, tape);
    h = relu(h, tape);
    h = conv2d(h, blk.conv2, tape);
    h = batch_norm(h, blk.bn2, mode, tape);
    h = add(h, x, tape);
    return relu(h, tape);
}

// ---------------------------------------------------------------------------
// sampling-location traces

template <typename T>
std::vector<SamplePoint> trace_sampling_locations(const std::vector<TraceLayerT<T>>& stack,
                                                  int layer, int64_t c, int64_t h, int64_t w,
                                                  int64_t item) {
    using Kind = typename TraceLayerT<T>::Kind;
    if (layer < 0 || layer >= static_cast<int>(stack.size()))
        throw std::invalid_argument("trace: layer out of range");
    const TraceLayerT<T>& top = stack[layer];
    if (c < 0 || c >= top.channels || h < 0 || h >= top.out_h || w < 0 || w >= top.out_w)
        throw std::invalid_argument("trace: unit out of range");

    std::vector<SamplePoint> pts{{layer, -1, static_cast<double>(h), static_cast<double>(w)}};
    int conv_levels = 0;
    for (int li = layer; li >= 0; --li) {
        const TraceLayerT<T>& lyr = stack[li];
        if (lyr.kind == Kind::kPool) {
            if (conv_levels == 0) {
                // still a single integral point: follow the realized argmax
                const int64_t ho = static_cast<int64_t>(pts[0].row);
                const int64_t wo = static_cast<int64_t>(pts[0].col);
                const int64_t flat =
                    lyr.argmax[((item * lyr.channels + c) * lyr.out_h + ho) * lyr.out_w + wo];
                pts[0].row = static_cast<double>(flat / lyr.in_w);
                pts[0].col = static_cast<double>(flat % lyr.in_w);
            } else {
                for (SamplePoint& p : pts) {
                    p.row = p.row * lyr.s_h + (lyr.k_h - 1) / 2.0;
                    p.col = p.col * lyr.s_w + (lyr.k_w - 1) / 2.0;
                }
            }
            continue;
        }
        if (conv_levels == 2) break;
        ++conv_levels;
        std::vector<SamplePoint> next;
        next.reserve(pts.size() * lyr.k_h * lyr.k_w);
        for (const SamplePoint& p : pts) {
            const int64_t ho = std::clamp<int64_t>(std::llround(p.row), 0, lyr.out_h - 1);
            const int64_t wo = std::clamp<int64_t>(std::llround(p.col), 0, lyr.out_w - 1);
            for (int i = 0; i < lyr.k_h; ++i)
                for (int j = 0; j < lyr.k_w; ++j) {
                    SamplePoint q;
                    q.layer = li;
                    q.tap = i * lyr.k_w + j;
                    q.row = p.row * lyr.s_h - lyr.p_h + i;
                    q.col = p.col * lyr.s_w - lyr.p_w + j;
                    if (lyr.kind == Kind::kDeformConv) {
                        const int64_t t = q.tap;
                        q.row += static_cast<double>(
                            lyr.offsets.at(item, 2 * t, ho, wo));
                        q.col += static_cast<double>(
                            lyr.offsets.at(item, 2 * t + 1, ho, wo));
                    }
                    next.push_back(q);
                }
        }
        pts = std::move(next);
    }
    return pts;
}

// ---------------------------------------------------------------------------

#define DFCR_NN_INSTANTIATE(T)                                                                    \
    template TensorT<T> conv2d<T>(const TensorT<T>&, const ConvKernelT<T>&, TapeT<T>*);           \
    template TensorT<T> bilinear_sample<T>(const TensorT<T>&, const TensorT<T>&, TapeT<T>*);      \
    template TensorT<T> deform_conv2d<T>(const TensorT<T>&, const ConvKernelT<T>&,                \
                                         const OffsetFieldT<T>&, TapeT<T>*);                      \
    template ConvKernelT<T> make_offset_branch<T>(const ConvKernelT<T>&);                         \
    template TensorT<T> max_pool2d<T>(const TensorT<T>&, int, int, int, int, TapeT<T>*,           \
                                      PoolIndices*);                                              \
    template TensorT<T> adaptive_max_pool2d<T>(const TensorT<T>&, int64_t, int64_t, TapeT<T>*,    \
                                               PoolIndices*);                                     \
    template TensorT<T> batch_norm<T>(const TensorT<T>&, BatchNormT<T>&, BnMode, TapeT<T>*);      \
    template TensorT<T> residual_block_forward<T>(const TensorT<T>&, ResidualBlockT<T>&, BnMode,  \
                                                  TapeT<T>*);                                     \
    template std::vector<SamplePoint> trace_sampling_locations<T>(                                \
        const std::vector<TraceLayerT<T>>&, int, int64_t, int64_t, int64_t, int64_t);

DFCR_NN_INSTANTIATE(float)
DFCR_NN_INSTANTIATE(double)

#undef DFCR_NN_INSTANTIATE

}  // namespace dfcr
