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
#include <vector>

#include "dfcr/tensor.hpp"

namespace dfcr {

template <typename T>
struct ConvKernelT {
    TensorT<T> weight;  // [C_out, C_in, kH, kW]
    TensorT<T> bias;    // [C_out]
    int stride_h = 1, stride_w = 1;
    int pad_h = 0, pad_w = 0;

    static ConvKernelT make(int64_t c_out, int64_t c_in, int64_t k_h, int64_t k_w, int stride = 1,
                            int pad = 0) {
        if (k_h < 1 || k_w < 1) throw std::invalid_argument("conv kernel: extent must be >= 1");
        ConvKernelT k;
        k.weight = TensorT<T>({c_out, c_in, k_h, k_w});
        k.bias = TensorT<T>({c_out});
        k.stride_h = k.stride_w = stride;
        k.pad_h = k.pad_w = pad;
        return k;
    }

    int64_t c_out() const { return weight.dim(0); }
    int64_t c_in() const { return weight.dim(1); }
    int64_t k_h() const { return weight.dim(2); }
    int64_t k_w() const { return weight.dim(3); }
    int64_t taps() const { return k_h() * k_w(); }
};

/// Per-tap 2D displacements for deformable sampling, channel-interleaved as
/// (d_row, d_col) per tap: offsets[n, 2*tap + {0,1}, h_out, w_out], in
/// fractional input pixels. One offset set is shared across input channels.
template <typename T>
struct OffsetFieldT {
    TensorT<T> offsets;  // [N, 2*kH*kW, H_out, W_out]
};

enum class BnMode { kTrain, kEval };

template <typename T>
struct BatchNormT {
    TensorT<T> gamma, beta;              // [C], learned
    TensorT<T> running_mean, running_var;  // [C], updated in train mode
    T eps = T(1e-5);
    T momentum = T(0.1);

    static BatchNormT make(int64_t channels) {
        BatchNormT bn;
        bn.gamma = TensorT<T>::ones({channels});
        bn.beta = TensorT<T>({channels});
        bn.running_mean = TensorT<T>({channels});
        bn.running_var = TensorT<T>::ones({channels});
        return bn;
    }
};

/// Two 3x3 same-channel convolutions with batch norm and a skip connection.
template <typename T>
struct ResidualBlockT {
    ConvKernelT<T> conv1, conv2;
    BatchNormT<T> bn1, bn2;

    static ResidualBlockT make(int64_t channels) {
        ResidualBlockT blk;
        blk.conv1 = ConvKernelT<T>::make(channels, channels, 3, 3, 1, 1);
        blk.conv2 = ConvKernelT<T>::make(channels, channels, 3, 3, 1, 1);
        blk.bn1 = BatchNormT<T>::make(channels);
        blk.bn2 = BatchNormT<T>::make(channels);
        return blk;
    }
};

/// Output extent of a convolution/pool axis; throws unless the geometry
/// divides evenly.
int64_t conv_output_extent(int64_t in, int64_t k, int64_t stride, int64_t pad);

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const ConvKernelT<T>& k, TapeT<T>* tape = nullptr);

/// Bilinear read of x[C,H,W] at fractional point p = (row, col), zero outside
/// the image. Gradients flow to both x and p. At exactly-integer coordinates
/// the coordinate gradient takes the one-sided limit from the left cell.
template <typename T>
TensorT<T> bilinear_sample(const TensorT<T>& x, const TensorT<T>& p, TapeT<T>* tape = nullptr);

template <typename T>
TensorT<T> deform_conv2d(const TensorT<T>& x, const ConvKernelT<T>& k, const OffsetFieldT<T>& off,
                         TapeT<T>* tape = nullptr);

/// Standard conv layer predicting an OffsetField for k: 2*kH*kW output
/// channels, same geometry, weights and bias exactly zero so the deformable
/// layer starts as a rigid one.
template <typename T>
ConvKernelT<T> make_offset_branch(const ConvKernelT<T>& k);

/// Flat argmax (h*W + w within the input plane) per output element, laid out
/// like the pool output. Kept for gradient routing and sampling traces.
struct PoolIndices {
    std::vector<int64_t> argmax;
};

template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& x, int k_h, int k_w, int s_h, int s_w,
                      TapeT<T>* tape = nullptr, PoolIndices* indices = nullptr);

/// k = in - (out-1)*floor(in/out); the paired stride is floor(in/out).
int64_t adaptive_kernel_size(int64_t in_extent, int64_t out_extent);

template <typename T>
TensorT<T> adaptive_max_pool2d(const TensorT<T>& x, int64_t out_h, int64_t out_w,
                               TapeT<T>* tape = nullptr, PoolIndices* indices = nullptr);

template <typename T>
TensorT<T> batch_norm(const TensorT<T>& x, BatchNormT<T>& bn, BnMode mode,
                      TapeT<T>* tape = nullptr);

/// relu(bn2(conv2(relu(bn1(conv1(x))))) + x); shape preserved.
template <typename T>
TensorT<T> residual_block_forward(const TensorT<T>& x, ResidualBlockT<T>& blk, BnMode mode,
                                  TapeT<T>* tape = nullptr);

// ---------------------------------------------------------------------------
// Sampling-location traces (receptive-field visualization).

/// One spatial layer as seen by the tracer, with the state realized by the
/// last forward pass.
template <typename T>
struct TraceLayerT {
    enum class Kind { kConv, kDeformConv, kPool };
    Kind kind = Kind::kConv;
    int k_h = 1, k_w = 1, s_h = 1, s_w = 1, p_h = 0, p_w = 0;
    int64_t in_h = 0, in_w = 0;
    int64_t out_h = 0, out_w = 0;
    int64_t channels = 0;             // output channels (pool: plane count)
    TensorT<T> offsets;               // deform only: realized [N, 2K, Ho, Wo]
    std::vector<int64_t> argmax;      // pool only: flat in-plane argmax per output
};

struct SamplePoint {
    int layer;  // index into the stack where the tap expansion happened
    int tap;    // kernel tap (row-major) within that layer
    double row, col;
};

/// Input-space sampling coordinates feeding output unit (c, h, w) of
/// stack[layer] for batch item `item`. Walks toward the input, expanding
/// through at most two conv-type levels; deformable taps include the realized
/// offsets. Pools route through their argmax while the trace is still a
/// single point, and through the window center once taps have fanned out.
template <typename T>
std::vector<SamplePoint> trace_sampling_locations(const std::vector<TraceLayerT<T>>& stack,
                                                  int layer, int64_t c, int64_t h, int64_t w,
                                                  int64_t item = 0);

// ---------------------------------------------------------------------------
// Shared bilinear cell math (used by deform_conv2d and the tests).

/// Cell decomposition of a fractional coordinate. Exactly-integer coordinates
/// fold into the left/upper cell (base = v-1, frac = 1) so the one-sided
/// derivative convention is uniform.
template <typename T>
inline void bilinear_cell(T v, int64_t& base, T& frac) {
    const T fl = std::floor(v);
    if (v == fl) {
        base = static_cast<int64_t>(fl) - 1;
        frac = T(1);
    } else {
        base = static_cast<int64_t>(fl);
        frac = v - fl;
    }
}

}  // namespace dfcr
