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

#include "dfcr/nn_ops.hpp"
#include "dfcr/tensor.hpp"

// Serial reference kernels: direct nested-loop evaluations of the operator
// definitions, with no blocking, no threading and no shared code with the
// primary kernels. Tests compare the primary path against these; the bench
// target measures the gap.
namespace dfcr::ref {

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const ConvKernelT<T>& k);

template <typename T>
TensorT<T> deform_conv2d(const TensorT<T>& x, const ConvKernelT<T>& k, const OffsetFieldT<T>& off);

template <typename T>
TensorT<T> max_pool2d(const TensorT<T>& x, int k_h, int k_w, int s_h, int s_w);

template <typename T>
TensorT<T> adaptive_max_pool2d(const TensorT<T>& x, int64_t out_h, int64_t out_w);

template <typename T>
TensorT<T> batch_norm_train(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                            T eps);

/// Single LSTM step evaluated with scalar loops; gate order (i, f, g, o).
template <typename T>
void lstm_step(const TensorT<T>& w, const TensorT<T>& u, const TensorT<T>& b,
               const std::vector<T>& x, const std::vector<T>& h_prev,
               const std::vector<T>& c_prev, std::vector<T>& h, std::vector<T>& c);

}  // namespace dfcr::ref
