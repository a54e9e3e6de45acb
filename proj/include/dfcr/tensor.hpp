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

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfcr {

/// Dense row-major tensor. Copying a TensorT copies the handle: both copies
/// alias the same data and gradient buffers (use clone() for a deep copy).
/// The gradient buffer is allocated lazily via ensure_grad() and always has
/// the same extent as the data.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<int64_t> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(check_extents(shape_), T(0))) {}

    TensorT(std::vector<int64_t> shape, std::vector<T> values)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
        if (check_extents(shape_) != static_cast<int64_t>(data_->size())) {
            throw std::invalid_argument("tensor: data length " + std::to_string(data_->size()) +
                                        " does not match shape (numel " +
                                        std::to_string(check_extents(shape_)) + ")");
        }
    }

    static TensorT zeros(std::vector<int64_t> shape) { return TensorT(std::move(shape)); }

    static TensorT ones(std::vector<int64_t> shape) { return full(std::move(shape), T(1)); }

    static TensorT full(std::vector<int64_t> shape, T value) {
        TensorT t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), value);
        return t;
    }

    static TensorT from_data(std::vector<int64_t> shape, std::vector<T> values) {
        return TensorT(std::move(shape), std::move(values));
    }

    static TensorT scalar(T value) { return TensorT({1}, {value}); }

    const std::vector<int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_.at(i); }
    int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
    bool defined() const { return static_cast<bool>(data_); }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }
    std::vector<T>& vec() { return *data_; }
    const std::vector<T>& vec() const { return *data_; }

    T& operator[](int64_t i) { return (*data_)[i]; }
    const T& operator[](int64_t i) const { return (*data_)[i]; }

    template <class... Ix>
    T& at(Ix... ix) {
        return (*data_)[offset_of(ix...)];
    }
    template <class... Ix>
    const T& at(Ix... ix) const {
        return (*data_)[offset_of(ix...)];
    }

    bool has_grad() const { return static_cast<bool>(grad_); }

    /// Allocates a zero gradient buffer if absent.
    void ensure_grad() {
        if (!grad_) grad_ = std::make_shared<std::vector<T>>(data_->size(), T(0));
    }

    T* grad() { return grad_ ? grad_->data() : nullptr; }
    const T* grad() const { return grad_ ? grad_->data() : nullptr; }
    std::vector<T>& grad_vec() { return *grad_; }
    const std::vector<T>& grad_vec() const { return *grad_; }

    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
    }

    /// Deep copy of the data; the clone starts without a gradient buffer.
    TensorT clone() const {
        TensorT out;
        out.shape_ = shape_;
        out.data_ = std::make_shared<std::vector<T>>(*data_);
        return out;
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    bool shares_data(const TensorT& other) const { return data_ == other.data_; }

    bool all_finite() const {
        for (const T& v : *data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    static int64_t check_extents(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t e : shape) {
            if (e < 0) throw std::invalid_argument("tensor: negative extent");
            n *= e;
        }
        return n;
    }

    template <class... Ix>
    int64_t offset_of(Ix... ix) const {
        static_assert(sizeof...(Ix) >= 1);
        const int64_t idx[] = {static_cast<int64_t>(ix)...};
        int64_t off = 0;
        for (size_t d = 0; d < sizeof...(Ix); ++d) off = off * shape_[d] + idx[d];
        return off;
    }

    std::vector<int64_t> shape_;
    std::shared_ptr<std::vector<T>> data_;
    std::shared_ptr<std::vector<T>> grad_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

/// Records one backward closure per forward op. backward(loss) seeds the loss
/// gradient with 1 and replays the closures in reverse recording order. Each
/// closure accumulates (adds, never overwrites) into its inputs' gradients.
/// Gradients of node outputs (intermediates) are reset at the start of every
/// sweep so repeated sweeps stay linear in the seed; leaf gradients, e.g.
/// parameters, keep accumulating across sweeps until the caller zeroes them.
template <typename T>
class TapeT {
public:
    void record(std::string name, std::vector<TensorT<T>> outputs, std::function<void()> backward) {
        nodes_.push_back(Node{std::move(name), std::move(outputs), std::move(backward)});
    }

    void backward(TensorT<T>& loss) {
        if (loss.numel() != 1) throw std::invalid_argument("tape: backward seed must be a scalar");
        for (Node& n : nodes_)
            for (TensorT<T>& out : n.outputs) out.zero_grad();
        loss.ensure_grad();
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward_fn();
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    struct Node {
        std::string name;
        std::vector<TensorT<T>> outputs;
        std::function<void()> backward_fn;
    };
    std::vector<Node> nodes_;
};

using Tape = TapeT<float>;
using DTape = TapeT<double>;

// Elementwise ops. Shapes must match exactly, except that either operand of
// add/mul may be a one-element tensor (scalar broadcast). Passing a tape
// records the backward closure; nullptr runs forward only.
template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr);
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr);
template <typename T>
TensorT<T> relu(const TensorT<T>& x, TapeT<T>* tape = nullptr);
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x, TapeT<T>* tape = nullptr);
template <typename T>
TensorT<T> tanh(const TensorT<T>& x, TapeT<T>* tape = nullptr);

/// [M,K] x [K,N] -> [M,N].
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, TapeT<T>* tape = nullptr);

/// Sum of all entries -> scalar tensor.
template <typename T>
TensorT<T> sum_all(const TensorT<T>& x, TapeT<T>* tape = nullptr);

/// Mean of scalar tensors; the backward distributes 1/n to each input.
template <typename T>
TensorT<T> mean_scalars(const std::vector<TensorT<T>>& xs, TapeT<T>* tape = nullptr);

// Stable scalar activations shared by the ops above and the LSTM kernels.
template <typename T>
inline T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace dfcr
