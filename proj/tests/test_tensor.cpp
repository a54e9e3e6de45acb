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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dfcr/reference.hpp"
#include "dfcr/tensor.hpp"
#include "test_util.hpp"

using namespace dfcr;
using namespace dfcr::testutil;

TEST_CASE("construction and invariants") {
    auto z = DTensor::zeros({2, 2});
    CHECK(z.numel() == 4);
    for (int64_t i = 0; i < 4; ++i) CHECK(z[i] == 0.0);

    auto v = DTensor::from_data({3}, {1, 2, 3});
    CHECK(v[0] == 1.0);
    CHECK(v[2] == 3.0);

    CHECK_THROWS_AS(DTensor::from_data({2}, {1, 2, 3}), std::invalid_argument);
    CHECK_THROWS_AS(DTensor::zeros({-1, 2}), std::invalid_argument);

    auto o = DTensor::ones({2, 3});
    CHECK(o.at(1, 2) == 1.0);

    // handle copies alias, clone does not
    auto alias = v;
    alias[0] = 9.0;
    CHECK(v[0] == 9.0);
    auto deep = v.clone();
    deep[0] = 7.0;
    CHECK(v[0] == 9.0);
}

TEST_CASE("row-major indexing") {
    auto t = DTensor::zeros({2, 3, 4, 5});
    t.at(1, 2, 3, 4) = 42.0;
    CHECK(t[((1 * 3 + 2) * 4 + 3) * 5 + 4] == 42.0);
}

TEST_CASE("elementwise forward values") {
    auto x = DTensor::from_data({3}, {-1.5, 0.0, 2.0});
    auto r = relu(x);
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 2.0);

    auto s = sigmoid(DTensor::scalar(0.0));
    CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-12));

    auto a = add(x, DTensor::from_data({3}, {1, 1, 1}));
    CHECK(a[0] == -0.5);

    // scalar broadcast both ways
    auto sb = add(x, DTensor::scalar(2.0));
    CHECK(sb[2] == 4.0);
    auto sm = mul(DTensor::scalar(3.0), x);
    CHECK(sm[2] == 6.0);

    CHECK_THROWS_AS(add(x, DTensor::zeros({4})), std::invalid_argument);
    CHECK_THROWS_AS(mul(x, DTensor::zeros({2, 2})), std::invalid_argument);
}

TEST_CASE("tanh derivative matches central difference at 0.3") {
    DTape tape;
    auto x = DTensor::scalar(0.3);
    auto y = dfcr::tanh(x, &tape);
    tape.backward(y);
    const double h = 1e-5;
    const double fd = (std::tanh(0.3 + h) - std::tanh(0.3 - h)) / (2 * h);
    CHECK(std::abs(x.grad()[0] - fd) < 1e-8);
}

TEST_CASE("matmul values") {
    auto eye = DTensor::from_data({2, 2}, {1, 0, 0, 1});
    auto a = DTensor::from_data({2, 2}, {3, 4, 5, 6});
    auto p = matmul(eye, a);
    for (int64_t i = 0; i < 4; ++i) CHECK(p[i] == a[i]);

    auto row = DTensor::from_data({1, 2}, {1, 2});
    auto col = DTensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(row, col)[0] == 11.0);

    CHECK_THROWS_AS(matmul(row, row), std::invalid_argument);
}

TEST_CASE("matmul matches triple-loop reference") {
    Rng rng(11);
    auto a = DTensor::zeros({4, 5});
    auto b = DTensor::zeros({5, 3});
    fill_uniform(a, rng);
    fill_uniform(b, rng);
    auto fast = matmul(a, b);
    auto slow = ref::matmul(a, b);
    for (int64_t i = 0; i < fast.numel(); ++i) CHECK(std::abs(fast[i] - slow[i]) < 1e-12);
}

TEST_CASE("forward is deterministic") {
    Rng rng(5);
    auto a = DTensor::zeros({7, 9});
    auto b = DTensor::zeros({9, 4});
    fill_uniform(a, rng);
    fill_uniform(b, rng);
    auto y1 = matmul(a, b);
    auto y2 = matmul(a, b);
    for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1[i] == y2[i]);
}

namespace {

// FD property check for a unary op: tape gradient vs central differences.
template <typename Op, typename Fwd>
void check_unary_grad(Op op, Fwd fwd, uint64_t seed) {
    Rng rng(seed);
    for (int rep = 0; rep < 20; ++rep) {
        auto x = DTensor::zeros({2, 5});
        fill_uniform(x, rng);
        auto w = make_weights(x.numel(), rng);
        auto wt = DTensor::from_data({2, 5}, std::vector<double>(w));

        DTape tape;
        auto loss = sum_all(mul(op(x, &tape), wt, &tape), &tape);
        tape.backward(loss);

        auto f = [&]() { return weighted_sum(fwd(x), w); };
        auto num = fd_grad(f, x);
        CHECK(max_rel_err(x.grad(), num) < 1e-3);
    }
}

}  // namespace

TEST_CASE("gradients match finite differences on random inputs") {
    check_unary_grad([](const DTensor& x, DTape* t) { return relu(x, t); },
                     [](const DTensor& x) { return relu(x); }, 101);
    check_unary_grad([](const DTensor& x, DTape* t) { return sigmoid(x, t); },
                     [](const DTensor& x) { return sigmoid(x); }, 102);
    check_unary_grad([](const DTensor& x, DTape* t) { return dfcr::tanh(x, t); },
                     [](const DTensor& x) { return dfcr::tanh(x); }, 103);

    Rng rng(104);
    for (int rep = 0; rep < 20; ++rep) {
        auto a = DTensor::zeros({3, 4});
        auto b = DTensor::zeros({4, 2});
        fill_uniform(a, rng);
        fill_uniform(b, rng);
        auto w = make_weights(6, rng);
        auto wt = DTensor::from_data({3, 2}, std::vector<double>(w));

        DTape tape;
        auto loss = sum_all(mul(matmul(a, b, &tape), wt, &tape), &tape);
        tape.backward(loss);

        auto fa = [&]() { return weighted_sum(matmul(a, b), w); };
        CHECK(max_rel_err(a.grad(), fd_grad(fa, a)) < 1e-3);
        CHECK(max_rel_err(b.grad(), fd_grad(fa, b)) < 1e-3);
    }

    // elementwise mul and add, both operands
    for (int rep = 0; rep < 20; ++rep) {
        auto a = DTensor::zeros({6});
        auto b = DTensor::zeros({6});
        fill_uniform(a, rng);
        fill_uniform(b, rng);
        auto w = make_weights(6, rng);
        auto wt = DTensor::from_data({6}, std::vector<double>(w));

        DTape tape;
        auto loss = sum_all(mul(mul(a, b, &tape), wt, &tape), &tape);
        tape.backward(loss);
        auto f = [&]() { return weighted_sum(mul(a, b), w); };
        CHECK(max_rel_err(a.grad(), fd_grad(f, a)) < 1e-3);
        CHECK(max_rel_err(b.grad(), fd_grad(f, b)) < 1e-3);
    }
}

TEST_CASE("backward twice doubles parameter gradients exactly") {
    Rng rng(7);
    auto a = DTensor::zeros({3, 3});
    auto b = DTensor::zeros({3, 3});
    fill_uniform(a, rng);
    fill_uniform(b, rng);

    DTape tape;
    auto y = matmul(a, b, &tape);
    auto s = sigmoid(y, &tape);
    auto loss = sum_all(s, &tape);
    tape.backward(loss);
    std::vector<double> once(a.grad(), a.grad() + a.numel());
    tape.backward(loss);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.grad()[i] == 2.0 * once[i]);
}

TEST_CASE("backward accumulates into shared inputs") {
    // y = x*x uses x twice; gradient must be the sum of both paths.
    auto x = DTensor::from_data({1}, {3.0});
    DTape tape;
    auto y = mul(x, x, &tape);
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("scalar broadcast gradient reduces") {
    auto x = DTensor::from_data({3}, {1, 2, 3});
    auto s = DTensor::scalar(2.0);
    DTape tape;
    auto loss = sum_all(mul(x, s, &tape), &tape);
    tape.backward(loss);
    CHECK(s.grad()[0] == doctest::Approx(6.0));  // sum of x
    CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("mean_scalars distributes gradient") {
    auto a = DTensor::scalar(1.0);
    auto b = DTensor::scalar(5.0);
    DTape tape;
    auto m = mean_scalars<double>({a, b}, &tape);
    CHECK(m[0] == doctest::Approx(3.0));
    tape.backward(m);
    CHECK(a.grad()[0] == doctest::Approx(0.5));
    CHECK(b.grad()[0] == doctest::Approx(0.5));
}

TEST_CASE("finite forward results on finite inputs") {
    Rng rng(9);
    auto x = DTensor::zeros({100});
    for (int64_t i = 0; i < 100; ++i) x[i] = rng.uniform(-1000.0, 1000.0);
    CHECK(sigmoid(x).all_finite());
    CHECK(dfcr::tanh(x).all_finite());
    CHECK(relu(x).all_finite());
}
