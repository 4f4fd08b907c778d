#include <gtest/gtest.h>

#include <cmath>

#include "unisot/numerics.hpp"
#include "unisot/rng.hpp"

using namespace unisot;

TEST(MaskedSoftmax, HandValues) {
    Tensor logits({1, 2}, {0.0, std::log(2.0)});
    AdditiveMask open(1, 2);
    Tensor y = masked_softmax(logits, open);
    EXPECT_NEAR(y.at(0, 0), 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(y.at(0, 1), 2.0 / 3.0, 1e-12);
}

TEST(MaskedSoftmax, SingleUnmaskedEntry) {
    Tensor logits({1, 2}, {5.0, 7.0});
    AdditiveMask m(1, 2);
    m.block(0, 1);
    Tensor y = masked_softmax(logits, m);
    EXPECT_DOUBLE_EQ(y.at(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(y.at(0, 1), 0.0);
}

TEST(MaskedSoftmax, FullyMaskedRowIsZero) {
    Tensor logits({1, 2}, {3.0, 3.0});
    AdditiveMask m(1, 2);
    m.block(0, 0);
    m.block(0, 1);
    Tensor y = masked_softmax(logits, m);
    EXPECT_DOUBLE_EQ(y.at(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(y.at(0, 1), 0.0);
}

TEST(MaskedSoftmax, RowSumsAndShiftInvariance) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        int n = rng.uniform_int(1, 5), m = rng.uniform_int(1, 9);
        Tensor logits = rng.normal_tensor({n, m}, 3.0);
        AdditiveMask mask(n, m);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                if (rng.uniform() < 0.4) mask.block(i, j);
        Tensor y = masked_softmax(logits, mask);
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            bool any = false;
            for (int j = 0; j < m; ++j) {
                s += y.at(i, j);
                if (!mask.blocked(i, j)) any = true;
                if (mask.blocked(i, j)) EXPECT_DOUBLE_EQ(y.at(i, j), 0.0);
            }
            EXPECT_NEAR(s, any ? 1.0 : 0.0, 1e-12);
        }
        double c = rng.uniform(-5.0, 5.0);
        Tensor shifted = logits;
        for (auto& v : shifted.data) v += c;
        Tensor y2 = masked_softmax(shifted, mask);
        EXPECT_LE(y.max_abs_diff(y2), 1e-12);
    }
}

TEST(MaskedSoftmax, ShapeMismatchThrows) {
    Tensor logits({2, 2});
    AdditiveMask m(1, 2);
    EXPECT_THROW(masked_softmax(logits, m), shape_error);
}

TEST(LayerNorm, ConstantRow) {
    Tensor x({1, 4}, {1, 1, 1, 1});
    Tensor gain = Tensor::full({4}, 1.0), bias = Tensor::zeros({4});
    Tensor y = layer_norm(x, gain, bias, 1e-12);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(y.at(0, j), 0.0, 1e-6);
}

TEST(LayerNorm, UnitRowFixedPoint) {
    Tensor x({1, 2}, {1, -1});
    Tensor gain = Tensor::full({2}, 1.0), bias = Tensor::zeros({2});
    Tensor y = layer_norm(x, gain, bias, 1e-14);
    EXPECT_NEAR(y.at(0, 0), 1.0, 1e-6);
    EXPECT_NEAR(y.at(0, 1), -1.0, 1e-6);
}

TEST(LayerNorm, HandAffine) {
    Tensor x({1, 2}, {2, 0});
    Tensor gain = Tensor::full({2}, 2.0), bias = Tensor::full({2}, 1.0);
    Tensor y = layer_norm(x, gain, bias, 1e-14);
    EXPECT_NEAR(y.at(0, 0), 3.0, 1e-6);
    EXPECT_NEAR(y.at(0, 1), -1.0, 1e-6);
}

TEST(LayerNorm, ShapeMismatchThrows) {
    Tensor x({1, 4});
    EXPECT_THROW(layer_norm(x, Tensor::zeros({3}), Tensor::zeros({4}), 1e-5), shape_error);
}

TEST(Cosine, Identical) {
    Tensor a = Tensor::row({1, 2, 3});
    EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-12);
}

TEST(Cosine, Orthogonal) {
    EXPECT_NEAR(cosine_similarity(Tensor::row({1, 0}), Tensor::row({0, 1})), 0.0, 1e-12);
}

TEST(Cosine, HandValue) {
    EXPECT_NEAR(cosine_similarity(Tensor::row({1, 1}), Tensor::row({1, 0})),
                1.0 / std::sqrt(2.0), 1e-12);
}

TEST(Cosine, ZeroNormThrows) {
    EXPECT_THROW(cosine_similarity(Tensor::row({0, 0}), Tensor::row({1, 0})), degenerate_error);
}

TEST(Cosine, ScaleInvariance) {
    Rng rng(3);
    for (int t = 0; t < 30; ++t) {
        Tensor a = rng.normal_tensor({5}, 1.0), b = rng.normal_tensor({5}, 1.0);
        double s = rng.uniform(0.1, 10.0), u = rng.uniform(0.1, 10.0);
        Tensor as = a, bs = b;
        for (auto& v : as.data) v *= s;
        for (auto& v : bs.data) v *= u;
        EXPECT_NEAR(cosine_similarity(a, b), cosine_similarity(as, bs), 1e-12);
    }
}

TEST(FiniteDifference, Quadratic) {
    ScalarFn f = [](const Tensor& x) { return x.at(0) * x.at(0); };
    Tensor x = Tensor::scalar(3.0);
    Tensor g = finite_difference_gradient(f, x, 1e-6);
    EXPECT_NEAR(g.at(0), 6.0, 1e-6);
}

TEST(FiniteDifference, ConstantAndLinear) {
    Tensor x = Tensor::row({1.0, -2.0, 0.5});
    Tensor gc = finite_difference_gradient([](const Tensor&) { return 4.2; }, x, 1e-6);
    for (double v : gc.data) EXPECT_NEAR(v, 0.0, 1e-9);
    Tensor gl = finite_difference_gradient(
        [](const Tensor& t) {
            double s = 0;
            for (double v : t.data) s += v;
            return s;
        },
        x, 1e-6);
    for (double v : gl.data) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, NonFiniteThrows) {
    ScalarFn f = [](const Tensor& x) { return std::log(x.at(0)); };
    EXPECT_THROW(finite_difference_gradient(f, Tensor::scalar(0.0), 1e-3), numeric_error);
}

TEST(GradCheck, ExactMatch) {
    Tensor a = Tensor::row({1, 2, 3});
    GradReport r = gradient_check(a, a, 1e-6, 1e-12);
    EXPECT_TRUE(r.pass);
    EXPECT_DOUBLE_EQ(r.max_rel_error, 0.0);
    EXPECT_EQ(r.checked_count, 3);
}

TEST(GradCheck, SmallRelError) {
    GradReport r = gradient_check(Tensor::scalar(1.0), Tensor::scalar(1.0001), 1e-3, 0.0);
    EXPECT_TRUE(r.pass);
    EXPECT_NEAR(r.max_rel_error, 1e-4, 1e-8);
}

TEST(GradCheck, LargeErrorFails) {
    GradReport r = gradient_check(Tensor::scalar(1.0), Tensor::scalar(2.0), 1e-3, 1e-6);
    EXPECT_FALSE(r.pass);
    EXPECT_NEAR(r.max_rel_error, 1.0, 1e-12);
}

TEST(GradCheck, ShapeMismatchThrows) {
    EXPECT_THROW(gradient_check(Tensor::row({1, 2}), Tensor::row({1}), 1e-3, 1e-6), shape_error);
}
