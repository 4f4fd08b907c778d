#include <gtest/gtest.h>

#include "test_support.hpp"
#include "unisot/autodiff.hpp"
#include "unisot/rng.hpp"

using namespace unisot;
using unisot::testing::check_tape_gradients;

namespace {

// Mixes every component of a tensor into one scalar with fixed weights, so
// vector-valued ops can be probed with the scalar finite-difference oracle.
ad::Var project(ad::Tape& t, ad::Var x, uint64_t salt = 11) {
    Rng rng(salt);
    ad::Var w = t.constant(rng.normal_tensor(t.val(x).dims, 1.0));
    return t.sum(t.mul(x, w));
}

}  // namespace

TEST(Tape, ForwardValues) {
    ad::Tape t;
    ad::Var a = t.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    ad::Var b = t.constant(Tensor({2, 2}, {5, 6, 7, 8}));
    EXPECT_DOUBLE_EQ(t.val(t.matmul(a, b)).at(0, 0), 19.0);
    EXPECT_DOUBLE_EQ(t.val(t.add(a, b)).at(1, 1), 12.0);
    EXPECT_DOUBLE_EQ(t.val(t.sum(a)).at(0), 10.0);
}

TEST(Tape, ParamSinkAccumulates) {
    Tensor x = Tensor::row({2.0, 3.0});
    Tensor sink({2});
    ad::Tape t;
    ad::Var v = t.param(x, &sink);
    t.backward(t.sum(t.mul(v, v)));
    EXPECT_DOUBLE_EQ(sink.at(0), 4.0);
    EXPECT_DOUBLE_EQ(sink.at(1), 6.0);
}

TEST(Tape, ElementwiseGradients) {
    Rng rng(1);
    auto r = check_tape_gradients(
        [](ad::Tape& t, std::vector<ad::Var>& v) {
            ad::Var y = t.mul(t.add(v[0], v[1]), t.sub(v[0], v[1]));
            y = t.add(y, t.div(v[0], t.add_scalar(t.mul(v[1], v[1]), 1.0)));
            return project(t, y);
        },
        {rng.normal_tensor({3, 4}, 1.0), rng.normal_tensor({3, 4}, 1.0)});
    EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(Tape, ActivationGradients) {
    Rng rng(2);
    auto r = check_tape_gradients(
        [](ad::Tape& t, std::vector<ad::Var>& v) {
            ad::Var y = t.add(t.gelu(v[0]), t.sigmoid(v[0]));
            y = t.add(y, t.relu(t.add_scalar(v[0], 0.3)));
            return project(t, y);
        },
        {rng.normal_tensor({4, 5}, 1.2)});
    EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(Tape, MatmulFamilyGradients) {
    Rng rng(3);
    auto r = check_tape_gradients(
        [](ad::Tape& t, std::vector<ad::Var>& v) {
            ad::Var y = t.matmul(v[0], v[1]);
            ad::Var z = t.matmul_nt(y, v[2]);
            return project(t, z);
        },
        {rng.normal_tensor({3, 4}, 1.0), rng.normal_tensor({4, 5}, 1.0),
         rng.normal_tensor({6, 5}, 1.0)});
    EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(Tape, SoftmaxAndLayerNormGradients) {
    Rng rng(4);
    AdditiveMask m(3, 6);
    m.block(0, 1);
    m.block(2, 4);
    m.block(2, 5);
    auto r = check_tape_gradients(
        [&](ad::Tape& t, std::vector<ad::Var>& v) {
            ad::Var s = t.masked_softmax(v[0], m);
            ad::Var ln = t.layer_norm(v[1], v[2], v[3], 1e-6);
            return t.add(project(t, s, 5), project(t, ln, 6));
        },
        {rng.normal_tensor({3, 6}, 2.0), rng.normal_tensor({3, 5}, 1.0),
         rng.uniform_tensor({5}, 0.5, 1.5), rng.normal_tensor({5}, 0.3)});
    EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(Tape, ShapeOpGradients) {
    Rng rng(5);
    auto r = check_tape_gradients(
        [](ad::Tape& t, std::vector<ad::Var>& v) {
            ad::Var top = t.slice_rows(v[0], 0, 2);
            ad::Var bottom = t.slice_rows(v[0], 2, 4);
            ad::Var cat = t.concat_cols({top, bottom});
            ad::Var picked = t.gather(cat, {0, 3, 7, 5});
            ad::Var rows = t.gather_rows(v[0], {3, 1, 1});
            ad::Var z = t.zero_rows(v[0], {true, false, true, false});
            return t.add(t.add(project(t, picked, 7), project(t, rows, 8)), project(t, z, 9));
        },
        {rng.normal_tensor({4, 3}, 1.0)});
    EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(Tape, ReductionGradients) {
    Rng rng(6);
    auto r = check_tape_gradients(
        [](ad::Tape& t, std::vector<ad::Var>& v) {
            ad::Var lse = t.logsumexp(v[0]);
            ad::Var m = t.mean(t.maximum(v[0], v[1]));
            ad::Var c = t.clamp(v[1], -0.5, 0.5);
            return t.add(t.add(lse, m), project(t, c, 10));
        },
        {rng.normal_tensor({7}, 1.0), rng.normal_tensor({7}, 1.0)});
    EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(Tape, CosineRowsGradients) {
    Rng rng(7);
    auto r = check_tape_gradients(
        [](ad::Tape& t, std::vector<ad::Var>& v) {
            return project(t, t.cosine_rows(v[0], v[1]), 11);
        },
        {rng.normal_tensor({6, 5}, 1.0), rng.normal_tensor({5}, 1.0)});
    EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(Tape, CosineRowsZeroRowConvention) {
    ad::Tape t;
    Tensor x({2, 3}, {0, 0, 0, 1, 0, 0});
    int zero_seen = 0;
    ad::Var c = t.cosine_rows(t.constant(x), t.constant(Tensor::row({1, 0, 0})), &zero_seen);
    EXPECT_EQ(zero_seen, 1);
    EXPECT_DOUBLE_EQ(t.val(c).at(0), 0.0);
    EXPECT_DOUBLE_EQ(t.val(c).at(1), 1.0);
}

TEST(Tape, MulColwiseGradients) {
    Rng rng(8);
    auto r = check_tape_gradients(
        [](ad::Tape& t, std::vector<ad::Var>& v) {
            return project(t, t.mul_colwise(v[0], v[1]), 12);
        },
        {rng.normal_tensor({4, 3}, 1.0), rng.normal_tensor({3}, 1.0)});
    EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(Tape, Conv3x3Gradients) {
    Rng rng(9);
    auto r = check_tape_gradients(
        [](ad::Tape& t, std::vector<ad::Var>& v) {
            ad::Var y = t.conv3x3(v[0], v[1], v[2]);
            return project(t, y, 13);
        },
        {rng.normal_tensor({4, 4, 2}, 1.0), rng.normal_tensor({3, 3, 2, 3}, 0.5),
         rng.normal_tensor({3}, 0.2)});
    EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(Tape, Conv3x3TranslationEquivariance) {
    // Shifting the input by one cell shifts the interior of the output.
    Rng rng(10);
    Tensor x = rng.normal_tensor({6, 6, 2}, 1.0);
    Tensor xs({6, 6, 2});
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 6; ++c)
            for (int ch = 0; ch < 2; ++ch)
                xs.data[((static_cast<size_t>(r) + 1) * 6 + c) * 2 + ch] =
                    x.data[(static_cast<size_t>(r) * 6 + c) * 2 + ch];
    Tensor w = rng.normal_tensor({3, 3, 2, 1}, 0.7), b = rng.normal_tensor({1}, 0.1);
    ad::Tape t;
    Tensor y = t.val(t.conv3x3(t.constant(x), t.constant(w), t.constant(b)));
    Tensor ys = t.val(t.conv3x3(t.constant(xs), t.constant(w), t.constant(b)));
    for (int r = 1; r < 4; ++r)
        for (int c = 1; c < 5; ++c)
            EXPECT_NEAR(ys.data[(static_cast<size_t>(r + 1)) * 6 + c],
                        y.data[static_cast<size_t>(r) * 6 + c], 1e-12);
}
