#include "ecgan/tape.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "ecgan/rng.hpp"

using ecgan::Rng;
using ecgan::Shape;
using ecgan::Tape;
using ecgan::Tensor;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
    Tensor<double> t(s);
    for (auto& v : t.data) v = scale * (rng.uniform01() * 2.0 - 1.0);
    return t;
}

// Builds a scalar expression from leaves and compares reverse-mode gradients
// against central finite differences, element by element.
using BuildFn = std::function<int(Tape<double>&, const std::vector<int>&)>;

double eval_scalar(const std::vector<Tensor<double>>& inputs, const BuildFn& build) {
    Tape<double> tape;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& t : inputs) ids.push_back(tape.leaf(t));
    return tape.scalar(build(tape, ids));
}

void check_grads(std::vector<Tensor<double>> inputs, const BuildFn& build, double tol = 1e-6,
                 double eps = 1e-5) {
    Tape<double> tape;
    std::vector<int> ids;
    for (const auto& t : inputs) ids.push_back(tape.leaf(t));
    const int out = build(tape, ids);
    ASSERT_EQ(tape.value(out).numel(), 1);
    const auto grads = tape.gradient(out, ids);

    for (size_t i = 0; i < inputs.size(); ++i) {
        const auto& gv = tape.value(grads[i]);
        ASSERT_EQ(gv.shape, inputs[i].shape);
        for (int64_t j = 0; j < inputs[i].numel(); ++j) {
            const double orig = inputs[i][j];
            inputs[i][j] = orig + eps;
            const double fp = eval_scalar(inputs, build);
            inputs[i][j] = orig - eps;
            const double fm = eval_scalar(inputs, build);
            inputs[i][j] = orig;
            const double fd = (fp - fm) / (2.0 * eps);
            const double an = gv[j];
            const double denom = std::max({1.0, std::abs(fd), std::abs(an)});
            EXPECT_NEAR(an / denom, fd / denom, tol)
                << "input " << i << " element " << j << " analytic " << an << " fd " << fd;
        }
    }
}

TEST(Tape, ScalarChainRule) {
    // f(x) = sum((2x+1)^2), df/dx = 4(2x+1)
    Tape<double> t;
    const int x = t.leaf(Tensor<double>(Shape{3}, {0.5, -1.0, 2.0}));
    const int f = t.sum_all(t.square(t.affine(x, 2.0, 1.0)));
    EXPECT_DOUBLE_EQ(t.scalar(f), 4.0 + 1.0 + 25.0);
    const auto g = t.gradient(f, {x});
    EXPECT_DOUBLE_EQ(t.value(g[0])[0], 8.0);
    EXPECT_DOUBLE_EQ(t.value(g[0])[1], -4.0);
    EXPECT_DOUBLE_EQ(t.value(g[0])[2], 20.0);
}

TEST(Tape, ElementwiseOpsFiniteDifference) {
    Rng rng(1);
    auto a = random_tensor(Shape{2, 3}, rng);
    auto b = random_tensor(Shape{2, 3}, rng);
    // keep log/sqrt/recip arguments positive and away from zero
    check_grads({a, b}, [](Tape<double>& t, const std::vector<int>& in) {
        const int s = t.add(t.mul(in[0], in[1]), t.sub(in[0], t.neg(in[1])));
        const int pos = t.affine(t.sigmoid(s), 1.0, 1.5);
        const int u = t.add(t.log_(pos), t.sqrt_(pos));
        const int v = t.add(t.recip(pos), t.add(t.tanh_(s), t.exp_(t.affine(s, 0.3, 0.0))));
        const int w = t.add(t.softplus(s), t.square(s));
        return t.sum_all(t.add(u, t.add(v, w)));
    });
}

TEST(Tape, AbsAndLeakyReluFiniteDifference) {
    // values far from the kink so central differences are valid
    Tensor<double> a(Shape{5}, {0.8, -0.6, 1.4, -1.1, 0.3});
    check_grads({a}, [](Tape<double>& t, const std::vector<int>& in) {
        return t.sum_all(t.add(t.abs_(in[0]), t.leaky_relu(in[0], 0.2)));
    });
}

TEST(Tape, ReductionsAndBroadcasts) {
    Rng rng(2);
    auto x = random_tensor(Shape{2, 3, 4, 4}, rng);
    auto s = random_tensor(Shape{2, 3}, rng);
    auto c = random_tensor(Shape{3}, rng);
    check_grads({x, s, c}, [](Tape<double>& t, const std::vector<int>& in) {
        const int a = t.mul_nc(in[0], in[1]);
        const int b = t.add_nc(a, t.reduce_hw(t.square(in[0])));
        const int d = t.scale_c(b, in[2]);
        const int e = t.add_bias_c(d, in[2]);
        const int f = t.mul(e, t.broadcast_c(in[2], 2, 4, 4));
        const int g = t.mul(f, t.broadcast_hw(in[1], 4, 4));
        return t.mean_all(g);
    });
}

TEST(Tape, RowColumnOps) {
    Rng rng(3);
    auto x = random_tensor(Shape{3, 4}, rng);
    auto v = random_tensor(Shape{3}, rng);
    auto b = random_tensor(Shape{4}, rng);
    check_grads({x, v, b}, [](Tape<double>& t, const std::vector<int>& in) {
        const int a = t.sub_col(in[0], in[1]);
        const int c = t.add_bias_row(a, in[2]);
        const int d = t.col_broadcast(t.row_sum(c), 4);
        const int e = t.broadcast_rows(t.reduce_rows(d), 3);
        return t.sum_all(t.mul(e, c));
    });
}

TEST(Tape, MatMulAllTransposeFlags) {
    Rng rng(4);
    for (const bool ta : {false, true})
        for (const bool tb : {false, true}) {
            auto a = random_tensor(ta ? Shape{4, 2} : Shape{2, 4}, rng);
            auto b = random_tensor(tb ? Shape{3, 4} : Shape{4, 3}, rng);
            check_grads({a, b}, [ta, tb](Tape<double>& t, const std::vector<int>& in) {
                return t.sum_all(t.square(t.matmul(in[0], in[1], ta, tb)));
            });
        }
}

TEST(Tape, SliceAndGather) {
    Rng rng(5);
    auto x = random_tensor(Shape{3, 6}, rng);
    check_grads({x}, [](Tape<double>& t, const std::vector<int>& in) {
        const int idx = t.constant(Tensor<double>(Shape{3}, {2.0, 0.0, 5.0}));
        const int a = t.slice_cols(in[0], 1, 3);
        const int b = t.pad_cols(a, 2, 6);
        const int g = t.gather_col(t.add(in[0], b), idx);
        const int sc = t.scatter_col(g, idx, 6);
        return t.sum_all(t.square(t.add(sc, in[0])));
    });
}

TEST(Tape, ConvForwardIdentityKernel) {
    // 1-channel 3x3 identity kernel reproduces the input
    Tape<double> t;
    Rng rng(6);
    auto x = random_tensor(Shape{1, 1, 5, 5}, rng);
    Tensor<double> w(Shape{1, 1, 3, 3});
    w.at4(0, 0, 1, 1) = 1.0;
    const int y = t.conv2d(t.leaf(x), t.leaf(w), 1);
    ASSERT_EQ(t.shape(y), (Shape{1, 1, 5, 5}));
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(t.value(y)[i], x[i]);
}

TEST(Tape, ConvFiniteDifference) {
    Rng rng(7);
    auto x = random_tensor(Shape{2, 3, 6, 6}, rng);
    auto w = random_tensor(Shape{4, 3, 3, 3}, rng, 0.5);
    check_grads({x, w}, [](Tape<double>& t, const std::vector<int>& in) {
        return t.sum_all(t.square(t.conv2d(in[0], in[1], 1)));
    });
}

TEST(Tape, Conv1x1FiniteDifference) {
    Rng rng(8);
    auto x = random_tensor(Shape{2, 4, 4, 4}, rng);
    auto w = random_tensor(Shape{3, 4, 1, 1}, rng);
    check_grads({x, w}, [](Tape<double>& t, const std::vector<int>& in) {
        return t.mean_all(t.square(t.conv2d(in[0], in[1], 0)));
    });
}

TEST(Tape, PoolUpsampleFiniteDifference) {
    Rng rng(9);
    auto x = random_tensor(Shape{2, 2, 4, 4}, rng);
    check_grads({x}, [](Tape<double>& t, const std::vector<int>& in) {
        const int d = t.avg_pool2(in[0]);
        const int u = t.upsample2(d);
        return t.sum_all(t.mul(u, in[0]));
    });
}

TEST(Tape, SecondOrderClosedForm) {
    // y = sum(x^3); g = dy/dx = 3x^2; z = sum(g^2) = 9*sum(x^4); dz/dx = 36x^3
    Tape<double> t;
    Tensor<double> xv(Shape{3}, {0.5, -1.0, 2.0});
    const int x = t.leaf(xv);
    const int y = t.sum_all(t.mul(t.square(x), x));
    const auto g = t.gradient(y, {x});
    const int z = t.sum_all(t.square(g[0]));
    const auto h = t.gradient(z, {x});
    for (int i = 0; i < 3; ++i)
        EXPECT_NEAR(t.value(h[0])[i], 36.0 * std::pow(xv[i], 3.0), 1e-9);
}

TEST(Tape, SecondOrderThroughConvGradientPenalty) {
    // r1 = 0.5 * || d(sum D(x)) / dx ||^2 for a tiny conv net; check dr1/dw by
    // finite differences over w.
    Rng rng(10);
    auto x = random_tensor(Shape{1, 2, 4, 4}, rng);
    auto w1 = random_tensor(Shape{3, 2, 3, 3}, rng, 0.5);
    auto w2 = random_tensor(Shape{1, 3, 1, 1}, rng, 0.5);

    const BuildFn build = [&x](Tape<double>& t, const std::vector<int>& in) {
        const int xin = t.leaf(x);
        const int h = t.tanh_(t.conv2d(xin, in[0], 1));
        const int logit = t.sum_all(t.conv2d(h, in[1], 0));
        const auto gx = t.gradient(logit, {xin});
        return t.affine(t.sum_all(t.square(gx[0])), 0.5, 0.0);
    };
    check_grads({w1, w2}, build, 1e-5);
}

TEST(Tape, UnreachedGradientIsExactZero) {
    Tape<double> t;
    const int x = t.leaf(Tensor<double>::scalar(2.0));
    const int y = t.leaf(Tensor<double>::scalar(3.0));
    const int f = t.sum_all(t.square(x));
    const auto g = t.gradient(f, {x, y});
    EXPECT_DOUBLE_EQ(t.value(g[0])[0], 4.0);
    EXPECT_DOUBLE_EQ(t.value(g[1])[0], 0.0);
}

TEST(Tape, StopGradCutsTheGraph) {
    Tape<double> t;
    const int x = t.leaf(Tensor<double>::scalar(2.0));
    const int f = t.sum_all(t.mul(x, t.stop_grad(x)));  // treated as x * const
    const auto g = t.gradient(f, {x});
    EXPECT_DOUBLE_EQ(t.value(g[0])[0], 2.0);
}

TEST(Tape, ShapeMismatchThrows) {
    Tape<double> t;
    const int a = t.leaf(Tensor<double>(Shape{2, 2}));
    const int b = t.leaf(Tensor<double>(Shape{2, 3}));
    EXPECT_THROW(t.add(a, b), ecgan::invalid_argument);
    EXPECT_THROW(t.matmul(a, b, false, true), ecgan::invalid_argument);
    const int x = t.leaf(Tensor<double>(Shape{1, 2, 4, 4}));
    const int w = t.leaf(Tensor<double>(Shape{1, 3, 3, 3}));
    EXPECT_THROW(t.conv2d(x, w, 1), ecgan::invalid_argument);
}

}  // namespace
