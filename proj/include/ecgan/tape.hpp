// Reverse-mode autodiff on a flat tape of eagerly evaluated nodes.
//
// Every primitive's VJP is expressed in terms of other primitives, so
// gradient() extends the same tape with differentiable nodes. Calling
// gradient() on a node produced by a previous gradient() therefore yields
// higher-order derivatives (needed for the gradient penalty on the
// discriminator, whose parameter update differentiates a gradient norm).
//
// Convolutions run as im2col + Eigen GEMM. Only stride-1 kernels of size
// 1 and 3 are used; spatial resizing goes through avg_pool2 / upsample2.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ecgan/common.hpp"
#include "ecgan/tensor.hpp"

namespace ecgan {

enum class Op : uint8_t {
    kLeaf,
    kConst,
    // elementwise, same shape
    kAdd,
    kSub,
    kMul,
    kNeg,
    kAffine,  // a*x + b
    kAbs,
    kSquare,
    kSqrt,
    kRecip,
    kExp,
    kLog,
    kTanh,
    kSigmoid,
    kSoftplus,
    kLeakyRelu,  // slope in attrs.a
    // gradient-stopping producers
    kSignOf,
    kStepMask,  // d/dx of leaky_relu as a constant field
    kStopGrad,
    kRowMaxSg,  // [M,N] -> [M], detached
    // reductions / broadcasts
    kSumAll,         // [*] -> [1]
    kBroadcastAll,   // [1] -> attrs shape
    kReduceHw,       // [N,C,H,W] -> [N,C], sum
    kBroadcastHw,    // [N,C] -> [N,C,H,W]
    kReduceNhw,      // [N,C,H,W] -> [C], sum
    kBroadcastC,     // [C] -> [N,C,H,W]
    kRowSum,         // [M,N] -> [M]
    kColBroadcast,   // [M] -> [M,N]
    kReduceRows,     // [M,N] -> [N]
    kBroadcastRows,  // [N] -> [M,N]
    // per-sample / per-channel affine
    kMulNc,     // x[N,C,H,W] * s[N,C]
    kAddNc,     // x[N,C,H,W] + s[N,C]
    kScaleC,    // x[N,C,H,W] * g[C]
    kAddBiasC,  // x[N,C,H,W] + b[C]
    // dense
    kMatMul,      // attrs i0 = transpose A, i1 = transpose B
    kAddBiasRow,  // x[M,N] + b[N]
    // convolution family (stride 1)
    kConv2d,       // x[N,C,H,W], w[O,C,k,k], attrs i0 = pad
    kConv2dDw,     // (x, gy) -> [O,C,k,k], attrs i0 = pad
    kKernelFlipT,  // [O,C,k,k] -> [C,O,k,k] with flipped taps
    kAvgPool2,
    kUpsample2,
    // shape / indexing
    kReshape,
    kSliceCols,   // [M,K] -> [M,len] starting at attrs i0
    kPadCols,     // [M,len] -> [M,i1] placed at attrs i0
    kGatherCol,   // (x[M,K], idx[M]) -> [M]
    kScatterCol,  // (v[M], idx[M]) -> [M, i0]
    kSubCol,      // x[M,K] - v[M] broadcast over columns
};

template <typename T>
class Tape {
public:
    struct Attrs {
        double a = 0.0, b = 0.0;
        int i0 = 0, i1 = 0, i2 = 0, i3 = 0, i4 = 0;
    };

    struct Node {
        Op op = Op::kConst;
        int in0 = -1, in1 = -1;
        Attrs at;
        Tensor<T> val;
    };

    int size() const { return static_cast<int>(nodes_.size()); }
    const Tensor<T>& value(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    const Shape& shape(int id) const { return nodes_[static_cast<size_t>(id)].val.shape; }
    T scalar(int id) const {
        if (value(id).numel() != 1) throw invalid_argument("scalar() on non-scalar node");
        return value(id)[0];
    }

    // ---- leaves -----------------------------------------------------------

    int leaf(Tensor<T> v) { return push(Op::kLeaf, -1, -1, {}, std::move(v)); }
    int constant(Tensor<T> v) { return push(Op::kConst, -1, -1, {}, std::move(v)); }
    int constant_scalar(T v) { return constant(Tensor<T>::scalar(v)); }

    // ---- elementwise ------------------------------------------------------

    int add(int x, int y) { return ew_binary(Op::kAdd, x, y); }
    int sub(int x, int y) { return ew_binary(Op::kSub, x, y); }
    int mul(int x, int y) { return ew_binary(Op::kMul, x, y); }

    int neg(int x) { return ew_unary(Op::kNeg, x); }
    int affine(int x, double a, double b) {
        Attrs at;
        at.a = a;
        at.b = b;
        Tensor<T> out(shape(x));
        const auto& xv = value(x);
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] = static_cast<T>(a) * xv[i] + static_cast<T>(b);
        return push(Op::kAffine, x, -1, at, std::move(out));
    }
    int abs_(int x) { return ew_unary(Op::kAbs, x); }
    int square(int x) { return ew_unary(Op::kSquare, x); }
    int sqrt_(int x) { return ew_unary(Op::kSqrt, x); }
    int recip(int x) { return ew_unary(Op::kRecip, x); }
    int exp_(int x) { return ew_unary(Op::kExp, x); }
    int log_(int x) { return ew_unary(Op::kLog, x); }
    int tanh_(int x) { return ew_unary(Op::kTanh, x); }
    int sigmoid(int x) { return ew_unary(Op::kSigmoid, x); }
    int softplus(int x) { return ew_unary(Op::kSoftplus, x); }
    int leaky_relu(int x, double slope) {
        Attrs at;
        at.a = slope;
        Tensor<T> out(shape(x));
        const auto& xv = value(x);
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] = xv[i] > T(0) ? xv[i] : static_cast<T>(slope) * xv[i];
        return push(Op::kLeakyRelu, x, -1, at, std::move(out));
    }

    int sign_of(int x) { return ew_unary(Op::kSignOf, x); }
    int step_mask(int x, double slope) {
        Attrs at;
        at.a = slope;
        Tensor<T> out(shape(x));
        const auto& xv = value(x);
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] = xv[i] > T(0) ? T(1) : static_cast<T>(slope);
        return push(Op::kStepMask, x, -1, at, std::move(out));
    }
    int stop_grad(int x) { return push(Op::kStopGrad, x, -1, {}, value(x)); }

    int row_max_sg(int x) {
        require_rank(x, 2, "row_max_sg");
        const int m = shape(x)[0], n = shape(x)[1];
        Tensor<T> out(Shape{m});
        const auto& xv = value(x);
        for (int r = 0; r < m; ++r) {
            T best = xv.at2(r, 0);
            for (int c = 1; c < n; ++c) best = std::max(best, xv.at2(r, c));
            out[r] = best;
        }
        return push(Op::kRowMaxSg, x, -1, {}, std::move(out));
    }

    // ---- reductions and broadcasts ----------------------------------------

    int sum_all(int x) {
        T acc = 0;
        for (T v : value(x).data) acc += v;
        return push(Op::kSumAll, x, -1, {}, Tensor<T>::scalar(acc));
    }
    int mean_all(int x) { return affine(sum_all(x), 1.0 / static_cast<double>(value(x).numel()), 0.0); }

    int broadcast_all(int x, Shape target) {
        if (value(x).numel() != 1) throw invalid_argument("broadcast_all expects scalar");
        Attrs at = shape_attrs(target);
        Tensor<T> out(target, value(x)[0]);
        return push(Op::kBroadcastAll, x, -1, at, std::move(out));
    }

    int reduce_hw(int x) {
        require_rank(x, 4, "reduce_hw");
        const Shape s = shape(x);
        Tensor<T> out(Shape{s[0], s[1]});
        const auto& xv = value(x);
        const int64_t hw = static_cast<int64_t>(s[2]) * s[3];
        for (int n = 0; n < s[0]; ++n)
            for (int c = 0; c < s[1]; ++c) {
                const T* p = &xv.data[(static_cast<size_t>(n) * s[1] + c) * hw];
                T acc = 0;
                for (int64_t i = 0; i < hw; ++i) acc += p[i];
                out.at2(n, c) = acc;
            }
        return push(Op::kReduceHw, x, -1, {}, std::move(out));
    }

    int broadcast_hw(int x, int h, int w) {
        require_rank(x, 2, "broadcast_hw");
        const Shape s = shape(x);
        Attrs at;
        at.i0 = h;
        at.i1 = w;
        Tensor<T> out(Shape{s[0], s[1], h, w});
        const auto& xv = value(x);
        const int64_t hw = static_cast<int64_t>(h) * w;
        for (int n = 0; n < s[0]; ++n)
            for (int c = 0; c < s[1]; ++c) {
                T* p = &out.data[(static_cast<size_t>(n) * s[1] + c) * hw];
                const T v = xv.at2(n, c);
                for (int64_t i = 0; i < hw; ++i) p[i] = v;
            }
        return push(Op::kBroadcastHw, x, -1, at, std::move(out));
    }

    int reduce_nhw(int x) {
        require_rank(x, 4, "reduce_nhw");
        const Shape s = shape(x);
        Tensor<T> out(Shape{s[1]});
        const auto& xv = value(x);
        for (int n = 0; n < s[0]; ++n)
            for (int c = 0; c < s[1]; ++c)
                for (int h = 0; h < s[2]; ++h)
                    for (int w = 0; w < s[3]; ++w) out[c] += xv.at4(n, c, h, w);
        return push(Op::kReduceNhw, x, -1, {}, std::move(out));
    }

    int broadcast_c(int x, int n, int h, int w) {
        require_rank(x, 1, "broadcast_c");
        const int c = shape(x)[0];
        Attrs at;
        at.i0 = n;
        at.i1 = h;
        at.i2 = w;
        Tensor<T> out(Shape{n, c, h, w});
        const auto& xv = value(x);
        for (int ni = 0; ni < n; ++ni)
            for (int ci = 0; ci < c; ++ci)
                for (int hi = 0; hi < h; ++hi)
                    for (int wi = 0; wi < w; ++wi) out.at4(ni, ci, hi, wi) = xv[ci];
        return push(Op::kBroadcastC, x, -1, at, std::move(out));
    }

    int row_sum(int x) {
        require_rank(x, 2, "row_sum");
        const Shape s = shape(x);
        Tensor<T> out(Shape{s[0]});
        const auto& xv = value(x);
        for (int r = 0; r < s[0]; ++r) {
            T acc = 0;
            for (int c = 0; c < s[1]; ++c) acc += xv.at2(r, c);
            out[r] = acc;
        }
        return push(Op::kRowSum, x, -1, {}, std::move(out));
    }

    int col_broadcast(int x, int ncols) {
        require_rank(x, 1, "col_broadcast");
        const int m = shape(x)[0];
        Attrs at;
        at.i0 = ncols;
        Tensor<T> out(Shape{m, ncols});
        const auto& xv = value(x);
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < ncols; ++c) out.at2(r, c) = xv[r];
        return push(Op::kColBroadcast, x, -1, at, std::move(out));
    }

    int reduce_rows(int x) {
        require_rank(x, 2, "reduce_rows");
        const Shape s = shape(x);
        Tensor<T> out(Shape{s[1]});
        const auto& xv = value(x);
        for (int r = 0; r < s[0]; ++r)
            for (int c = 0; c < s[1]; ++c) out[c] += xv.at2(r, c);
        return push(Op::kReduceRows, x, -1, {}, std::move(out));
    }

    int broadcast_rows(int x, int nrows) {
        require_rank(x, 1, "broadcast_rows");
        const int n = shape(x)[0];
        Attrs at;
        at.i0 = nrows;
        Tensor<T> out(Shape{nrows, n});
        const auto& xv = value(x);
        for (int r = 0; r < nrows; ++r)
            for (int c = 0; c < n; ++c) out.at2(r, c) = xv[c];
        return push(Op::kBroadcastRows, x, -1, at, std::move(out));
    }

    // ---- per-sample / per-channel modulation -------------------------------

    int mul_nc(int x, int s) { return nc_binary(Op::kMulNc, x, s); }
    int add_nc(int x, int s) { return nc_binary(Op::kAddNc, x, s); }

    int scale_c(int x, int g) { return cvec_binary(Op::kScaleC, x, g); }
    int add_bias_c(int x, int b) { return cvec_binary(Op::kAddBiasC, x, b); }

    // ---- dense -------------------------------------------------------------

    int matmul(int a, int b, bool ta = false, bool tb = false) {
        require_rank(a, 2, "matmul");
        require_rank(b, 2, "matmul");
        const Shape sa = shape(a), sb = shape(b);
        const int m = ta ? sa[1] : sa[0];
        const int ka = ta ? sa[0] : sa[1];
        const int kb = tb ? sb[1] : sb[0];
        const int n = tb ? sb[0] : sb[1];
        if (ka != kb)
            throw invalid_argument("matmul inner dims " + std::to_string(ka) + " vs " +
                                   std::to_string(kb));
        Attrs at;
        at.i0 = ta ? 1 : 0;
        at.i1 = tb ? 1 : 0;
        Tensor<T> out(Shape{m, n});
        MatMap A(const_cast<T*>(value(a).data.data()), sa[0], sa[1]);
        MatMap B(const_cast<T*>(value(b).data.data()), sb[0], sb[1]);
        MatMap C(out.data.data(), m, n);
        if (!ta && !tb)
            C.noalias() = A * B;
        else if (ta && !tb)
            C.noalias() = A.transpose() * B;
        else if (!ta && tb)
            C.noalias() = A * B.transpose();
        else
            C.noalias() = A.transpose() * B.transpose();
        return push(Op::kMatMul, a, b, at, std::move(out));
    }

    int add_bias_row(int x, int b) {
        require_rank(x, 2, "add_bias_row");
        require_rank(b, 1, "add_bias_row");
        const Shape s = shape(x);
        if (shape(b)[0] != s[1]) throw invalid_argument("add_bias_row bias length mismatch");
        Tensor<T> out(s);
        const auto& xv = value(x);
        const auto& bv = value(b);
        for (int r = 0; r < s[0]; ++r)
            for (int c = 0; c < s[1]; ++c) out.at2(r, c) = xv.at2(r, c) + bv[c];
        return push(Op::kAddBiasRow, x, b, {}, std::move(out));
    }

    // ---- convolutions -------------------------------------------------------

    int conv2d(int x, int w, int pad) {
        require_rank(x, 4, "conv2d input");
        require_rank(w, 4, "conv2d kernel");
        const Shape sx = shape(x), sw = shape(w);
        const int k = sw[2];
        if (sw[3] != k) throw invalid_argument("conv2d kernel must be square");
        if (sx[1] != sw[1])
            throw invalid_argument("conv2d channel mismatch: input " + std::to_string(sx[1]) +
                                   ", kernel " + std::to_string(sw[1]));
        const int ho = sx[2] + 2 * pad - k + 1;
        const int wo = sx[3] + 2 * pad - k + 1;
        if (ho <= 0 || wo <= 0) throw invalid_argument("conv2d output would be empty");
        Attrs at;
        at.i0 = pad;
        Tensor<T> out(Shape{sx[0], sw[0], ho, wo});
        conv_forward(value(x), value(w), pad, out);
        return push(Op::kConv2d, x, w, at, std::move(out));
    }

    int conv2d_dw(int x, int gy, int pad, int k) {
        require_rank(x, 4, "conv2d_dw input");
        require_rank(gy, 4, "conv2d_dw grad");
        const Shape sx = shape(x), sg = shape(gy);
        if (sx[0] != sg[0]) throw invalid_argument("conv2d_dw batch mismatch");
        Attrs at;
        at.i0 = pad;
        at.i1 = k;
        Tensor<T> out(Shape{sg[1], sx[1], k, k});
        conv_dw(value(x), value(gy), pad, k, out);
        return push(Op::kConv2dDw, x, gy, at, std::move(out));
    }

    int kernel_flip_t(int w) {
        require_rank(w, 4, "kernel_flip_t");
        const Shape s = shape(w);
        const int o = s[0], c = s[1], k = s[2];
        Tensor<T> out(Shape{c, o, k, k});
        const auto& wv = value(w);
        for (int oi = 0; oi < o; ++oi)
            for (int ci = 0; ci < c; ++ci)
                for (int u = 0; u < k; ++u)
                    for (int v = 0; v < k; ++v)
                        out.at4(ci, oi, u, v) = wv.at4(oi, ci, k - 1 - u, k - 1 - v);
        return push(Op::kKernelFlipT, w, -1, {}, std::move(out));
    }

    int avg_pool2(int x) {
        require_rank(x, 4, "avg_pool2");
        const Shape s = shape(x);
        if (s[2] % 2 || s[3] % 2) throw invalid_argument("avg_pool2 needs even H,W");
        Tensor<T> out(Shape{s[0], s[1], s[2] / 2, s[3] / 2});
        const auto& xv = value(x);
        for (int n = 0; n < s[0]; ++n)
            for (int c = 0; c < s[1]; ++c)
                for (int h = 0; h < s[2] / 2; ++h)
                    for (int w = 0; w < s[3] / 2; ++w)
                        out.at4(n, c, h, w) =
                            (xv.at4(n, c, 2 * h, 2 * w) + xv.at4(n, c, 2 * h, 2 * w + 1) +
                             xv.at4(n, c, 2 * h + 1, 2 * w) + xv.at4(n, c, 2 * h + 1, 2 * w + 1)) *
                            T(0.25);
        return push(Op::kAvgPool2, x, -1, {}, std::move(out));
    }

    int upsample2(int x) {
        require_rank(x, 4, "upsample2");
        const Shape s = shape(x);
        Tensor<T> out(Shape{s[0], s[1], s[2] * 2, s[3] * 2});
        const auto& xv = value(x);
        for (int n = 0; n < s[0]; ++n)
            for (int c = 0; c < s[1]; ++c)
                for (int h = 0; h < s[2] * 2; ++h)
                    for (int w = 0; w < s[3] * 2; ++w)
                        out.at4(n, c, h, w) = xv.at4(n, c, h / 2, w / 2);
        return push(Op::kUpsample2, x, -1, {}, std::move(out));
    }

    // ---- shape / indexing ----------------------------------------------------

    int reshape(int x, Shape target) {
        if (target.numel() != value(x).numel())
            throw invalid_argument("reshape numel mismatch " + shape(x).str() + " -> " +
                                   target.str());
        Attrs at = shape_attrs(target);
        Tensor<T> out(target, value(x).data);
        return push(Op::kReshape, x, -1, at, std::move(out));
    }

    int slice_cols(int x, int begin, int len) {
        require_rank(x, 2, "slice_cols");
        const Shape s = shape(x);
        if (begin < 0 || begin + len > s[1]) throw invalid_argument("slice_cols out of range");
        Attrs at;
        at.i0 = begin;
        at.i1 = len;
        Tensor<T> out(Shape{s[0], len});
        const auto& xv = value(x);
        for (int r = 0; r < s[0]; ++r)
            for (int c = 0; c < len; ++c) out.at2(r, c) = xv.at2(r, begin + c);
        return push(Op::kSliceCols, x, -1, at, std::move(out));
    }

    int pad_cols(int x, int begin, int total) {
        require_rank(x, 2, "pad_cols");
        const Shape s = shape(x);
        if (begin < 0 || begin + s[1] > total) throw invalid_argument("pad_cols out of range");
        Attrs at;
        at.i0 = begin;
        at.i1 = total;
        Tensor<T> out(Shape{s[0], total});
        const auto& xv = value(x);
        for (int r = 0; r < s[0]; ++r)
            for (int c = 0; c < s[1]; ++c) out.at2(r, begin + c) = xv.at2(r, c);
        return push(Op::kPadCols, x, -1, at, std::move(out));
    }

    int gather_col(int x, int idx) {
        require_rank(x, 2, "gather_col");
        require_rank(idx, 1, "gather_col index");
        const Shape s = shape(x);
        if (shape(idx)[0] != s[0]) throw invalid_argument("gather_col index length mismatch");
        Tensor<T> out(Shape{s[0]});
        const auto& xv = value(x);
        const auto& iv = value(idx);
        for (int r = 0; r < s[0]; ++r) {
            const int c = static_cast<int>(std::lround(static_cast<double>(iv[r])));
            if (c < 0 || c >= s[1]) throw invalid_argument("gather_col index out of range");
            out[r] = xv.at2(r, c);
        }
        return push(Op::kGatherCol, x, idx, {}, std::move(out));
    }

    int scatter_col(int v, int idx, int total) {
        require_rank(v, 1, "scatter_col");
        require_rank(idx, 1, "scatter_col index");
        const int m = shape(v)[0];
        if (shape(idx)[0] != m) throw invalid_argument("scatter_col index length mismatch");
        Attrs at;
        at.i0 = total;
        Tensor<T> out(Shape{m, total});
        const auto& vv = value(v);
        const auto& iv = value(idx);
        for (int r = 0; r < m; ++r) {
            const int c = static_cast<int>(std::lround(static_cast<double>(iv[r])));
            if (c < 0 || c >= total) throw invalid_argument("scatter_col index out of range");
            out.at2(r, c) = vv[r];
        }
        return push(Op::kScatterCol, v, idx, at, std::move(out));
    }

    int sub_col(int x, int v) {
        require_rank(x, 2, "sub_col");
        require_rank(v, 1, "sub_col vector");
        const Shape s = shape(x);
        if (shape(v)[0] != s[0]) throw invalid_argument("sub_col vector length mismatch");
        Tensor<T> out(s);
        const auto& xv = value(x);
        const auto& vv = value(v);
        for (int r = 0; r < s[0]; ++r)
            for (int c = 0; c < s[1]; ++c) out.at2(r, c) = xv.at2(r, c) - vv[r];
        return push(Op::kSubCol, x, v, {}, std::move(out));
    }

    // ---- reverse mode ---------------------------------------------------------
    //
    // Returns one gradient node per entry of `wrt`. The output must be scalar.
    // Nodes the output does not depend on get an exact zero tensor.

    std::vector<int> gradient(int out, const std::vector<int>& wrt) {
        if (value(out).numel() != 1) throw invalid_argument("gradient needs a scalar output");
        const int n = size();
        std::vector<char> reach(static_cast<size_t>(n), 0);
        for (int w : wrt) {
            if (w < 0 || w >= n) throw invalid_argument("gradient: wrt id out of range");
            reach[static_cast<size_t>(w)] = 1;
        }
        for (int i = 0; i < n; ++i) {
            Node& nd = nodes_[static_cast<size_t>(i)];
            if (stops_gradient(nd.op)) continue;
            if (nd.in0 >= 0 && reach[static_cast<size_t>(nd.in0)]) reach[static_cast<size_t>(i)] = 1;
            if (nd.in1 >= 0 && reach[static_cast<size_t>(nd.in1)]) reach[static_cast<size_t>(i)] = 1;
        }

        std::vector<int> adj(static_cast<size_t>(n), -1);
        if (reach[static_cast<size_t>(out)])
            adj[static_cast<size_t>(out)] = constant(Tensor<T>::scalar(T(1)));

        for (int i = out; i >= 0; --i) {
            const int g = adj[static_cast<size_t>(i)];
            if (g < 0 || !reach[static_cast<size_t>(i)]) continue;
            emit_vjp(i, g, reach, adj);
        }

        std::vector<int> result;
        result.reserve(wrt.size());
        for (int w : wrt) {
            const int g = adj[static_cast<size_t>(w)];
            result.push_back(g >= 0 ? g : constant(Tensor<T>::zeros(shape(w))));
        }
        return result;
    }

private:
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MatMap = Eigen::Map<Mat>;

    std::vector<Node> nodes_;

    int push(Op op, int in0, int in1, Attrs at, Tensor<T> val) {
        Node nd;
        nd.op = op;
        nd.in0 = in0;
        nd.in1 = in1;
        nd.at = at;
        nd.val = std::move(val);
        nodes_.push_back(std::move(nd));
        return size() - 1;
    }

    static bool stops_gradient(Op op) {
        switch (op) {
            case Op::kConst:
            case Op::kSignOf:
            case Op::kStepMask:
            case Op::kStopGrad:
            case Op::kRowMaxSg:
                return true;
            default:
                return false;
        }
    }

    void require_rank(int x, int rank, const char* who) const {
        if (shape(x).rank != rank)
            throw invalid_argument(std::string(who) + ": expected rank " + std::to_string(rank) +
                                   ", got " + shape(x).str());
    }

    void require_same_shape(int x, int y, const char* who) const {
        if (shape(x) != shape(y))
            throw invalid_argument(std::string(who) + ": shape mismatch " + shape(x).str() +
                                   " vs " + shape(y).str());
    }

    static Attrs shape_attrs(const Shape& s) {
        Attrs at;
        at.i0 = s.rank > 0 ? s[0] : 1;
        at.i1 = s.rank > 1 ? s[1] : 1;
        at.i2 = s.rank > 2 ? s[2] : 1;
        at.i3 = s.rank > 3 ? s[3] : 1;
        at.i4 = s.rank;
        return at;
    }

    static Shape attrs_shape(const Attrs& at) {
        Shape s;
        s.rank = at.i4;
        s.dim = {at.i0, at.i1, at.i2, at.i3};
        return s;
    }

    int ew_binary(Op op, int x, int y) {
        require_same_shape(x, y, "elementwise");
        const auto& a = value(x);
        const auto& b = value(y);
        Tensor<T> out(a.shape);
        const int64_t n = out.numel();
        switch (op) {
            case Op::kAdd:
                for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
                break;
            case Op::kSub:
                for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
                break;
            case Op::kMul:
                for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
                break;
            default:
                throw std::logic_error("ew_binary: bad op");
        }
        return push(op, x, y, {}, std::move(out));
    }

    int ew_unary(Op op, int x) {
        const auto& a = value(x);
        Tensor<T> out(a.shape);
        const int64_t n = out.numel();
        switch (op) {
            case Op::kNeg:
                for (int64_t i = 0; i < n; ++i) out[i] = -a[i];
                break;
            case Op::kAbs:
                for (int64_t i = 0; i < n; ++i) out[i] = a[i] < T(0) ? -a[i] : a[i];
                break;
            case Op::kSquare:
                for (int64_t i = 0; i < n; ++i) out[i] = a[i] * a[i];
                break;
            case Op::kSqrt:
                for (int64_t i = 0; i < n; ++i) out[i] = std::sqrt(a[i]);
                break;
            case Op::kRecip:
                for (int64_t i = 0; i < n; ++i) out[i] = T(1) / a[i];
                break;
            case Op::kExp:
                for (int64_t i = 0; i < n; ++i) out[i] = std::exp(a[i]);
                break;
            case Op::kLog:
                for (int64_t i = 0; i < n; ++i) out[i] = std::log(a[i]);
                break;
            case Op::kTanh:
                for (int64_t i = 0; i < n; ++i) out[i] = std::tanh(a[i]);
                break;
            case Op::kSigmoid:
                for (int64_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-a[i]));
                break;
            case Op::kSoftplus:
                // max(x,0) + log1p(exp(-|x|)) is stable at both tails
                for (int64_t i = 0; i < n; ++i) {
                    const T v = a[i];
                    out[i] = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
                }
                break;
            case Op::kSignOf:
                for (int64_t i = 0; i < n; ++i) out[i] = a[i] > T(0) ? T(1) : (a[i] < T(0) ? T(-1) : T(0));
                break;
            default:
                throw std::logic_error("ew_unary: bad op");
        }
        return push(op, x, -1, {}, std::move(out));
    }

    int nc_binary(Op op, int x, int s) {
        require_rank(x, 4, "nc modulation");
        require_rank(s, 2, "nc modulation");
        const Shape sx = shape(x);
        if (shape(s)[0] != sx[0] || shape(s)[1] != sx[1])
            throw invalid_argument("nc modulation: [N,C] mismatch");
        Tensor<T> out(sx);
        const auto& xv = value(x);
        const auto& sv = value(s);
        const int64_t hw = static_cast<int64_t>(sx[2]) * sx[3];
        for (int n = 0; n < sx[0]; ++n)
            for (int c = 0; c < sx[1]; ++c) {
                const T m = sv.at2(n, c);
                const T* px = &xv.data[(static_cast<size_t>(n) * sx[1] + c) * hw];
                T* po = &out.data[(static_cast<size_t>(n) * sx[1] + c) * hw];
                if (op == Op::kMulNc)
                    for (int64_t i = 0; i < hw; ++i) po[i] = px[i] * m;
                else
                    for (int64_t i = 0; i < hw; ++i) po[i] = px[i] + m;
            }
        return push(op, x, s, {}, std::move(out));
    }

    int cvec_binary(Op op, int x, int g) {
        require_rank(x, 4, "channel modulation");
        require_rank(g, 1, "channel modulation");
        const Shape sx = shape(x);
        if (shape(g)[0] != sx[1]) throw invalid_argument("channel modulation: C mismatch");
        Tensor<T> out(sx);
        const auto& xv = value(x);
        const auto& gv = value(g);
        const int64_t hw = static_cast<int64_t>(sx[2]) * sx[3];
        for (int n = 0; n < sx[0]; ++n)
            for (int c = 0; c < sx[1]; ++c) {
                const T m = gv[c];
                const T* px = &xv.data[(static_cast<size_t>(n) * sx[1] + c) * hw];
                T* po = &out.data[(static_cast<size_t>(n) * sx[1] + c) * hw];
                if (op == Op::kScaleC)
                    for (int64_t i = 0; i < hw; ++i) po[i] = px[i] * m;
                else
                    for (int64_t i = 0; i < hw; ++i) po[i] = px[i] + m;
            }
        return push(op, x, g, {}, std::move(out));
    }

    // im2col buffer, reused across calls
    std::vector<T>& scratch() {
        static thread_local std::vector<T> buf;
        return buf;
    }

    void im2col(const Tensor<T>& x, int n, int k, int pad, T* col) const {
        const Shape s = x.shape;
        const int C = s[1], H = s[2], W = s[3];
        const int ho = H + 2 * pad - k + 1, wo = W + 2 * pad - k + 1;
        for (int c = 0; c < C; ++c)
            for (int u = 0; u < k; ++u)
                for (int v = 0; v < k; ++v) {
                    T* row = col + (static_cast<size_t>(c) * k * k + u * k + v) *
                                       (static_cast<size_t>(ho) * wo);
                    for (int i = 0; i < ho; ++i) {
                        const int hi = i + u - pad;
                        if (hi < 0 || hi >= H) {
                            for (int j = 0; j < wo; ++j) row[i * wo + j] = T(0);
                            continue;
                        }
                        const T* src = &x.at4(n, c, hi, 0);
                        for (int j = 0; j < wo; ++j) {
                            const int wi = j + v - pad;
                            row[i * wo + j] = (wi < 0 || wi >= W) ? T(0) : src[wi];
                        }
                    }
                }
    }

    void conv_forward(const Tensor<T>& x, const Tensor<T>& w, int pad, Tensor<T>& y) {
        const int N = x.shape[0], C = x.shape[1];
        const int O = w.shape[0], k = w.shape[2];
        const int ho = y.shape[2], wo = y.shape[3];
        const int64_t ck2 = static_cast<int64_t>(C) * k * k;
        const int64_t hw = static_cast<int64_t>(ho) * wo;
        if (k == 1 && pad == 0) {
            // 1x1: plain per-sample GEMM, no im2col
            MatMap W1(const_cast<T*>(w.data.data()), O, C);
            for (int n = 0; n < N; ++n) {
                MatMap X1(const_cast<T*>(&x.data[static_cast<size_t>(n) * C * hw]), C, hw);
                MatMap Y1(&y.data[static_cast<size_t>(n) * O * hw], O, hw);
                Y1.noalias() = W1 * X1;
            }
            return;
        }
        auto& buf = scratch();
        buf.resize(static_cast<size_t>(ck2 * hw));
        MatMap W2(const_cast<T*>(w.data.data()), O, ck2);
        for (int n = 0; n < N; ++n) {
            im2col(x, n, k, pad, buf.data());
            MatMap col(buf.data(), ck2, hw);
            MatMap Y1(&y.data[static_cast<size_t>(n) * O * ho * wo], O, hw);
            Y1.noalias() = W2 * col;
        }
    }

    void conv_dw(const Tensor<T>& x, const Tensor<T>& gy, int pad, int k, Tensor<T>& z) {
        const int N = x.shape[0], C = x.shape[1];
        const int O = gy.shape[1];
        const int ho = gy.shape[2], wo = gy.shape[3];
        const int64_t ck2 = static_cast<int64_t>(C) * k * k;
        const int64_t hw = static_cast<int64_t>(ho) * wo;
        MatMap Z(z.data.data(), O, ck2);
        Z.setZero();
        auto& buf = scratch();
        buf.resize(static_cast<size_t>(ck2 * hw));
        for (int n = 0; n < N; ++n) {
            im2col(x, n, k, pad, buf.data());
            MatMap col(buf.data(), ck2, hw);
            MatMap G(const_cast<T*>(&gy.data[static_cast<size_t>(n) * O * hw]), O, hw);
            Z.noalias() += G * col.transpose();
        }
    }

    void accumulate(std::vector<int>& adj, int target, int contribution) {
        int& slot = adj[static_cast<size_t>(target)];
        slot = slot < 0 ? contribution : add(slot, contribution);
    }

    void emit_vjp(int i, int g, const std::vector<char>& reach, std::vector<int>& adj) {
        // copy POD fields only; push may reallocate nodes_
        const Op op = nodes_[static_cast<size_t>(i)].op;
        const Attrs at = nodes_[static_cast<size_t>(i)].at;
        const int x = nodes_[static_cast<size_t>(i)].in0;
        const int y = nodes_[static_cast<size_t>(i)].in1;
        const auto live = [&](int id) { return id >= 0 && reach[static_cast<size_t>(id)]; };
        switch (op) {
            case Op::kLeaf:
            case Op::kConst:
            case Op::kSignOf:
            case Op::kStepMask:
            case Op::kStopGrad:
            case Op::kRowMaxSg:
                break;
            case Op::kAdd:
                if (live(x)) accumulate(adj, x, g);
                if (live(y)) accumulate(adj, y, g);
                break;
            case Op::kSub:
                if (live(x)) accumulate(adj, x, g);
                if (live(y)) accumulate(adj, y, neg(g));
                break;
            case Op::kMul:
                if (live(x)) accumulate(adj, x, mul(g, y));
                if (live(y)) accumulate(adj, y, mul(g, x));
                break;
            case Op::kNeg:
                if (live(x)) accumulate(adj, x, neg(g));
                break;
            case Op::kAffine:
                if (live(x)) accumulate(adj, x, affine(g, at.a, 0.0));
                break;
            case Op::kAbs:
                if (live(x)) accumulate(adj, x, mul(g, sign_of(x)));
                break;
            case Op::kSquare:
                if (live(x)) accumulate(adj, x, mul(g, affine(x, 2.0, 0.0)));
                break;
            case Op::kSqrt:
                if (live(x)) accumulate(adj, x, mul(g, affine(recip(i), 0.5, 0.0)));
                break;
            case Op::kRecip:
                if (live(x)) accumulate(adj, x, neg(mul(g, square(i))));
                break;
            case Op::kExp:
                if (live(x)) accumulate(adj, x, mul(g, i));
                break;
            case Op::kLog:
                if (live(x)) accumulate(adj, x, mul(g, recip(x)));
                break;
            case Op::kTanh:
                if (live(x)) accumulate(adj, x, mul(g, affine(square(i), -1.0, 1.0)));
                break;
            case Op::kSigmoid:
                if (live(x)) accumulate(adj, x, mul(g, mul(i, affine(i, -1.0, 1.0))));
                break;
            case Op::kSoftplus:
                if (live(x)) accumulate(adj, x, mul(g, sigmoid(x)));
                break;
            case Op::kLeakyRelu:
                if (live(x)) accumulate(adj, x, mul(g, step_mask(x, at.a)));
                break;
            case Op::kSumAll:
                if (live(x)) accumulate(adj, x, broadcast_all(g, shape(x)));
                break;
            case Op::kBroadcastAll:
                if (live(x)) accumulate(adj, x, sum_all(g));
                break;
            case Op::kReduceHw:
                if (live(x)) accumulate(adj, x, broadcast_hw(g, shape(x)[2], shape(x)[3]));
                break;
            case Op::kBroadcastHw:
                if (live(x)) accumulate(adj, x, reduce_hw(g));
                break;
            case Op::kReduceNhw:
                if (live(x))
                    accumulate(adj, x, broadcast_c(g, shape(x)[0], shape(x)[2], shape(x)[3]));
                break;
            case Op::kBroadcastC:
                if (live(x)) accumulate(adj, x, reduce_nhw(g));
                break;
            case Op::kRowSum:
                if (live(x)) accumulate(adj, x, col_broadcast(g, shape(x)[1]));
                break;
            case Op::kColBroadcast:
                if (live(x)) accumulate(adj, x, row_sum(g));
                break;
            case Op::kReduceRows:
                if (live(x)) accumulate(adj, x, broadcast_rows(g, shape(x)[0]));
                break;
            case Op::kBroadcastRows:
                if (live(x)) accumulate(adj, x, reduce_rows(g));
                break;
            case Op::kMulNc:
                if (live(x)) accumulate(adj, x, mul_nc(g, y));
                if (live(y)) accumulate(adj, y, reduce_hw(mul(g, x)));
                break;
            case Op::kAddNc:
                if (live(x)) accumulate(adj, x, g);
                if (live(y)) accumulate(adj, y, reduce_hw(g));
                break;
            case Op::kScaleC:
                if (live(x)) accumulate(adj, x, scale_c(g, y));
                if (live(y)) accumulate(adj, y, reduce_nhw(mul(g, x)));
                break;
            case Op::kAddBiasC:
                if (live(x)) accumulate(adj, x, g);
                if (live(y)) accumulate(adj, y, reduce_nhw(g));
                break;
            case Op::kMatMul: {
                const bool ta = at.i0 != 0, tb = at.i1 != 0;
                if (!ta && !tb) {
                    if (live(x)) accumulate(adj, x, matmul(g, y, false, true));
                    if (live(y)) accumulate(adj, y, matmul(x, g, true, false));
                } else if (ta && !tb) {
                    if (live(x)) accumulate(adj, x, matmul(y, g, false, true));
                    if (live(y)) accumulate(adj, y, matmul(x, g, false, false));
                } else if (!ta && tb) {
                    if (live(x)) accumulate(adj, x, matmul(g, y, false, false));
                    if (live(y)) accumulate(adj, y, matmul(g, x, true, false));
                } else {
                    if (live(x)) accumulate(adj, x, matmul(y, g, true, true));
                    if (live(y)) accumulate(adj, y, matmul(g, x, true, true));
                }
                break;
            }
            case Op::kAddBiasRow:
                if (live(x)) accumulate(adj, x, g);
                if (live(y)) accumulate(adj, y, reduce_rows(g));
                break;
            case Op::kConv2d: {
                const int pad = at.i0;
                const int k = shape(y)[2];
                if (live(x)) accumulate(adj, x, conv2d(g, kernel_flip_t(y), k - 1 - pad));
                if (live(y)) accumulate(adj, y, conv2d_dw(x, g, pad, k));
                break;
            }
            case Op::kConv2dDw: {
                const int pad = at.i0;
                const int k = at.i1;
                if (live(x)) accumulate(adj, x, conv2d(y, kernel_flip_t(g), k - 1 - pad));
                if (live(y)) accumulate(adj, y, conv2d(x, g, pad));
                break;
            }
            case Op::kKernelFlipT:
                if (live(x)) accumulate(adj, x, kernel_flip_t(g));
                break;
            case Op::kAvgPool2:
                if (live(x)) accumulate(adj, x, affine(upsample2(g), 0.25, 0.0));
                break;
            case Op::kUpsample2:
                if (live(x)) accumulate(adj, x, affine(avg_pool2(g), 4.0, 0.0));
                break;
            case Op::kReshape:
                if (live(x)) accumulate(adj, x, reshape(g, shape(x)));
                break;
            case Op::kSliceCols:
                if (live(x)) accumulate(adj, x, pad_cols(g, at.i0, shape(x)[1]));
                break;
            case Op::kPadCols:
                if (live(x)) accumulate(adj, x, slice_cols(g, at.i0, shape(x)[1]));
                break;
            case Op::kGatherCol:
                if (live(x)) accumulate(adj, x, scatter_col(g, y, shape(x)[1]));
                break;
            case Op::kScatterCol:
                if (live(x)) accumulate(adj, x, gather_col(g, y));
                break;
            case Op::kSubCol:
                if (live(x)) accumulate(adj, x, g);
                if (live(y)) accumulate(adj, y, neg(row_sum(g)));
                break;
        }
    }
};

}  // namespace ecgan
