#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include "autodiff.hpp"
#include "grid.hpp"
#include "tensor.hpp"
#include "types.hpp"

namespace unisot {

struct LossWeights {
    double lambda_1 = 5.0;
    double lambda_giou = 2.0;
    double lambda_mmc = 0.1;
    double lambda_orth = 0.1;
    double tau = 0.07;
    int n_neg = 9;
};

constexpr double kProbEps = 1e-7;

// ---- generalized IoU ----

inline double giou(const Box& a, const Box& b) {
    if (a.w < 0 || a.h < 0 || b.w < 0 || b.h < 0)
        throw std::invalid_argument("giou: negative extent");
    if (a.area() == 0.0 && b.area() == 0.0)
        throw degenerate_error("giou: both boxes have zero area");
    double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
    double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
    double inter = iw * ih;
    double uni = a.area() + b.area() - inter;
    double hw = std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1());
    double hh = std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1());
    double hull = hw * hh;
    return inter / uni - (hull - uni) / hull;
}

namespace lossdetail {

struct BoxVars {
    ad::Var x1, y1, x2, y2, area;
};

inline BoxVars corners(ad::Tape& t, ad::Var box4) {
    ad::Var cx = t.gather(box4, {0}), cy = t.gather(box4, {1});
    ad::Var w = t.gather(box4, {2}), h = t.gather(box4, {3});
    ad::Var hw = t.scale(w, 0.5), hh = t.scale(h, 0.5);
    BoxVars b;
    b.x1 = t.sub(cx, hw);
    b.x2 = t.add(cx, hw);
    b.y1 = t.sub(cy, hh);
    b.y2 = t.add(cy, hh);
    b.area = t.mul(w, h);
    return b;
}

}  // namespace lossdetail

// GIoU of two boxes given as (cx, cy, w, h) 4-vectors on the tape.
inline ad::Var giou_node(ad::Tape& t, ad::Var pred4, ad::Var gt4) {
    using lossdetail::corners;
    auto a = corners(t, pred4), b = corners(t, gt4);
    ad::Var zero = t.constant(Tensor::scalar(0.0));
    ad::Var iw = t.maximum(t.sub(t.minimum(a.x2, b.x2), t.maximum(a.x1, b.x1)), zero);
    ad::Var ih = t.maximum(t.sub(t.minimum(a.y2, b.y2), t.maximum(a.y1, b.y1)), zero);
    ad::Var inter = t.mul(iw, ih);
    ad::Var uni = t.sub(t.add(a.area, b.area), inter);
    ad::Var hull = t.mul(t.sub(t.maximum(a.x2, b.x2), t.minimum(a.x1, b.x1)),
                         t.sub(t.maximum(a.y2, b.y2), t.minimum(a.y1, b.y1)));
    return t.sub(t.div(inter, uni), t.div(t.sub(hull, uni), hull));
}

// lambda_1 * mean-L1 + lambda_giou * (1 - GIoU); boxes already normalized.
inline ad::Var box_loss_node(ad::Tape& t, ad::Var pred4, const Box& gt,
                             const LossWeights& w) {
    ad::Var gt4 = t.constant(Tensor({4}, {gt.cx, gt.cy, gt.w, gt.h}));
    ad::Var diff = t.sub(pred4, gt4);
    ad::Var l1 = t.mean(t.maximum(diff, t.neg(diff)));
    ad::Var g = giou_node(t, pred4, gt4);
    ad::Var one = t.constant(Tensor::scalar(1.0));
    return t.add(t.scale(l1, w.lambda_1), t.scale(t.sub(one, g), w.lambda_giou));
}

// Mean binary cross-entropy of a probability map against the in-box
// indicator; probabilities are clamped to [eps, 1-eps].
inline ad::Var target_map_loss_node(ad::Tape& t, ad::Var l_hat, const Tensor& indicator) {
    const Tensor& v = t.val(l_hat);
    if (v.size() != indicator.size()) throw shape_error("target_map_loss: size mismatch");
    for (double x : v.data)
        if (x < 0.0 || x > 1.0)
            throw std::domain_error("target_map_loss: probability out of range");
    ad::Var p = t.clamp(l_hat, kProbEps, 1.0 - kProbEps);
    Tensor ones(v.dims);
    std::fill(ones.data.begin(), ones.data.end(), 1.0);
    ad::Var one = t.constant(ones);
    ad::Var y = t.constant(indicator);
    ad::Var pos = t.mul(y, t.log_(p));
    ad::Var neg = t.mul(t.sub(one, y), t.log_(t.sub(one, p)));
    return t.neg(t.mean(t.add(pos, neg)));
}

// Gaussian-weighted focal loss on the center map, exponents 2 and 4,
// normalized by the positive-cell count.
inline ad::Var center_loss_node(ad::Tape& t, ad::Var c_hat, const Tensor& target) {
    const Tensor& v = t.val(c_hat);
    if (v.size() != target.size()) throw shape_error("center_loss: size mismatch");
    for (double x : v.data)
        if (x < 0.0 || x > 1.0) throw std::domain_error("center_loss: probability out of range");
    Tensor pos_w(v.dims), neg_w(v.dims);
    int n_pos = 0;
    for (int64_t i = 0; i < target.size(); ++i) {
        if (target.data[i] == 1.0) {
            pos_w.data[i] = 1.0;
            ++n_pos;
        } else {
            double q = 1.0 - target.data[i];
            neg_w.data[i] = q * q * q * q;
        }
    }
    if (n_pos == 0) throw degenerate_error("center_loss: no positive cell");
    ad::Var p = t.clamp(c_hat, kProbEps, 1.0 - kProbEps);
    Tensor ones(v.dims);
    std::fill(ones.data.begin(), ones.data.end(), 1.0);
    ad::Var one = t.constant(ones);
    ad::Var q = t.sub(one, p);
    ad::Var pos_term = t.mul(t.constant(pos_w), t.mul(t.mul(q, q), t.log_(p)));
    ad::Var neg_term = t.mul(t.constant(neg_w), t.mul(t.mul(p, p), t.log_(q)));
    return t.scale(t.neg(t.add(t.sum(pos_term), t.sum(neg_term))), 1.0 / n_pos);
}

// Negative-sample choice of the contrastive loss: the top-scoring patches
// strictly outside the box, ties broken toward the lowest patch index.
inline std::vector<int> top_out_of_box(const Tensor& scores, const std::vector<bool>& in_box,
                                       int n_neg) {
    std::vector<int> out_idx;
    for (size_t i = 0; i < in_box.size(); ++i)
        if (!in_box[i]) out_idx.push_back(static_cast<int>(i));
    if (out_idx.empty()) throw degenerate_error("mmc_loss: no out-of-box patch");
    std::stable_sort(out_idx.begin(), out_idx.end(),
                     [&](int a, int b) { return scores.at(a) > scores.at(b); });
    if (static_cast<int>(out_idx.size()) > n_neg) out_idx.resize(static_cast<size_t>(n_neg));
    return out_idx;
}

// Target-wise contrastive loss: the box-center patch score against the top
// out-of-box scores. Selection is held fixed at the evaluation point.
inline ad::Var mmc_loss_node(ad::Tape& t, ad::Var sem_token, ad::Var e_x, const Box& gt_box,
                             const LossWeights& w, int g, int p, int* zero_rows = nullptr) {
    ad::Var token = t.val(sem_token).rank() == 2
                        ? t.reshape(sem_token, {t.val(sem_token).cols()})
                        : sem_token;
    ad::Var sims = t.cosine_rows(e_x, token, zero_rows);
    ad::Var s = t.scale(sims, 1.0 / w.tau);
    std::vector<bool> in_box = in_box_mask(gt_box, g, p);
    bool any_in = false;
    for (bool b : in_box) any_in = any_in || b;
    if (!any_in) throw degenerate_error("mmc_loss: empty in-box patch set");
    auto [cr, cc] = center_cell(gt_box, g, p);
    int pos = cr * g + cc;
    std::vector<int> sel = top_out_of_box(t.val(s), in_box, w.n_neg);
    sel.insert(sel.begin(), pos);
    ad::Var chosen = t.gather(s, sel);
    return t.sub(t.logsumexp(chosen), t.gather(s, {pos}));
}

// Sum of squared deviations from orthonormality: |P^T P - I|_F^2 + |Q Q^T - I|_F^2.
inline ad::Var orthogonality_node(ad::Tape& t, ad::Var p, ad::Var q) {
    int r = t.val(p).cols();
    if (t.val(q).rows() != r) throw shape_error("orthogonality: rank mismatch");
    Tensor eye({r, r});
    for (int i = 0; i < r; ++i) eye.at(i, i) = 1.0;
    ad::Var i_const = t.constant(eye);
    ad::Var dp = t.sub(t.matmul_tn(p, p), i_const);
    ad::Var dq = t.sub(t.matmul_nt(q, q), i_const);
    return t.add(t.sum(t.mul(dp, dp)), t.sum(t.mul(dq, dq)));
}

// ---- stage totals ----

struct Stage1Components {
    double target_map = 0.0;
    double center = 0.0;
    double box = 0.0;
    double mmc_sum = 0.0;  // already summed over layers
};

inline double stage1_total(const Stage1Components& c, const LossWeights& w) {
    return c.target_map + c.center + c.box + w.lambda_mmc * c.mmc_sum;
}

inline ad::Var stage1_total_node(ad::Tape& t, ad::Var target_map, ad::Var center, ad::Var box,
                                 const std::vector<ad::Var>& mmc_layers, const LossWeights& w) {
    ad::Var total = t.add(t.add(target_map, center), box);
    if (!mmc_layers.empty()) {
        ad::Var mmc = mmc_layers[0];
        for (size_t i = 1; i < mmc_layers.size(); ++i) mmc = t.add(mmc, mmc_layers[i]);
        total = t.add(total, t.scale(mmc, w.lambda_mmc));
    }
    return total;
}

inline ad::Var stage2_total_node(ad::Tape& t, ad::Var stage1,
                                 const std::vector<std::pair<ad::Var, ad::Var>>& pq_blocks,
                                 const LossWeights& w) {
    ad::Var total = stage1;
    if (!pq_blocks.empty()) {
        ad::Var orth = orthogonality_node(t, pq_blocks[0].first, pq_blocks[0].second);
        for (size_t i = 1; i < pq_blocks.size(); ++i)
            orth = t.add(orth, orthogonality_node(t, pq_blocks[i].first, pq_blocks[i].second));
        total = t.add(total, t.scale(orth, w.lambda_orth));
    }
    return total;
}

// ---- value-level wrappers with analytic gradients ----

struct LossGrad {
    double loss = 0.0;
    std::vector<Tensor> grads;  // one per differentiable input, in call order
};

inline LossGrad mmc_loss(const Tensor& sem_token, const Tensor& e_x, const Box& gt_box,
                         const LossWeights& w, int g, int p) {
    ad::Tape t;
    LossGrad out;
    out.grads = {Tensor(sem_token.dims), Tensor(e_x.dims)};
    ad::Var tok = t.param(sem_token, &out.grads[0]);
    ad::Var ex = t.param(e_x, &out.grads[1]);
    ad::Var loss = mmc_loss_node(t, tok, ex, gt_box, w, g, p);
    t.backward(loss);
    out.loss = t.val(loss).at(0);
    return out;
}

inline LossGrad target_map_loss(const Tensor& l_hat, const Box& gt_box, int g, int p) {
    ad::Tape t;
    LossGrad out;
    out.grads = {Tensor(l_hat.dims)};
    ad::Var lv = t.param(l_hat, &out.grads[0]);
    ad::Var loss = target_map_loss_node(t, lv, indicator_from_mask(in_box_mask(gt_box, g, p)));
    t.backward(loss);
    out.loss = t.val(loss).at(0);
    return out;
}

inline LossGrad center_loss(const Tensor& c_hat, const Box& gt_box, int g, int p) {
    ad::Tape t;
    LossGrad out;
    out.grads = {Tensor(c_hat.dims)};
    ad::Var cv = t.param(c_hat, &out.grads[0]);
    ad::Var loss = center_loss_node(t, cv, gaussian_center_target(gt_box, g, p));
    t.backward(loss);
    out.loss = t.val(loss).at(0);
    return out;
}

inline LossGrad box_loss(const Box& pred, const Box& gt, const LossWeights& w) {
    ad::Tape t;
    LossGrad out;
    out.grads = {Tensor({4})};
    ad::Var pv = t.param(Tensor({4}, {pred.cx, pred.cy, pred.w, pred.h}), &out.grads[0]);
    ad::Var loss = box_loss_node(t, pv, gt, w);
    t.backward(loss);
    out.loss = t.val(loss).at(0);
    return out;
}

inline LossGrad orthogonality_loss(const Tensor& p, const Tensor& q) {
    ad::Tape t;
    LossGrad out;
    out.grads = {Tensor(p.dims), Tensor(q.dims)};
    ad::Var pv = t.param(p, &out.grads[0]);
    ad::Var qv = t.param(q, &out.grads[1]);
    ad::Var loss = orthogonality_node(t, pv, qv);
    t.backward(loss);
    out.loss = t.val(loss).at(0);
    return out;
}

}  // namespace unisot
