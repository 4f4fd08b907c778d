#pragma once

#include <cmath>
#include <functional>
#include <limits>

#include "tensor.hpp"

namespace unisot {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Additive attention mask: every entry is exactly 0 (attend) or -inf (blocked).
struct AdditiveMask {
    int rows = 0, cols = 0;
    std::vector<double> v;

    AdditiveMask() = default;
    AdditiveMask(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

    static AdditiveMask open(int r, int c) { return AdditiveMask(r, c); }

    // Blocks every (q, k) pair where either side is unavailable.
    static AdditiveMask from_availability(const std::vector<bool>& avail_q,
                                          const std::vector<bool>& avail_k) {
        AdditiveMask m(static_cast<int>(avail_q.size()), static_cast<int>(avail_k.size()));
        for (int i = 0; i < m.rows; ++i)
            for (int j = 0; j < m.cols; ++j)
                if (!avail_q[i] || !avail_k[j]) m.v[static_cast<size_t>(i) * m.cols + j] = kNegInf;
        return m;
    }

    // Row-vector mask (one query) that admits exactly the flagged keys.
    static AdditiveMask admit(const std::vector<bool>& keys) {
        AdditiveMask m(1, static_cast<int>(keys.size()));
        for (size_t j = 0; j < keys.size(); ++j)
            if (!keys[j]) m.v[j] = kNegInf;
        return m;
    }

    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    bool blocked(int r, int c) const { return at(r, c) != 0.0; }
    void block(int r, int c) { v[static_cast<size_t>(r) * cols + c] = kNegInf; }

    // Intersection of admissible pairs.
    static AdditiveMask combine(const AdditiveMask& a, const AdditiveMask& b) {
        if (a.rows != b.rows || a.cols != b.cols) throw shape_error("mask combine: shape mismatch");
        AdditiveMask m(a.rows, a.cols);
        for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = std::min(a.v[i], b.v[i]);
        return m;
    }

    AdditiveMask complement_within(const std::vector<bool>& domain) const {
        // Admits exactly the in-domain keys this mask blocks.
        if (rows != 1 || static_cast<size_t>(cols) != domain.size())
            throw shape_error("mask complement: shape mismatch");
        AdditiveMask m(1, cols);
        for (int j = 0; j < cols; ++j)
            if (!domain[j] || !blocked(0, j)) m.v[j] = kNegInf;
        return m;
    }
};

// Row softmax over unmasked entries. Masked entries come out exactly 0; a
// fully masked row is the zero vector.
inline Tensor masked_softmax(const Tensor& logits, const AdditiveMask& mask) {
    int n = logits.rows(), m = logits.cols();
    if (n != mask.rows || m != mask.cols)
        throw shape_error("masked_softmax: logits " + shape_str(logits) + " vs mask");
    Tensor out({n, m});
    for (int i = 0; i < n; ++i) {
        double mx = kNegInf;
        for (int j = 0; j < m; ++j)
            if (!mask.blocked(i, j)) mx = std::max(mx, logits.at(i, j));
        if (mx == kNegInf) continue;  // fully masked row -> zeros
        double z = 0.0;
        for (int j = 0; j < m; ++j)
            if (!mask.blocked(i, j)) z += std::exp(logits.at(i, j) - mx);
        for (int j = 0; j < m; ++j)
            if (!mask.blocked(i, j)) out.at(i, j) = std::exp(logits.at(i, j) - mx) / z;
    }
    return out;
}

inline Tensor softmax_rows(const Tensor& logits) {
    return masked_softmax(logits, AdditiveMask::open(logits.rows(), logits.cols()));
}

// Per-row normalization with population variance, then affine gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    int n = x.rows(), c = x.cols();
    if (gain.size() != c || bias.size() != c) throw shape_error("layer_norm: affine size mismatch");
    if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be positive");
    Tensor out(x.dims);
    for (int i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += x.at(i, j);
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            double d = x.at(i, j) - mu;
            var += d * d;
        }
        var /= c;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < c; ++j)
            out.at(i, j) = gain.at(j) * ((x.at(i, j) - mu) * inv) + bias.at(j);
    }
    return out;
}

inline double cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw shape_error("cosine_similarity: size mismatch");
    double na = l2_norm(a), nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) throw degenerate_error("cosine_similarity: zero-norm input");
    return dot(a, b) / (na * nb);
}

struct GradReport {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    int64_t checked_count = 0;
    bool pass = true;
};

using ScalarFn = std::function<double(const Tensor&)>;

// Central differences, the reference oracle for every analytic gradient.
inline Tensor finite_difference_gradient(const ScalarFn& f, const Tensor& x, double h) {
    if (!(h > 0)) throw std::invalid_argument("finite_difference_gradient: h must be positive");
    Tensor g(x.dims);
    Tensor probe = x;
    for (int64_t i = 0; i < x.size(); ++i) {
        double orig = probe.data[i];
        probe.data[i] = orig + h;
        double fp = f(probe);
        probe.data[i] = orig - h;
        double fm = f(probe);
        probe.data[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw numeric_error("finite_difference_gradient: non-finite probe value");
        g.data[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline GradReport gradient_check(const Tensor& analytic, const Tensor& numeric, double rtol,
                                 double atol) {
    if (!analytic.same_shape(numeric)) throw shape_error("gradient_check: shape mismatch");
    GradReport rep;
    rep.checked_count = analytic.size();
    for (int64_t i = 0; i < analytic.size(); ++i) {
        double a = analytic.data[i], n = numeric.data[i];
        double abs_err = std::fabs(a - n);
        double rel_err = abs_err / std::max(std::fabs(a), std::numeric_limits<double>::min());
        rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
        rep.max_rel_error = std::max(rep.max_rel_error, rel_err);
        if (!(rel_err <= rtol || abs_err <= atol)) rep.pass = false;
    }
    return rep;
}

}  // namespace unisot
