#pragma once

#include <cassert>
#include <functional>
#include <memory>
#include <utility>

#include "numerics.hpp"
#include "tensor.hpp"

namespace unisot {
namespace ad {

// Handle into a tape. Valid only for the tape that produced it.
struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

// Eager reverse-mode tape. Values are computed at op creation; backward()
// walks the tape in reverse and accumulates adjoints. Leaves created through
// param() additionally add their adjoint into an external sink tensor.
class Tape {
public:
    Var constant(Tensor v) { return push(std::move(v), {}, nullptr, nullptr); }

    Var param(const Tensor& v, Tensor* grad_sink) {
        return push(v, {}, nullptr, grad_sink);
    }

    const Tensor& val(Var x) const { return nodes_[x.idx].val; }
    const Tensor& grad(Var x) const { return nodes_[x.idx].grad; }
    size_t node_count() const { return nodes_.size(); }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        const Tensor &ta = val(a), &tb = val(b);
        if (!ta.same_shape(tb)) throw shape_error("ad add: shape mismatch");
        Tensor out = ta;
        for (int64_t i = 0; i < out.size(); ++i) out.data[i] += tb.data[i];
        return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
            t.accum(n.parents[0], n.grad);
            t.accum(n.parents[1], n.grad);
        });
    }

    Var sub(Var a, Var b) {
        const Tensor &ta = val(a), &tb = val(b);
        if (!ta.same_shape(tb)) throw shape_error("ad sub: shape mismatch");
        Tensor out = ta;
        for (int64_t i = 0; i < out.size(); ++i) out.data[i] -= tb.data[i];
        return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
            t.accum(n.parents[0], n.grad);
            Tensor neg = n.grad;
            for (auto& v : neg.data) v = -v;
            t.accum(n.parents[1], neg);
        });
    }

    Var mul(Var a, Var b) {
        const Tensor &ta = val(a), &tb = val(b);
        if (!ta.same_shape(tb)) throw shape_error("ad mul: shape mismatch");
        Tensor out = ta;
        for (int64_t i = 0; i < out.size(); ++i) out.data[i] *= tb.data[i];
        return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
            const Tensor &ta = t.val(n.parents[0]), &tb = t.val(n.parents[1]);
            Tensor ga = n.grad, gb = n.grad;
            for (int64_t i = 0; i < ga.size(); ++i) {
                ga.data[i] *= tb.data[i];
                gb.data[i] *= ta.data[i];
            }
            t.accum(n.parents[0], ga);
            t.accum(n.parents[1], gb);
        });
    }

    Var div(Var a, Var b) {
        const Tensor &ta = val(a), &tb = val(b);
        if (!ta.same_shape(tb)) throw shape_error("ad div: shape mismatch");
        Tensor out = ta;
        for (int64_t i = 0; i < out.size(); ++i) out.data[i] /= tb.data[i];
        return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
            const Tensor &ta = t.val(n.parents[0]), &tb = t.val(n.parents[1]);
            Tensor ga = n.grad, gb = n.grad;
            for (int64_t i = 0; i < ga.size(); ++i) {
                ga.data[i] /= tb.data[i];
                gb.data[i] *= -ta.data[i] / (tb.data[i] * tb.data[i]);
            }
            t.accum(n.parents[0], ga);
            t.accum(n.parents[1], gb);
        });
    }

    Var scale(Var a, double c) {
        Tensor out = val(a);
        for (auto& v : out.data) v *= c;
        return push(std::move(out), {a}, [c](Tape& t, const Node& n) {
            Tensor g = n.grad;
            for (auto& v : g.data) v *= c;
            t.accum(n.parents[0], g);
        });
    }

    Var add_scalar(Var a, double c) {
        Tensor out = val(a);
        for (auto& v : out.data) v += c;
        return push(std::move(out), {a},
                    [](Tape& t, const Node& n) { t.accum(n.parents[0], n.grad); });
    }

    Var neg(Var a) { return scale(a, -1.0); }

    Var relu(Var a) {
        Tensor out = val(a);
        for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
        return push(std::move(out), {a}, [](Tape& t, const Node& n) {
            const Tensor& x = t.val(n.parents[0]);
            Tensor g = n.grad;
            for (int64_t i = 0; i < g.size(); ++i)
                if (x.data[i] <= 0.0) g.data[i] = 0.0;
            t.accum(n.parents[0], g);
        });
    }

    Var gelu(Var a) {
        Tensor out = val(a);
        for (auto& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
        return push(std::move(out), {a}, [](Tape& t, const Node& n) {
            const Tensor& x = t.val(n.parents[0]);
            Tensor g = n.grad;
            for (int64_t i = 0; i < g.size(); ++i) {
                double v = x.data[i];
                double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                g.data[i] *= cdf + v * pdf;
            }
            t.accum(n.parents[0], g);
        });
    }

    Var sigmoid(Var a) {
        Tensor out = val(a);
        for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
        Var r = push(std::move(out), {a}, [](Tape& t, const Node& n) {
            const Tensor& y = n.val;
            Tensor g = n.grad;
            for (int64_t i = 0; i < g.size(); ++i) g.data[i] *= y.data[i] * (1.0 - y.data[i]);
            t.accum(n.parents[0], g);
        });
        return r;
    }

    Var exp_(Var a) {
        Tensor out = val(a);
        for (auto& v : out.data) v = std::exp(v);
        return push(std::move(out), {a}, [](Tape& t, const Node& n) {
            Tensor g = n.grad;
            for (int64_t i = 0; i < g.size(); ++i) g.data[i] *= n.val.data[i];
            t.accum(n.parents[0], g);
        });
    }

    Var log_(Var a) {
        Tensor out = val(a);
        for (auto& v : out.data) v = std::log(v);
        return push(std::move(out), {a}, [](Tape& t, const Node& n) {
            const Tensor& x = t.val(n.parents[0]);
            Tensor g = n.grad;
            for (int64_t i = 0; i < g.size(); ++i) g.data[i] /= x.data[i];
            t.accum(n.parents[0], g);
        });
    }

    // Identity inside [lo, hi], flat (zero gradient) outside.
    Var clamp(Var a, double lo, double hi) {
        Tensor out = val(a);
        for (auto& v : out.data) v = std::min(hi, std::max(lo, v));
        return push(std::move(out), {a}, [lo, hi](Tape& t, const Node& n) {
            const Tensor& x = t.val(n.parents[0]);
            Tensor g = n.grad;
            for (int64_t i = 0; i < g.size(); ++i)
                if (x.data[i] < lo || x.data[i] > hi) g.data[i] = 0.0;
            t.accum(n.parents[0], g);
        });
    }

    // Elementwise max; ties route the gradient to the first argument.
    Var maximum(Var a, Var b) {
        const Tensor &ta = val(a), &tb = val(b);
        if (!ta.same_shape(tb)) throw shape_error("ad maximum: shape mismatch");
        Tensor out = ta;
        for (int64_t i = 0; i < out.size(); ++i) out.data[i] = std::max(ta.data[i], tb.data[i]);
        return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
            const Tensor &ta = t.val(n.parents[0]), &tb = t.val(n.parents[1]);
            Tensor ga = n.grad, gb = n.grad;
            for (int64_t i = 0; i < ga.size(); ++i) {
                if (ta.data[i] >= tb.data[i]) gb.data[i] = 0.0;
                else ga.data[i] = 0.0;
            }
            t.accum(n.parents[0], ga);
            t.accum(n.parents[1], gb);
        });
    }

    Var minimum(Var a, Var b) { return neg(maximum(neg(a), neg(b))); }

    // ---- linear algebra ----

    Var matmul(Var a, Var b) {
        Tensor out = unisot::matmul(val(a), val(b));
        return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
            t.accum(n.parents[0], unisot::matmul_nt(n.grad, t.val(n.parents[1])));
            t.accum(n.parents[1], unisot::matmul_tn(t.val(n.parents[0]), n.grad));
        });
    }

    // a * b^T
    Var matmul_nt(Var a, Var b) {
        Tensor out = unisot::matmul_nt(val(a), val(b));
        return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
            t.accum(n.parents[0], unisot::matmul(n.grad, t.val(n.parents[1])));
            t.accum(n.parents[1], unisot::matmul_tn(n.grad, t.val(n.parents[0])));
        });
    }

    // a^T * b
    Var matmul_tn(Var a, Var b) {
        Tensor out = unisot::matmul_tn(val(a), val(b));
        return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
            t.accum(n.parents[0], unisot::matmul_nt(t.val(n.parents[1]), n.grad));
            t.accum(n.parents[1], unisot::matmul(t.val(n.parents[0]), n.grad));
        });
    }

    // y = x * diag(v), x: n x r, v: r
    Var mul_colwise(Var x, Var v) {
        const Tensor &tx = val(x), &tv = val(v);
        int n = tx.rows(), r = tx.cols();
        if (tv.size() != r) throw shape_error("mul_colwise: size mismatch");
        Tensor out = tx;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < r; ++j) out.at(i, j) *= tv.at(j);
        return push(std::move(out), {x, v}, [](Tape& t, const Node& n_) {
            const Tensor &tx = t.val(n_.parents[0]), &tv = t.val(n_.parents[1]);
            int n = tx.rows(), r = tx.cols();
            Tensor gx = n_.grad;
            Tensor gv(tv.dims);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < r; ++j) {
                    gv.at(j) += n_.grad.at(i, j) * tx.at(i, j);
                    gx.at(i, j) *= tv.at(j);
                }
            t.accum(n_.parents[0], gx);
            t.accum(n_.parents[1], gv);
        });
    }

    // Broadcasts a length-C vector over every row of x (n x C).
    Var add_rowvec(Var x, Var v) {
        const Tensor &tx = val(x), &tv = val(v);
        int n = tx.rows(), c = tx.cols();
        if (tv.size() != c) throw shape_error("add_rowvec: size mismatch");
        Tensor out = tx;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) out.at(i, j) += tv.at(j);
        return push(std::move(out), {x, v}, [](Tape& t, const Node& n_) {
            t.accum(n_.parents[0], n_.grad);
            const Tensor& g = n_.grad;
            Tensor gv(t.val(n_.parents[1]).dims);
            for (int i = 0; i < g.rows(); ++i)
                for (int j = 0; j < g.cols(); ++j) gv.at(j) += g.at(i, j);
            t.accum(n_.parents[1], gv);
        });
    }

    // ---- shape ops ----

    Var reshape(Var a, std::vector<int> dims) {
        Tensor out = val(a);
        if (Tensor::count(dims) != out.size()) throw shape_error("ad reshape: count mismatch");
        std::vector<int> old = out.dims;
        out.dims = std::move(dims);
        return push(std::move(out), {a}, [old](Tape& t, const Node& n) {
            Tensor g = n.grad;
            g.dims = old;
            t.accum(n.parents[0], g);
        });
    }

    Var slice_rows(Var a, int r0, int r1) {
        const Tensor& ta = val(a);
        int c = ta.cols();
        if (r0 < 0 || r1 > ta.rows() || r0 > r1) throw shape_error("slice_rows: range");
        Tensor out({r1 - r0, c});
        std::copy(ta.data.begin() + static_cast<size_t>(r0) * c,
                  ta.data.begin() + static_cast<size_t>(r1) * c, out.data.begin());
        return push(std::move(out), {a}, [r0, c](Tape& t, const Node& n) {
            Tensor g(t.val(n.parents[0]).dims);
            std::copy(n.grad.data.begin(), n.grad.data.end(),
                      g.data.begin() + static_cast<size_t>(r0) * c);
            t.accum(n.parents[0], g);
        });
    }

    Var slice_cols(Var a, int c0, int c1) {
        const Tensor& ta = val(a);
        int n = ta.rows(), c = ta.cols();
        if (c0 < 0 || c1 > c || c0 > c1) throw shape_error("slice_cols: range");
        Tensor out({n, c1 - c0});
        for (int i = 0; i < n; ++i)
            for (int j = c0; j < c1; ++j) out.at(i, j - c0) = ta.at(i, j);
        return push(std::move(out), {a}, [c0](Tape& t, const Node& n_) {
            Tensor g(t.val(n_.parents[0]).dims);
            for (int i = 0; i < n_.grad.rows(); ++i)
                for (int j = 0; j < n_.grad.cols(); ++j) g.at(i, j + c0) = n_.grad.at(i, j);
            t.accum(n_.parents[0], g);
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw shape_error("concat_rows: empty");
        int c = val(parts[0]).cols(), n = 0;
        for (Var p : parts) {
            if (val(p).cols() != c) throw shape_error("concat_rows: col mismatch");
            n += val(p).rows();
        }
        Tensor out({n, c});
        std::vector<int> offsets;
        int r = 0;
        for (Var p : parts) {
            offsets.push_back(r);
            const Tensor& tp = val(p);
            std::copy(tp.data.begin(), tp.data.end(),
                      out.data.begin() + static_cast<size_t>(r) * c);
            r += tp.rows();
        }
        return push(std::move(out), parts, [offsets, c](Tape& t, const Node& n_) {
            for (size_t k = 0; k < n_.parents.size(); ++k) {
                const Tensor& tp = t.val(n_.parents[k]);
                Tensor g(tp.dims);
                std::copy(n_.grad.data.begin() + static_cast<size_t>(offsets[k]) * c,
                          n_.grad.data.begin() + static_cast<size_t>(offsets[k]) * c + tp.size(),
                          g.data.begin());
                t.accum(n_.parents[k], g);
            }
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw shape_error("concat_cols: empty");
        int n = val(parts[0]).rows(), c = 0;
        for (Var p : parts) {
            if (val(p).rows() != n) throw shape_error("concat_cols: row mismatch");
            c += val(p).cols();
        }
        Tensor out({n, c});
        std::vector<int> offsets;
        int off = 0;
        for (Var p : parts) {
            offsets.push_back(off);
            const Tensor& tp = val(p);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < tp.cols(); ++j) out.at(i, off + j) = tp.at(i, j);
            off += tp.cols();
        }
        return push(std::move(out), parts, [offsets](Tape& t, const Node& n_) {
            for (size_t k = 0; k < n_.parents.size(); ++k) {
                const Tensor& tp = t.val(n_.parents[k]);
                Tensor g(tp.dims);
                for (int i = 0; i < tp.rows(); ++i)
                    for (int j = 0; j < tp.cols(); ++j) g.at(i, j) = n_.grad.at(i, offsets[k] + j);
                t.accum(n_.parents[k], g);
            }
        });
    }

    // Flat 1-d concatenation.
    Var concat_flat(const std::vector<Var>& parts) {
        if (parts.empty()) throw shape_error("concat_flat: empty");
        int n = 0;
        for (Var p : parts) n += static_cast<int>(val(p).size());
        Tensor out({n});
        int off = 0;
        std::vector<int> offsets;
        for (Var p : parts) {
            offsets.push_back(off);
            const Tensor& tp = val(p);
            std::copy(tp.data.begin(), tp.data.end(), out.data.begin() + off);
            off += static_cast<int>(tp.size());
        }
        return push(std::move(out), parts, [offsets](Tape& t, const Node& n_) {
            for (size_t k = 0; k < n_.parents.size(); ++k) {
                const Tensor& tp = t.val(n_.parents[k]);
                Tensor g(tp.dims);
                std::copy(n_.grad.data.begin() + offsets[k],
                          n_.grad.data.begin() + offsets[k] + tp.size(), g.data.begin());
                t.accum(n_.parents[k], g);
            }
        });
    }

    // Picks flat components; indices are held fixed (no gradient through them).
    Var gather(Var a, std::vector<int> idx) {
        const Tensor& ta = val(a);
        Tensor out({static_cast<int>(idx.size())});
        for (size_t k = 0; k < idx.size(); ++k) out.data[k] = ta.data[static_cast<size_t>(idx[k])];
        return push(std::move(out), {a}, [idx](Tape& t, const Node& n) {
            Tensor g(t.val(n.parents[0]).dims);
            for (size_t k = 0; k < idx.size(); ++k)
                g.data[static_cast<size_t>(idx[k])] += n.grad.data[k];
            t.accum(n.parents[0], g);
        });
    }

    Var gather_rows(Var a, std::vector<int> rows) {
        const Tensor& ta = val(a);
        int c = ta.cols();
        Tensor out({static_cast<int>(rows.size()), c});
        for (size_t k = 0; k < rows.size(); ++k)
            for (int j = 0; j < c; ++j) out.at(static_cast<int>(k), j) = ta.at(rows[k], j);
        return push(std::move(out), {a}, [rows, c](Tape& t, const Node& n) {
            Tensor g(t.val(n.parents[0]).dims);
            for (size_t k = 0; k < rows.size(); ++k)
                for (int j = 0; j < c; ++j) g.at(rows[k], j) += n.grad.at(static_cast<int>(k), j);
            t.accum(n.parents[0], g);
        });
    }

    // Keeps flagged rows, forces the rest to exact zero.
    Var zero_rows(Var a, std::vector<bool> keep) {
        const Tensor& ta = val(a);
        if (static_cast<int>(keep.size()) != ta.rows()) throw shape_error("zero_rows: size");
        Tensor out = ta;
        for (int i = 0; i < ta.rows(); ++i)
            if (!keep[i])
                for (int j = 0; j < ta.cols(); ++j) out.at(i, j) = 0.0;
        return push(std::move(out), {a}, [keep](Tape& t, const Node& n) {
            Tensor g = n.grad;
            for (int i = 0; i < g.rows(); ++i)
                if (!keep[i])
                    for (int j = 0; j < g.cols(); ++j) g.at(i, j) = 0.0;
            t.accum(n.parents[0], g);
        });
    }

    // ---- reductions ----

    Var sum(Var a) {
        double s = 0.0;
        for (double v : val(a).data) s += v;
        return push(Tensor::scalar(s), {a}, [](Tape& t, const Node& n) {
            Tensor g(t.val(n.parents[0]).dims);
            std::fill(g.data.begin(), g.data.end(), n.grad.data[0]);
            t.accum(n.parents[0], g);
        });
    }

    Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).size())); }

    Var dot(Var a, Var b) { return sum(mul(a, b)); }

    // Stable log(sum(exp(x))) over all components.
    Var logsumexp(Var a) {
        const Tensor& ta = val(a);
        double mx = kNegInf;
        for (double v : ta.data) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : ta.data) z += std::exp(v - mx);
        return push(Tensor::scalar(mx + std::log(z)), {a}, [](Tape& t, const Node& n) {
            const Tensor& x = t.val(n.parents[0]);
            Tensor g(x.dims);
            double lse = n.val.data[0];
            for (int64_t i = 0; i < x.size(); ++i)
                g.data[i] = n.grad.data[0] * std::exp(x.data[i] - lse);
            t.accum(n.parents[0], g);
        });
    }

    // ---- domain ops ----

    Var masked_softmax(Var logits, const AdditiveMask& mask) {
        auto m = std::make_shared<const AdditiveMask>(mask);
        Tensor out = unisot::masked_softmax(val(logits), *m);
        return push(std::move(out), {logits}, [m](Tape& t, const Node& n) {
            const Tensor& y = n.val;
            Tensor g(y.dims);
            for (int i = 0; i < y.rows(); ++i) {
                double s = 0.0;
                for (int j = 0; j < y.cols(); ++j)
                    if (!m->blocked(i, j)) s += n.grad.at(i, j) * y.at(i, j);
                for (int j = 0; j < y.cols(); ++j)
                    if (!m->blocked(i, j)) g.at(i, j) = y.at(i, j) * (n.grad.at(i, j) - s);
            }
            t.accum(n.parents[0], g);
        });
    }

    // Unmasked row softmax.
    Var softmax(Var logits) {
        Tensor out = unisot::softmax_rows(val(logits));
        return push(std::move(out), {logits}, [](Tape& t, const Node& n) {
            const Tensor& y = n.val;
            Tensor g(y.dims);
            for (int i = 0; i < y.rows(); ++i) {
                double s = 0.0;
                for (int j = 0; j < y.cols(); ++j) s += n.grad.at(i, j) * y.at(i, j);
                for (int j = 0; j < y.cols(); ++j) g.at(i, j) = y.at(i, j) * (n.grad.at(i, j) - s);
            }
            t.accum(n.parents[0], g);
        });
    }

    Var layer_norm(Var x, Var gain, Var bias, double eps) {
        Tensor out = unisot::layer_norm(val(x), val(gain), val(bias), eps);
        return push(std::move(out), {x, gain, bias}, [eps](Tape& t, const Node& n_) {
            const Tensor& x = t.val(n_.parents[0]);
            const Tensor& gain = t.val(n_.parents[1]);
            int n = x.rows(), c = x.cols();
            Tensor gx(x.dims), ggain(gain.dims), gbias(gain.dims);
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
                double m1 = 0.0, m2 = 0.0;  // mean(gxhat), mean(gxhat * xhat)
                for (int j = 0; j < c; ++j) {
                    double xhat = (x.at(i, j) - mu) * inv;
                    double go = n_.grad.at(i, j);
                    ggain.at(j) += go * xhat;
                    gbias.at(j) += go;
                    double gxhat = go * gain.at(j);
                    m1 += gxhat;
                    m2 += gxhat * xhat;
                }
                m1 /= c;
                m2 /= c;
                for (int j = 0; j < c; ++j) {
                    double xhat = (x.at(i, j) - mu) * inv;
                    double gxhat = n_.grad.at(i, j) * gain.at(j);
                    gx.at(i, j) = inv * (gxhat - m1 - xhat * m2);
                }
            }
            t.accum(n_.parents[0], gx);
            t.accum(n_.parents[1], ggain);
            t.accum(n_.parents[2], gbias);
        });
    }

    // Per-row cosine similarity against a vector p. Zero-norm rows yield
    // similarity 0 and propagate no gradient; their count is reported through
    // zero_rows_seen if given.
    Var cosine_rows(Var x, Var p, int* zero_rows_seen = nullptr) {
        const Tensor &tx = val(x), &tp = val(p);
        int n = tx.rows(), c = tx.cols();
        if (tp.size() != c) throw shape_error("cosine_rows: dim mismatch");
        double pn = l2_norm(tp);
        if (pn == 0.0) throw degenerate_error("cosine_rows: zero-norm prototype");
        Tensor out({n});
        for (int i = 0; i < n; ++i) {
            double un = 0.0, d = 0.0;
            for (int j = 0; j < c; ++j) {
                un += tx.at(i, j) * tx.at(i, j);
                d += tx.at(i, j) * tp.at(j);
            }
            un = std::sqrt(un);
            if (un == 0.0) {
                if (zero_rows_seen) ++*zero_rows_seen;
                continue;
            }
            out.at(i) = d / (un * pn);
        }
        return push(std::move(out), {x, p}, [](Tape& t, const Node& n_) {
            const Tensor &x = t.val(n_.parents[0]), &p = t.val(n_.parents[1]);
            int n = x.rows(), c = x.cols();
            double pn = l2_norm(p);
            Tensor gx(x.dims), gp(p.dims);
            for (int i = 0; i < n; ++i) {
                double un = 0.0;
                for (int j = 0; j < c; ++j) un += x.at(i, j) * x.at(i, j);
                un = std::sqrt(un);
                if (un == 0.0) continue;
                double cosv = n_.val.at(i);
                double g = n_.grad.at(i);
                for (int j = 0; j < c; ++j) {
                    gx.at(i, j) += g * (p.at(j) / (un * pn) - cosv * x.at(i, j) / (un * un));
                    gp.at(j) += g * (x.at(i, j) / (un * pn) - cosv * p.at(j) / (pn * pn));
                }
            }
            t.accum(n_.parents[0], gx);
            t.accum(n_.parents[1], gp);
        });
    }

    // 3x3 convolution, stride 1, zero padding 1. x: {g,g,Ci}, w: {3,3,Ci,Co}, b: {Co}.
    Var conv3x3(Var x, Var w, Var b) {
        const Tensor &tx = val(x), &tw = val(w), &tb = val(b);
        if (tx.rank() != 3 || tw.rank() != 4) throw shape_error("conv3x3: rank");
        int gh = tx.dims[0], gw = tx.dims[1], ci = tx.dims[2];
        if (tw.dims[0] != 3 || tw.dims[1] != 3 || tw.dims[2] != ci)
            throw shape_error("conv3x3: weight dims");
        int co = tw.dims[3];
        if (tb.size() != co) throw shape_error("conv3x3: bias dims");
        Tensor out({gh, gw, co});
        auto xat = [&](int r, int c, int ch) { return tx.data[(static_cast<size_t>(r) * gw + c) * ci + ch]; };
        for (int r = 0; r < gh; ++r)
            for (int c = 0; c < gw; ++c)
                for (int o = 0; o < co; ++o) {
                    double s = tb.at(o);
                    for (int dr = -1; dr <= 1; ++dr)
                        for (int dc = -1; dc <= 1; ++dc) {
                            int rr = r + dr, cc = c + dc;
                            if (rr < 0 || rr >= gh || cc < 0 || cc >= gw) continue;
                            for (int ch = 0; ch < ci; ++ch)
                                s += xat(rr, cc, ch) *
                                     tw.data[(((static_cast<size_t>(dr + 1)) * 3 + (dc + 1)) * ci + ch) * co + o];
                        }
                    out.data[(static_cast<size_t>(r) * gw + c) * co + o] = s;
                }
        return push(std::move(out), {x, w, b}, [](Tape& t, const Node& n_) {
            const Tensor &x = t.val(n_.parents[0]), &w = t.val(n_.parents[1]);
            int gh = x.dims[0], gw = x.dims[1], ci = x.dims[2], co = w.dims[3];
            Tensor gx(x.dims), gw_(w.dims), gb(t.val(n_.parents[2]).dims);
            for (int r = 0; r < gh; ++r)
                for (int c = 0; c < gw; ++c)
                    for (int o = 0; o < co; ++o) {
                        double go = n_.grad.data[(static_cast<size_t>(r) * gw + c) * co + o];
                        gb.at(o) += go;
                        for (int dr = -1; dr <= 1; ++dr)
                            for (int dc = -1; dc <= 1; ++dc) {
                                int rr = r + dr, cc = c + dc;
                                if (rr < 0 || rr >= gh || cc < 0 || cc >= gw) continue;
                                for (int ch = 0; ch < ci; ++ch) {
                                    size_t xi = (static_cast<size_t>(rr) * gw + cc) * ci + ch;
                                    size_t wi = (((static_cast<size_t>(dr + 1)) * 3 + (dc + 1)) * ci + ch) * co + o;
                                    gx.data[xi] += go * w.data[wi];
                                    gw_.data[wi] += go * x.data[xi];
                                }
                            }
                    }
            t.accum(n_.parents[0], gx);
            t.accum(n_.parents[1], gw_);
            t.accum(n_.parents[2], gb);
        });
    }

    // ---- driver ----

    void backward(Var root) {
        if (val(root).size() != 1) throw shape_error("backward: root must be scalar");
        for (auto& n : nodes_) {
            n.grad = Tensor(n.val.dims);
        }
        nodes_[root.idx].grad.data[0] = 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.backward) n.backward(*this, n);
            if (n.sink) *n.sink += n.grad;
        }
    }

private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::vector<Var> parents;
        std::function<void(Tape&, const Node&)> backward;
        Tensor* sink = nullptr;
    };

    Var push(Tensor val, std::vector<Var> parents,
             std::function<void(Tape&, const Node&)> back, Tensor* sink = nullptr) {
        Node n;
        n.val = std::move(val);
        n.parents = std::move(parents);
        n.backward = std::move(back);
        n.sink = sink;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void accum(Var p, const Tensor& g) { nodes_[p.idx].grad += g; }

    std::vector<Node> nodes_;

    static constexpr double inv_sqrt2 = 0.7071067811865475244;
    static constexpr double inv_sqrt2pi = 0.3989422804014326779;
};

}  // namespace ad
}  // namespace unisot
