#pragma once

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "types.hpp"

namespace unisot {

// Cross-batch EMA of parameter sensitivity and its uncertainty, kept per
// parameter tensor with matching shape.
struct ImportanceState {
    Tensor ibar;  // smoothed sensitivity
    Tensor ubar;  // smoothed |ibar - I|
    int64_t step = 0;

    explicit ImportanceState(std::vector<int> dims = {})
        : ibar(Tensor::zeros(dims)), ubar(Tensor::zeros(dims)) {}
};

inline double sensitivity(double w, double grad) { return std::fabs(w * grad); }

inline Tensor sensitivity(const Tensor& w, const Tensor& grad) {
    if (!w.same_shape(grad)) throw shape_error("sensitivity: shape mismatch");
    Tensor out(w.dims);
    for (int64_t i = 0; i < w.size(); ++i) out.data[i] = std::fabs(w.data[i] * grad.data[i]);
    return out;
}

inline void update_importance(ImportanceState& st, const Tensor& sens, double beta1,
                              double beta2) {
    if (!st.ibar.same_shape(sens)) throw shape_error("update_importance: shape mismatch");
    ++st.step;
    for (int64_t i = 0; i < sens.size(); ++i) {
        st.ibar.data[i] = beta1 * st.ibar.data[i] + (1.0 - beta1) * sens.data[i];
        st.ubar.data[i] =
            beta2 * st.ubar.data[i] + (1.0 - beta2) * std::fabs(st.ibar.data[i] - sens.data[i]);
    }
}

inline Tensor importance_score(const ImportanceState& st) {
    if (st.step < 1) throw std::logic_error("importance_score: state never updated");
    Tensor s(st.ibar.dims);
    for (int64_t i = 0; i < s.size(); ++i) s.data[i] = st.ibar.data[i] * st.ubar.data[i];
    return s;
}

// Which dense layer a tuning block is attached to.
struct AdapterSite {
    enum class Proj { query, key, value, mlp_in };
    int layer = 0;  // deep-layer index (or global layer index when shallow adapted)
    Proj proj = Proj::query;

    std::string name() const {
        static const char* p[] = {"q", "k", "v", "mlp"};
        return "layer" + std::to_string(layer) + "." + p[static_cast<int>(proj)];
    }
};

// One auxiliary modality tuning block: a frozen dense weight plus an SVD-form
// incremental weight P * diag(lambda^a) * Q with per-video-modality singular
// values. P/Q are shared across modalities.
struct AdapterBlock {
    int index = 0;
    AdapterSite site;
    Tensor W;  // frozen base, d_in x d_out
    Tensor P;  // d_in x r
    Tensor Q;  // r x d_out
    std::array<Tensor, 4> lambda;     // indexed by VideoModality, each length r
    std::vector<bool> shared_alive;   // tuple mask from the last shared allocation

    int rank() const { return P.cols(); }
    int d_in() const { return P.rows(); }
    int d_out() const { return Q.cols(); }

    const Tensor& lam(VideoModality a) const { return lambda[static_cast<size_t>(modality_index(a))]; }
    Tensor& lam(VideoModality a) { return lambda[static_cast<size_t>(modality_index(a))]; }

    static AdapterBlock make(int index, AdapterSite site, const Tensor& base, int r, Rng& rng) {
        AdapterBlock b;
        b.index = index;
        b.site = site;
        b.W = base;
        int din = base.rows(), dout = base.cols();
        b.P = rng.normal_tensor({din, r}, 0.02);
        b.Q = rng.normal_tensor({r, dout}, 0.02);
        for (auto& l : b.lambda) l = Tensor::zeros({r});  // adapters start disabled
        b.shared_alive.assign(static_cast<size_t>(r), true);
        return b;
    }
};

// Tape form of the block forward. e_a is the absent optional for RGB-only
// inputs. Output: E_R W + E_R P diag(l^R) Q + ReLU(E_a P diag(l^a) Q).
inline ad::Var amtb_forward(ad::Tape& t, ad::Var e_r, std::optional<ad::Var> e_a, ad::Var w,
                            ad::Var p, ad::Var q, ad::Var lam_r, ad::Var lam_a) {
    ad::Var out = t.add(t.matmul(e_r, w), t.matmul(t.mul_colwise(t.matmul(e_r, p), lam_r), q));
    if (e_a) {
        ad::Var aux = t.relu(t.matmul(t.mul_colwise(t.matmul(*e_a, p), lam_a), q));
        out = t.add(out, aux);
    }
    return out;
}

inline Tensor amtb_forward(const Tensor& e_r, const Tensor* e_a, const AdapterBlock& block,
                           VideoModality a) {
    if (e_a && a == VideoModality::RGB)
        throw std::invalid_argument("amtb_forward: auxiliary input requires a non-RGB modality");
    ad::Tape t;
    std::optional<ad::Var> ea;
    if (e_a) ea = t.constant(*e_a);
    ad::Var out = amtb_forward(t, t.constant(e_r), ea, t.constant(block.W), t.constant(block.P),
                               t.constant(block.Q), t.constant(block.lam(VideoModality::RGB)),
                               t.constant(block.lam(a)));
    return t.val(out);
}

// Importance bookkeeping for the trainable tensors of one block.
struct BlockImportance {
    ImportanceState P, Q;
    std::array<ImportanceState, 4> lambda;

    explicit BlockImportance(const AdapterBlock& b)
        : P(b.P.dims), Q(b.Q.dims),
          lambda{ImportanceState(b.lambda[0].dims), ImportanceState(b.lambda[1].dims),
                 ImportanceState(b.lambda[2].dims), ImportanceState(b.lambda[3].dims)} {}
};

struct TupleScore {
    int block = 0;
    int tuple = 0;
    double score = 0.0;
};

struct SpecificScore {
    int block = 0;
    int tuple = 0;
    int modality = 0;  // VideoModality index
    double score = 0.0;
};

// Modality-shared importance of every (block, tuple): the four singular-value
// scores plus the mean column score of P and mean row score of Q.
inline std::vector<TupleScore> shared_importance(const std::vector<AdapterBlock>& blocks,
                                                 const std::vector<BlockImportance>& states) {
    if (blocks.size() != states.size()) throw shape_error("shared_importance: state count");
    std::vector<TupleScore> out;
    for (size_t k = 0; k < blocks.size(); ++k) {
        const AdapterBlock& b = blocks[k];
        Tensor sP = importance_score(states[k].P);
        Tensor sQ = importance_score(states[k].Q);
        std::array<Tensor, 4> sL;
        for (int a = 0; a < 4; ++a) sL[static_cast<size_t>(a)] = importance_score(states[k].lambda[static_cast<size_t>(a)]);
        int din = b.d_in(), dout = b.d_out(), r = b.rank();
        for (int i = 0; i < r; ++i) {
            double s = 0.0;
            for (int a = 0; a < 4; ++a) s += sL[static_cast<size_t>(a)].at(i);
            double mp = 0.0;
            for (int j = 0; j < din; ++j) mp += sP.at(j, i);
            s += mp / din;
            double mq = 0.0;
            for (int j = 0; j < dout; ++j) mq += sQ.at(i, j);
            s += mq / dout;
            out.push_back({static_cast<int>(k), i, s});
        }
    }
    return out;
}

// Keeps the global top-n tuples; all four lambda entries of the others are
// zeroed (masked, not deleted). Ties break toward ascending (block, tuple).
inline void allocate_shared(std::vector<AdapterBlock>& blocks, std::vector<TupleScore> scores,
                            int n) {
    std::stable_sort(scores.begin(), scores.end(), [](const TupleScore& a, const TupleScore& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.block != b.block) return a.block < b.block;
        return a.tuple < b.tuple;
    });
    for (auto& b : blocks) b.shared_alive.assign(static_cast<size_t>(b.rank()), false);
    for (size_t s = 0; s < scores.size() && s < static_cast<size_t>(n); ++s)
        blocks[static_cast<size_t>(scores[s].block)].shared_alive[static_cast<size_t>(scores[s].tuple)] = true;
    for (auto& b : blocks)
        for (int i = 0; i < b.rank(); ++i)
            if (!b.shared_alive[static_cast<size_t>(i)])
                for (auto& l : b.lambda) l.at(i) = 0.0;
}

// Modality-specific importance of surviving tuples, one score per modality.
inline std::vector<SpecificScore> specific_importance(const std::vector<AdapterBlock>& blocks,
                                                      const std::vector<BlockImportance>& states) {
    std::vector<SpecificScore> out;
    for (size_t k = 0; k < blocks.size(); ++k) {
        const AdapterBlock& b = blocks[k];
        Tensor sP = importance_score(states[k].P);
        Tensor sQ = importance_score(states[k].Q);
        int din = b.d_in(), dout = b.d_out(), r = b.rank();
        for (int i = 0; i < r; ++i) {
            if (!b.shared_alive[static_cast<size_t>(i)]) continue;
            double mp = 0.0;
            for (int j = 0; j < din; ++j) mp += sP.at(j, i);
            mp /= din;
            double mq = 0.0;
            for (int j = 0; j < dout; ++j) mq += sQ.at(i, j);
            mq /= dout;
            for (int a = 0; a < 4; ++a) {
                double sl = importance_score(states[k].lambda[static_cast<size_t>(a)]).at(i);
                out.push_back({static_cast<int>(k), i, a, sl + mp + mq});
            }
        }
    }
    return out;
}

// Keeps the global top-m (tuple, modality) singular values among surviving
// tuples. Ties break by (block, tuple, modality) with modality order R,D,T,E.
inline void allocate_specific(std::vector<AdapterBlock>& blocks,
                              std::vector<SpecificScore> scores, int m) {
    std::stable_sort(scores.begin(), scores.end(),
                     [](const SpecificScore& a, const SpecificScore& b) {
                         if (a.score != b.score) return a.score > b.score;
                         if (a.block != b.block) return a.block < b.block;
                         if (a.tuple != b.tuple) return a.tuple < b.tuple;
                         return a.modality < b.modality;
                     });
    std::vector<std::array<bool, 4>> keep;  // flattened per (block,tuple)
    std::vector<int> base(blocks.size() + 1, 0);
    for (size_t k = 0; k < blocks.size(); ++k) base[k + 1] = base[k] + blocks[k].rank();
    keep.assign(static_cast<size_t>(base.back()), {false, false, false, false});
    for (size_t s = 0; s < scores.size() && s < static_cast<size_t>(m); ++s)
        keep[static_cast<size_t>(base[static_cast<size_t>(scores[s].block)] + scores[s].tuple)]
            [static_cast<size_t>(scores[s].modality)] = true;
    for (size_t k = 0; k < blocks.size(); ++k) {
        AdapterBlock& b = blocks[k];
        for (int i = 0; i < b.rank(); ++i) {
            if (!b.shared_alive[static_cast<size_t>(i)]) continue;
            for (int a = 0; a < 4; ++a)
                if (!keep[static_cast<size_t>(base[k] + i)][static_cast<size_t>(a)])
                    b.lambda[static_cast<size_t>(a)].at(i) = 0.0;
        }
    }
}

// Drops tuple i when both lambda^R_i and lambda^a_i are zero. The compact
// block computes the same function for the modality pair (RGB, a).
inline AdapterBlock prune_block(const AdapterBlock& block, VideoModality a) {
    std::vector<int> kept;
    for (int i = 0; i < block.rank(); ++i)
        if (block.lam(VideoModality::RGB).at(i) != 0.0 || block.lam(a).at(i) != 0.0)
            kept.push_back(i);
    AdapterBlock out;
    out.index = block.index;
    out.site = block.site;
    out.W = block.W;
    int r2 = static_cast<int>(kept.size());
    out.P = Tensor({block.d_in(), r2});
    out.Q = Tensor({r2, block.d_out()});
    for (auto& l : out.lambda) l = Tensor::zeros({r2});
    for (int ni = 0; ni < r2; ++ni) {
        int i = kept[static_cast<size_t>(ni)];
        for (int j = 0; j < block.d_in(); ++j) out.P.at(j, ni) = block.P.at(j, i);
        for (int j = 0; j < block.d_out(); ++j) out.Q.at(ni, j) = block.Q.at(i, j);
        for (int m = 0; m < 4; ++m) out.lambda[static_cast<size_t>(m)].at(ni) = block.lambda[static_cast<size_t>(m)].at(i);
    }
    out.shared_alive.assign(static_cast<size_t>(r2), true);
    return out;
}

struct RankBudget {
    int n_hat = 4;
    int m_hat = 8;
    int n_blocks = 0;

    int n() const { return n_hat * n_blocks; }
    int m() const { return m_hat * n_blocks; }

    void validate(int rank) const {
        if (n() > rank * n_blocks) throw std::invalid_argument("rank budget: n exceeds tuples");
        if (m() > 4 * n()) throw std::invalid_argument("rank budget: m exceeds 4n candidates");
    }
};

struct AllocationSchedule {
    int warmup_steps = 200;
    int alloc_interval = 100;
};

// Shared-then-specific allocation runs on this cadence.
inline bool allocation_due(int step, const AllocationSchedule& cfg) {
    return step >= cfg.warmup_steps && cfg.alloc_interval > 0 && step % cfg.alloc_interval == 0;
}

}  // namespace unisot
