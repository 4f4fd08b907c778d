#pragma once

#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "autodiff.hpp"
#include "config.hpp"
#include "numerics.hpp"
#include "rama.hpp"
#include "rng.hpp"
#include "types.hpp"

namespace unisot {

// Index layout of the joint token sequence:
//   [T_l | E_l (N_l) | T_v | E_z (N_z) | E_az (N_z) | E_x (N_x) | E_ax (N_x)]
// Unavailable ranges are zero-filled and masked out of attention.
struct TokenLayout {
    int n_l = 0, n_z = 0, n_x = 0;
    int lang_used = 0;
    bool lang_avail = false;
    bool tmpl_avail = false;
    bool aux_avail = false;

    int t_l() const { return 0; }
    int e_l() const { return 1; }
    int t_v() const { return 1 + n_l; }
    int e_z() const { return 2 + n_l; }
    int e_az() const { return 2 + n_l + n_z; }
    int e_x() const { return 2 + n_l + 2 * n_z; }
    int e_ax() const { return 2 + n_l + 2 * n_z + n_x; }
    int total() const { return 2 + n_l + 2 * n_z + 2 * n_x; }

    int vision_begin() const { return t_v(); }
    int lang_len() const { return 1 + n_l; }
    int vision_len() const { return 1 + 2 * n_z + 2 * n_x; }

    static TokenLayout make(const ModelConfig& cfg, ReferenceModality ref, int lang_used,
                            bool aux_present) {
        TokenLayout lay;
        lay.n_l = cfg.max_lang_tokens;
        lay.n_z = cfg.n_z();
        lay.n_x = cfg.n_x();
        lay.lang_avail = ref != ReferenceModality::BBOX;
        lay.tmpl_avail = ref != ReferenceModality::NL;
        lay.aux_avail = aux_present;
        lay.lang_used = lay.lang_avail ? std::min(lang_used, lay.n_l) : 0;
        return lay;
    }

    // Per-token availability over the full joint sequence.
    std::vector<bool> availability() const {
        std::vector<bool> a(static_cast<size_t>(total()), false);
        a[static_cast<size_t>(t_l())] = lang_avail;
        for (int i = 0; i < lang_used; ++i) a[static_cast<size_t>(e_l() + i)] = lang_avail;
        a[static_cast<size_t>(t_v())] = true;
        for (int i = 0; i < n_z; ++i) {
            a[static_cast<size_t>(e_z() + i)] = tmpl_avail;
            a[static_cast<size_t>(e_az() + i)] = tmpl_avail && aux_avail;
        }
        for (int i = 0; i < n_x; ++i) {
            a[static_cast<size_t>(e_x() + i)] = true;
            a[static_cast<size_t>(e_ax() + i)] = aux_avail;
        }
        return a;
    }

    std::vector<int> kept_indices() const {
        std::vector<int> kept;
        auto a = availability();
        for (int i = 0; i < total(); ++i)
            if (a[static_cast<size_t>(i)]) kept.push_back(i);
        return kept;
    }
};

enum class LayerKind { shallow_lang, shallow_vision, deep };

// Attention mask for one encoder stage. The shallow kinds cover their own
// partition of the sequence; deep covers the full joint layout.
inline AdditiveMask build_attention_mask(ReferenceModality ref, const TokenLayout& lay,
                                         LayerKind kind) {
    if (ref == ReferenceModality::NL && lay.tmpl_avail)
        throw std::invalid_argument("attention mask: NL reference cannot carry a template");
    if (ref == ReferenceModality::BBOX && lay.lang_avail)
        throw std::invalid_argument("attention mask: BBOX reference cannot carry language");
    if (ref != ReferenceModality::BBOX && !lay.lang_avail)
        throw std::invalid_argument("attention mask: language reference without language range");
    auto avail = lay.availability();
    auto slice = [&](int begin, int len) {
        std::vector<bool> s(avail.begin() + begin, avail.begin() + begin + len);
        return AdditiveMask::from_availability(s, s);
    };
    switch (kind) {
        case LayerKind::shallow_lang: return slice(lay.t_l(), lay.lang_len());
        case LayerKind::shallow_vision: return slice(lay.vision_begin(), lay.vision_len());
        case LayerKind::deep: return slice(0, lay.total());
    }
    throw std::logic_error("unreachable");
}

struct LayerParams {
    Tensor Wq, bq, Wk, bk, Wv, bv, Wo, bo;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor W1, b1, W2, b2;

    static LayerParams init(int c, Rng& rng) {
        LayerParams p;
        double s = 0.02;
        p.Wq = rng.normal_tensor({c, c}, s);
        p.Wk = rng.normal_tensor({c, c}, s);
        p.Wv = rng.normal_tensor({c, c}, s);
        p.Wo = rng.normal_tensor({c, c}, s);
        p.bq = Tensor::zeros({c});
        p.bk = Tensor::zeros({c});
        p.bv = Tensor::zeros({c});
        p.bo = Tensor::zeros({c});
        p.ln1_g = Tensor::full({c}, 1.0);
        p.ln1_b = Tensor::zeros({c});
        p.ln2_g = Tensor::full({c}, 1.0);
        p.ln2_b = Tensor::zeros({c});
        p.W1 = rng.normal_tensor({c, 4 * c}, s);
        p.b1 = Tensor::zeros({4 * c});
        p.W2 = rng.normal_tensor({4 * c, c}, s);
        p.b2 = Tensor::zeros({c});
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".Wq", &Wq); f(prefix + ".bq", &bq);
        f(prefix + ".Wk", &Wk); f(prefix + ".bk", &bk);
        f(prefix + ".Wv", &Wv); f(prefix + ".bv", &bv);
        f(prefix + ".Wo", &Wo); f(prefix + ".bo", &bo);
        f(prefix + ".ln1_g", &ln1_g); f(prefix + ".ln1_b", &ln1_b);
        f(prefix + ".ln2_g", &ln2_g); f(prefix + ".ln2_b", &ln2_b);
        f(prefix + ".W1", &W1); f(prefix + ".b1", &b1);
        f(prefix + ".W2", &W2); f(prefix + ".b2", &b2);
    }
};

struct EncoderParams {
    ModelConfig cfg;
    Tensor lang_table;  // V_lang x C, row 0 reserved for padding
    Tensor lang_pos;    // N_l x C
    Tensor sem_l, sem_v;
    Tensor patch_W, patch_b;          // RGB patch projection
    Tensor aux_patch_W, aux_patch_b;  // trainable auxiliary patch projection
    Tensor pos_tmpl, pos_srch;        // shared across video modalities per image type
    std::vector<LayerParams> lang_layers, vision_layers, deep_layers;
    bool has_aux_embed = false;

    static EncoderParams init(const ModelConfig& cfg, Rng& rng) {
        EncoderParams p;
        p.cfg = cfg;
        int c = cfg.embed_dim;
        p.lang_table = rng.normal_tensor({cfg.vocab, c}, 0.02);
        for (int j = 0; j < c; ++j) p.lang_table.at(0, j) = 0.0;  // pad id
        p.lang_pos = rng.normal_tensor({cfg.max_lang_tokens, c}, 0.02);
        p.sem_l = rng.normal_tensor({1, c}, 0.02);
        p.sem_v = rng.normal_tensor({1, c}, 0.02);
        int pd = cfg.patch * cfg.patch * cfg.channels;
        p.patch_W = rng.normal_tensor({pd, c}, 0.02);
        p.patch_b = Tensor::zeros({c});
        p.pos_tmpl = rng.normal_tensor({cfg.n_z(), c}, 0.02);
        p.pos_srch = rng.normal_tensor({cfg.n_x(), c}, 0.02);
        for (int i = 0; i < cfg.shallow_layers; ++i) {
            p.lang_layers.push_back(LayerParams::init(c, rng));
            p.vision_layers.push_back(LayerParams::init(c, rng));
        }
        for (int i = 0; i < cfg.deep_layers; ++i) p.deep_layers.push_back(LayerParams::init(c, rng));
        return p;
    }

    // Stage two adds the auxiliary patch embedding, seeded from the RGB one.
    void add_aux_embed() {
        aux_patch_W = patch_W;
        aux_patch_b = patch_b;
        has_aux_embed = true;
    }

    template <typename F>
    void visit(F&& f) {
        f("enc.lang_table", &lang_table);
        f("enc.lang_pos", &lang_pos);
        f("enc.sem_l", &sem_l);
        f("enc.sem_v", &sem_v);
        f("enc.patch_W", &patch_W);
        f("enc.patch_b", &patch_b);
        f("enc.pos_tmpl", &pos_tmpl);
        f("enc.pos_srch", &pos_srch);
        for (size_t i = 0; i < lang_layers.size(); ++i)
            lang_layers[i].visit("enc.lang." + std::to_string(i), f);
        for (size_t i = 0; i < vision_layers.size(); ++i)
            vision_layers[i].visit("enc.vis." + std::to_string(i), f);
        for (size_t i = 0; i < deep_layers.size(); ++i)
            deep_layers[i].visit("enc.deep." + std::to_string(i), f);
    }

    template <typename F>
    void visit_aux(F&& f) {
        if (!has_aux_embed) return;
        f("enc.aux_patch_W", &aux_patch_W);
        f("enc.aux_patch_b", &aux_patch_b);
    }
};

// Extracts row-major p x p patches and flattens each to (py, px, channel)
// order. frame: {H, W, ch}.
inline Tensor patchify(const Tensor& frame, int p) {
    if (frame.rank() != 3) throw shape_error("patchify: frame must be H x W x ch");
    int h = frame.dims[0], w = frame.dims[1], ch = frame.dims[2];
    if (h % p != 0 || w % p != 0) throw shape_error("patchify: dims not divisible by patch");
    int gh = h / p, gw = w / p;
    Tensor out({gh * gw, p * p * ch});
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc) {
            int row = pr * gw + pc;
            int k = 0;
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int c = 0; c < ch; ++c)
                        out.at(row, k++) =
                            frame.data[((static_cast<size_t>(pr * p + py)) * w + (pc * p + px)) * ch + c];
        }
    return out;
}

enum class ImageType { tmpl, search };

// Binds parameter tensors onto a tape once each, wiring gradient sinks when a
// lookup is provided.
struct Binder {
    ad::Tape& tape;
    std::function<Tensor*(const Tensor*)> sink_lookup;
    std::map<const Tensor*, ad::Var> cache;

    ad::Var operator()(const Tensor& t) {
        auto it = cache.find(&t);
        if (it != cache.end()) return it->second;
        Tensor* sink = sink_lookup ? sink_lookup(&t) : nullptr;
        ad::Var v = tape.param(t, sink);
        cache.emplace(&t, v);
        return v;
    }
};

// Token embedding for a language id sequence; pad rows stay zero.
inline Tensor embed_language(const std::vector<int>& ids, const EncoderParams& params) {
    const ModelConfig& cfg = params.cfg;
    if (static_cast<int>(ids.size()) > cfg.max_lang_tokens)
        throw std::invalid_argument("embed_language: sentence longer than max length");
    Tensor out({cfg.max_lang_tokens, cfg.embed_dim});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= cfg.vocab)
            throw std::out_of_range("embed_language: token id out of range");
        for (int j = 0; j < cfg.embed_dim; ++j)
            out.at(static_cast<int>(i), j) =
                params.lang_table.at(ids[i], j) + params.lang_pos.at(static_cast<int>(i), j);
    }
    return out;
}

// Patch embedding with the position table of the image type; position tables
// are shared across video modalities.
inline Tensor patchify_embed(const Tensor& frame, ImageType type, VideoModality modality,
                             const EncoderParams& params) {
    const Tensor& w = modality == VideoModality::RGB ? params.patch_W : params.aux_patch_W;
    const Tensor& b = modality == VideoModality::RGB ? params.patch_b : params.aux_patch_b;
    if (modality != VideoModality::RGB && !params.has_aux_embed)
        throw std::invalid_argument("patchify_embed: auxiliary embedding not initialized");
    Tensor patches = patchify(frame, params.cfg.patch);
    Tensor e = matmul(patches, w);
    const Tensor& pos = type == ImageType::tmpl ? params.pos_tmpl : params.pos_srch;
    if (pos.rows() != e.rows()) throw shape_error("patchify_embed: position table mismatch");
    for (int i = 0; i < e.rows(); ++i)
        for (int j = 0; j < e.cols(); ++j) e.at(i, j) += b.at(j) + pos.at(i, j);
    return e;
}

// Adapter hookup for one encoder layer: which block sits on each projection
// and which video rows it fuses.
struct LayerAdapters {
    AdapterBlock* q = nullptr;
    AdapterBlock* k = nullptr;
    AdapterBlock* v = nullptr;
    AdapterBlock* mlp = nullptr;
    VideoModality aux = VideoModality::RGB;
};

// Row spans of the video ranges within the current (possibly reduced)
// sequence; -1 marks an absent range.
struct VideoRows {
    int z0 = -1, z1 = -1, az0 = -1, az1 = -1;
    int x0 = -1, x1 = -1, ax0 = -1, ax1 = -1;
};

struct AdapterSinks {
    std::function<Tensor*(const Tensor*)> lookup;  // optional grad sinks for P/Q/lambda
};

namespace detail {

// y = x W + b, with the block's incremental weights added on video rows.
inline ad::Var project(ad::Tape& t, Binder& bind, ad::Var x, const Tensor& w, const Tensor& b,
                       AdapterBlock* block, VideoModality aux, const VideoRows& rows,
                       const AdapterSinks* sinks) {
    ad::Var base = t.add_rowvec(t.matmul(x, bind(w)), bind(b));
    if (!block) return base;
    auto sink = [&](const Tensor& p) {
        return t.param(p, sinks && sinks->lookup ? sinks->lookup(&p) : nullptr);
    };
    ad::Var P = sink(block->P), Q = sink(block->Q);
    ad::Var lamR = sink(block->lam(VideoModality::RGB));
    std::optional<ad::Var> lamA;
    if (aux != VideoModality::RGB) lamA = sink(block->lam(aux));
    auto delta = [&](ad::Var in, ad::Var lam) {
        return t.matmul(t.mul_colwise(t.matmul(in, P), lam), Q);
    };
    int n = t.val(x).rows(), c_out = t.val(base).cols();
    // Assemble the incremental rows in layout order.
    std::vector<ad::Var> parts;
    int cursor = 0;
    auto push_zero_upto = [&](int row) {
        if (row > cursor) parts.push_back(t.constant(Tensor({row - cursor, c_out})));
        cursor = row;
    };
    auto fuse_pair = [&](int r0, int r1, int a0, int a1) {
        push_zero_upto(r0);
        ad::Var d = delta(t.slice_rows(x, r0, r1), lamR);
        if (a0 >= 0 && lamA) {
            ad::Var da = t.relu(delta(t.slice_rows(x, a0, a1), *lamA));
            d = t.add(d, da);
        }
        parts.push_back(d);
        cursor = r1;
    };
    auto aux_rows = [&](int a0, int a1) {
        if (a0 < 0 || !lamA) return;
        push_zero_upto(a0);
        parts.push_back(delta(t.slice_rows(x, a0, a1), *lamA));
        cursor = a1;
    };
    if (rows.z0 >= 0) fuse_pair(rows.z0, rows.z1, rows.az0, rows.az1);
    aux_rows(rows.az0, rows.az1);
    if (rows.x0 >= 0) fuse_pair(rows.x0, rows.x1, rows.ax0, rows.ax1);
    aux_rows(rows.ax0, rows.ax1);
    push_zero_upto(n);
    return t.add(base, t.concat_rows(parts));
}

}  // namespace detail

// One pre-norm encoder layer, Eq form: attention with additive mask plus
// residual, then MLP plus residual.
inline ad::Var encoder_layer(ad::Tape& t, Binder& bind, ad::Var e, const LayerParams& lp,
                             const AdditiveMask* mask, int heads,
                             const LayerAdapters* adapters = nullptr,
                             const VideoRows* rows = nullptr,
                             const AdapterSinks* sinks = nullptr) {
    int n = t.val(e).rows(), c = t.val(e).cols();
    if (mask && (mask->rows != n || mask->cols != n))
        throw shape_error("encoder_layer: mask must be square and match the sequence");
    if (c % heads != 0) throw shape_error("encoder_layer: heads must divide dim");
    int dh = c / heads;
    VideoRows none;
    const VideoRows& vr = rows ? *rows : none;
    VideoModality aux = adapters ? adapters->aux : VideoModality::RGB;

    ad::Var x = t.layer_norm(e, bind(lp.ln1_g), bind(lp.ln1_b), 1e-6);
    ad::Var q = detail::project(t, bind, x, lp.Wq, lp.bq, adapters ? adapters->q : nullptr, aux, vr, sinks);
    ad::Var k = detail::project(t, bind, x, lp.Wk, lp.bk, adapters ? adapters->k : nullptr, aux, vr, sinks);
    ad::Var v = detail::project(t, bind, x, lp.Wv, lp.bv, adapters ? adapters->v : nullptr, aux, vr, sinks);

    std::vector<ad::Var> head_outs;
    for (int h = 0; h < heads; ++h) {
        ad::Var qh = t.slice_cols(q, h * dh, (h + 1) * dh);
        ad::Var kh = t.slice_cols(k, h * dh, (h + 1) * dh);
        ad::Var vh = t.slice_cols(v, h * dh, (h + 1) * dh);
        ad::Var scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        ad::Var attn = mask ? t.masked_softmax(scores, *mask) : t.softmax(scores);
        head_outs.push_back(t.matmul(attn, vh));
    }
    ad::Var concat = heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
    ad::Var attn_out = t.add_rowvec(t.matmul(concat, bind(lp.Wo)), bind(lp.bo));
    ad::Var e_hat = t.add(e, attn_out);

    ad::Var y = t.layer_norm(e_hat, bind(lp.ln2_g), bind(lp.ln2_b), 1e-6);
    ad::Var hidden = t.gelu(detail::project(t, bind, y, lp.W1, lp.b1,
                                            adapters ? adapters->mlp : nullptr, aux, vr, sinks));
    ad::Var mlp_out = t.add_rowvec(t.matmul(hidden, bind(lp.W2)), bind(lp.b2));
    return t.add(e_hat, mlp_out);
}

// Pure single-layer forward for tests and reduced-sequence oracles.
inline Tensor encoder_layer_forward(const Tensor& e, const AdditiveMask& mask,
                                    const LayerParams& lp, int heads) {
    ad::Tape t;
    Binder bind{t, nullptr, {}};
    return t.val(encoder_layer(t, bind, t.constant(e), lp, &mask, heads));
}

// Semantic-token selection by reference modality.
inline Tensor semantic_token(const Tensor& t_l, const Tensor& t_v, ReferenceModality ref) {
    switch (ref) {
        case ReferenceModality::NL: return t_l;
        case ReferenceModality::BBOX: return t_v;
        case ReferenceModality::NL_BBOX: {
            Tensor out = t_l;
            for (int64_t i = 0; i < out.size(); ++i)
                out.data[i] = (out.data[i] + t_v.data[i]) / 2.0;
            return out;
        }
    }
    throw std::logic_error("unreachable");
}

struct EncoderInputs {
    ReferenceModality ref = ReferenceModality::BBOX;
    std::vector<int> lang_ids;
    Tensor tmpl_rgb, search_rgb;  // {H, W, ch}; tmpl empty for NL
    Tensor tmpl_aux, search_aux;  // empty when no auxiliary modality
    VideoModality aux = VideoModality::RGB;
};

// Handles into a tape-resident encoder forward.
struct EncoderForward {
    TokenLayout layout;
    bool reduced = false;
    std::vector<int> kept;  // joint indices present in the working sequence
    std::vector<ad::Var> t_l_layers, t_v_layers;  // {1,C} per layer, zero when absent
    std::vector<ad::Var> e_x_layers;              // {N_x,C} per layer
    ad::Var e_z_final;  // valid iff layout.tmpl_avail
    ad::Var e_x_final;
    ad::Var t_sem;      // per-reference semantic token at the last layer, {1,C}
    ad::Var joint_padded;  // full layout with zeros on unavailable ranges
};

// Full reference-generalized feature extraction on a tape. With reduce=true
// the unavailable ranges are dropped and attention runs unmasked; the padded
// masked form is the reference semantics and both agree on surviving rows.
inline EncoderForward encoder_forward(ad::Tape& t, Binder& bind, const EncoderParams& params,
                                      const EncoderInputs& in, bool reduce,
                                      const std::vector<AdapterBlock*>& layer_blocks = {},
                                      const AdapterSinks* sinks = nullptr) {
    const ModelConfig& cfg = params.cfg;
    int c = cfg.embed_dim;
    bool aux_present = in.aux != VideoModality::RGB;
    if (aux_present && !params.has_aux_embed)
        throw std::invalid_argument("encoder_forward: auxiliary modality without aux embedding");
    if (aux_present != !in.search_aux.data.empty())
        throw std::invalid_argument("encoder_forward: auxiliary frames inconsistent with modality");
    TokenLayout lay =
        TokenLayout::make(cfg, in.ref, static_cast<int>(in.lang_ids.size()), aux_present);
    EncoderForward out;
    out.layout = lay;
    out.reduced = reduce;
    out.kept = reduce ? lay.kept_indices() : [&] {
        std::vector<int> all(static_cast<size_t>(lay.total()));
        for (int i = 0; i < lay.total(); ++i) all[static_cast<size_t>(i)] = i;
        return all;
    }();

    // ---- initial embeddings ----
    ad::Var zero_row = t.constant(Tensor({1, c}));
    ad::Var t_l0 = lay.lang_avail ? bind(params.sem_l) : zero_row;
    ad::Var t_v0 = bind(params.sem_v);

    ad::Var e_l0;  // lang_used x C (reduced) or N_l x C (padded)
    if (lay.lang_avail && lay.lang_used > 0) {
        std::vector<int> rows = in.lang_ids;
        for (int id : rows)
            if (id < 0 || id >= cfg.vocab) throw std::out_of_range("language id out of range");
        std::vector<int> pos_rows(rows.size());
        for (size_t i = 0; i < rows.size(); ++i) pos_rows[i] = static_cast<int>(i);
        e_l0 = t.add(t.gather_rows(bind(params.lang_table), rows),
                     t.gather_rows(bind(params.lang_pos), pos_rows));
    }

    auto embed_image = [&](const Tensor& frame, ImageType type, bool aux_mod) {
        Tensor patches = patchify(frame, cfg.patch);
        const Tensor& w = aux_mod ? params.aux_patch_W : params.patch_W;
        const Tensor& b = aux_mod ? params.aux_patch_b : params.patch_b;
        const Tensor& pos = type == ImageType::tmpl ? params.pos_tmpl : params.pos_srch;
        ad::Var e = t.add_rowvec(t.matmul(t.constant(patches), bind(w)), bind(b));
        return t.add(e, bind(pos));
    };

    ad::Var e_z0, e_az0, e_x0, e_ax0;
    if (lay.tmpl_avail) {
        e_z0 = embed_image(in.tmpl_rgb, ImageType::tmpl, false);
        if (lay.aux_avail) e_az0 = embed_image(in.tmpl_aux, ImageType::tmpl, true);
    }
    e_x0 = embed_image(in.search_rgb, ImageType::search, false);
    if (lay.aux_avail) e_ax0 = embed_image(in.search_aux, ImageType::search, true);

    // ---- working sequences ----
    auto zeros = [&](int n) { return t.constant(Tensor({n, c})); };

    // Vision partition in working form plus its range rows.
    std::vector<ad::Var> vparts;
    VideoRows vrows;
    int cur = 1;  // row 0 is T_v
    vparts.push_back(t_v0);
    auto add_range = [&](ad::Var v, int len, int& r0, int& r1, bool present) {
        if (!present) {
            if (!reduce) {
                vparts.push_back(zeros(len));
                cur += len;
            }
            return;
        }
        vparts.push_back(v);
        r0 = cur;
        r1 = cur + len;
        cur += len;
    };
    add_range(e_z0, lay.n_z, vrows.z0, vrows.z1, lay.tmpl_avail);
    add_range(e_az0, lay.n_z, vrows.az0, vrows.az1, lay.tmpl_avail && lay.aux_avail);
    add_range(e_x0, lay.n_x, vrows.x0, vrows.x1, true);
    add_range(e_ax0, lay.n_x, vrows.ax0, vrows.ax1, lay.aux_avail);
    ad::Var vision = t.concat_rows(vparts);

    bool run_lang = lay.lang_avail || !reduce;
    ad::Var lang;
    int lang_rows = 0;
    if (run_lang) {
        std::vector<ad::Var> lparts{t_l0};
        if (lay.lang_used > 0) lparts.push_back(e_l0);
        if (!reduce && lay.n_l - lay.lang_used > 0) lparts.push_back(zeros(lay.n_l - lay.lang_used));
        lang = t.concat_rows(lparts);
        lang_rows = t.val(lang).rows();
    }

    // Availability vectors for padded masking / zero forcing.
    auto avail = lay.availability();
    std::vector<bool> lang_avail_rows(avail.begin(), avail.begin() + lay.lang_len());
    std::vector<bool> vis_avail_rows(avail.begin() + lay.vision_begin(), avail.end());

    AdditiveMask mask_lang, mask_vis, mask_deep;
    if (!reduce) {
        mask_lang = build_attention_mask(in.ref, lay, LayerKind::shallow_lang);
        mask_vis = build_attention_mask(in.ref, lay, LayerKind::shallow_vision);
        mask_deep = build_attention_mask(in.ref, lay, LayerKind::deep);
    }

    auto record = [&](ad::Var lang_seq, bool lang_live, ad::Var vis_seq, int vis_tv_row,
                      int ex_row0) {
        out.t_l_layers.push_back(lang_live ? t.slice_rows(lang_seq, 0, 1) : zero_row);
        out.t_v_layers.push_back(t.slice_rows(vis_seq, vis_tv_row, vis_tv_row + 1));
        out.e_x_layers.push_back(t.slice_rows(vis_seq, ex_row0, ex_row0 + lay.n_x));
    };

    // ---- shallow stacks ----
    for (int i = 0; i < cfg.shallow_layers; ++i) {
        if (run_lang) {
            lang = encoder_layer(t, bind, lang, params.lang_layers[static_cast<size_t>(i)],
                                 reduce ? nullptr : &mask_lang, cfg.heads);
            if (!reduce) lang = t.zero_rows(lang, lang_avail_rows);
        }
        vision = encoder_layer(t, bind, vision, params.vision_layers[static_cast<size_t>(i)],
                               reduce ? nullptr : &mask_vis, cfg.heads);
        if (!reduce) vision = t.zero_rows(vision, vis_avail_rows);
        int ex0 = reduce ? vrows.x0 : 1 + 2 * lay.n_z;
        record(lang, lay.lang_avail, vision, 0, ex0);
    }

    // ---- joint deep stack ----
    ad::Var joint;
    int tv_row, ex_row, ez_row;
    VideoRows jrows = vrows;  // offset by the language rows below
    if (run_lang) {
        joint = t.concat_rows({lang, vision});
        int off = lang_rows;
        tv_row = off;
        auto shift = [off](int r) { return r < 0 ? r : r + off; };
        jrows = {shift(vrows.z0), shift(vrows.z1), shift(vrows.az0), shift(vrows.az1),
                 shift(vrows.x0), shift(vrows.x1), shift(vrows.ax0), shift(vrows.ax1)};
    } else {
        joint = vision;
        tv_row = 0;
    }
    ex_row = jrows.x0;
    ez_row = jrows.z0;

    std::vector<bool> joint_avail = avail;  // padded case only
    for (int i = 0; i < cfg.deep_layers; ++i) {
        const LayerParams& lp = params.deep_layers[static_cast<size_t>(i)];
        LayerAdapters la;
        const LayerAdapters* lap = nullptr;
        if (!layer_blocks.empty()) {
            la.aux = in.aux;
            for (AdapterBlock* b : layer_blocks)
                if (b && b->site.layer == i) {
                    switch (b->site.proj) {
                        case AdapterSite::Proj::query: la.q = b; break;
                        case AdapterSite::Proj::key: la.k = b; break;
                        case AdapterSite::Proj::value: la.v = b; break;
                        case AdapterSite::Proj::mlp_in: la.mlp = b; break;
                    }
                }
            lap = &la;
        }
        joint = encoder_layer(t, bind, joint, lp, reduce ? nullptr : &mask_deep, cfg.heads, lap,
                              &jrows, sinks);
        if (!reduce) joint = t.zero_rows(joint, joint_avail);
        ad::Var tl = lay.lang_avail ? t.slice_rows(joint, 0, 1) : zero_row;
        out.t_l_layers.push_back(tl);
        out.t_v_layers.push_back(t.slice_rows(joint, tv_row, tv_row + 1));
        out.e_x_layers.push_back(t.slice_rows(joint, ex_row, ex_row + lay.n_x));
    }

    out.e_x_final = out.e_x_layers.back();
    if (lay.tmpl_avail) out.e_z_final = t.slice_rows(joint, ez_row, ez_row + lay.n_z);

    ad::Var tl = out.t_l_layers.back(), tv = out.t_v_layers.back();
    switch (in.ref) {
        case ReferenceModality::NL: out.t_sem = tl; break;
        case ReferenceModality::BBOX: out.t_sem = tv; break;
        case ReferenceModality::NL_BBOX: out.t_sem = t.scale(t.add(tl, tv), 0.5); break;
    }

    // Padded final joint: scatter the working rows back into the full layout.
    if (!reduce) {
        out.joint_padded = joint;
    } else {
        std::vector<ad::Var> parts;
        int full_cur = 0;
        auto push_span = [&](ad::Var seq, int row0, int row1, int full0) {
            if (full0 > full_cur) parts.push_back(zeros(full0 - full_cur));
            parts.push_back(t.slice_rows(seq, row0, row1));
            full_cur = full0 + (row1 - row0);
        };
        if (lay.lang_avail) push_span(joint, 0, 1 + lay.lang_used, lay.t_l());
        push_span(joint, tv_row, tv_row + 1, lay.t_v());
        if (jrows.z0 >= 0) push_span(joint, jrows.z0, jrows.z1, lay.e_z());
        if (jrows.az0 >= 0) push_span(joint, jrows.az0, jrows.az1, lay.e_az());
        push_span(joint, jrows.x0, jrows.x1, lay.e_x());
        if (jrows.ax0 >= 0) push_span(joint, jrows.ax0, jrows.ax1, lay.e_ax());
        if (lay.total() > full_cur) parts.push_back(zeros(lay.total() - full_cur));
        out.joint_padded = t.concat_rows(parts);
    }
    return out;
}

// Value-level feature extraction: the joint sequence with zero-filled
// unavailable ranges plus the per-layer semantic tokens.
struct EmbeddingSet {
    Tensor joint;
    TokenLayout layout;
    std::vector<Tensor> t_l_layers, t_v_layers;
};

inline EmbeddingSet extract_features(const EncoderParams& params, const EncoderInputs& in,
                                     bool reduce = true,
                                     const std::vector<AdapterBlock*>& blocks = {}) {
    ad::Tape t;
    Binder bind{t, nullptr, {}};
    EncoderForward f = encoder_forward(t, bind, params, in, reduce, blocks);
    EmbeddingSet set;
    set.layout = f.layout;
    set.joint = t.val(f.joint_padded);
    for (size_t i = 0; i < f.t_l_layers.size(); ++i) {
        set.t_l_layers.push_back(t.val(f.t_l_layers[i]));
        set.t_v_layers.push_back(t.val(f.t_v_layers[i]));
    }
    return set;
}

}  // namespace unisot
