#include <gtest/gtest.h>

#include "unisot/encoder.hpp"
#include "unisot/rng.hpp"

using namespace unisot;

namespace {

ModelConfig toy() { return ModelConfig{}; }

EncoderParams make_params(uint64_t seed = 42) {
    Rng rng(seed);
    return EncoderParams::init(toy(), rng);
}

Tensor frame(int side, int ch, Rng& rng) { return rng.uniform_tensor({side, side, ch}, 0.0, 1.0); }

EncoderInputs make_inputs(ReferenceModality ref, Rng& rng, bool aux = false) {
    ModelConfig cfg = toy();
    EncoderInputs in;
    in.ref = ref;
    if (ref != ReferenceModality::BBOX) in.lang_ids = {3, 9, 14};
    if (ref != ReferenceModality::NL) in.tmpl_rgb = frame(cfg.template_size, cfg.channels, rng);
    in.search_rgb = frame(cfg.search_size, cfg.channels, rng);
    if (aux) {
        in.aux = VideoModality::THERMAL;
        if (ref != ReferenceModality::NL) in.tmpl_aux = frame(cfg.template_size, cfg.channels, rng);
        in.search_aux = frame(cfg.search_size, cfg.channels, rng);
    }
    return in;
}

}  // namespace

TEST(EmbedLanguage, EmptyIsAllZero) {
    EncoderParams p = make_params();
    Tensor e = embed_language({}, p);
    for (double v : e.data) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(EmbedLanguage, SingleTokenRow) {
    EncoderParams p = make_params();
    Tensor e = embed_language({3}, p);
    for (int j = 0; j < p.cfg.embed_dim; ++j)
        EXPECT_DOUBLE_EQ(e.at(0, j), p.lang_table.at(3, j) + p.lang_pos.at(0, j));
    for (int i = 1; i < p.cfg.max_lang_tokens; ++i)
        for (int j = 0; j < p.cfg.embed_dim; ++j) EXPECT_DOUBLE_EQ(e.at(i, j), 0.0);
}

TEST(EmbedLanguage, RepeatedTokenDiffersByPosition) {
    EncoderParams p = make_params();
    Tensor e = embed_language({3, 3}, p);
    for (int j = 0; j < p.cfg.embed_dim; ++j)
        EXPECT_NEAR(e.at(0, j) - e.at(1, j), p.lang_pos.at(0, j) - p.lang_pos.at(1, j), 1e-12);
}

TEST(EmbedLanguage, OutOfRangeThrows) {
    EncoderParams p = make_params();
    EXPECT_THROW(embed_language({p.cfg.vocab}, p), std::out_of_range);
}

TEST(PatchifyEmbed, ZeroFrameGivesPositionEmbeddings) {
    EncoderParams p = make_params();
    p.patch_b = Tensor::zeros({p.cfg.embed_dim});
    Tensor z = Tensor::zeros({p.cfg.template_size, p.cfg.template_size, p.cfg.channels});
    Tensor e = patchify_embed(z, ImageType::tmpl, VideoModality::RGB, p);
    EXPECT_LE(e.max_abs_diff(p.pos_tmpl), 1e-12);
}

TEST(PatchifyEmbed, RowMajorPatchOrder) {
    ModelConfig cfg = toy();
    int p = cfg.patch;
    Rng rng(5);
    Tensor f = rng.uniform_tensor({2 * p, 2 * p, cfg.channels}, 0.0, 1.0);
    Tensor patches = patchify(f, p);
    ASSERT_EQ(patches.rows(), 4);
    // manual slice of patch (row 1, col 0): flat order (py, px, ch)
    int k = 0;
    for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
            for (int c = 0; c < cfg.channels; ++c) {
                double expect = f.data[((static_cast<size_t>(p + py)) * 2 * p + px) * cfg.channels + c];
                EXPECT_DOUBLE_EQ(patches.at(2, k), expect);
                ++k;
            }
}

TEST(PatchifyEmbed, TemplateVsSearchDifferByPositionOnly) {
    EncoderParams p = make_params();
    // same spatial size for both types so the projection output matches
    ModelConfig cfg = p.cfg;
    cfg.template_size = cfg.search_size;
    EncoderParams q = p;
    q.cfg = cfg;
    Rng rng(6);
    q.pos_tmpl = rng.normal_tensor({cfg.n_z(), cfg.embed_dim}, 0.02);
    q.pos_srch = rng.normal_tensor({cfg.n_x(), cfg.embed_dim}, 0.02);
    Tensor f = rng.uniform_tensor({cfg.search_size, cfg.search_size, cfg.channels}, 0.0, 1.0);
    Tensor ez = patchify_embed(f, ImageType::tmpl, VideoModality::RGB, q);
    Tensor ex = patchify_embed(f, ImageType::search, VideoModality::RGB, q);
    for (int i = 0; i < ez.rows(); ++i)
        for (int j = 0; j < ez.cols(); ++j)
            EXPECT_NEAR(ez.at(i, j) - ex.at(i, j), q.pos_tmpl.at(i, j) - q.pos_srch.at(i, j),
                        1e-12);
}

TEST(PatchifyEmbed, NonDivisibleThrows) {
    EncoderParams p = make_params();
    Tensor f = Tensor::zeros({p.cfg.patch * 2 + 1, p.cfg.patch * 2, p.cfg.channels});
    EXPECT_THROW(patchify(f, p.cfg.patch), shape_error);
}

TEST(AttentionMask, BboxDeepBlocksLanguage) {
    ModelConfig cfg = toy();
    TokenLayout lay = TokenLayout::make(cfg, ReferenceModality::BBOX, 0, false);
    AdditiveMask m = build_attention_mask(ReferenceModality::BBOX, lay, LayerKind::deep);
    // every language row and column blocked
    for (int q = lay.t_l(); q < lay.t_v(); ++q) {
        for (int k = 0; k < lay.total(); ++k) {
            EXPECT_TRUE(m.blocked(q, k));
            EXPECT_TRUE(m.blocked(k, q));
        }
    }
    // template <-> search fully open
    EXPECT_FALSE(m.blocked(lay.e_z(), lay.e_x()));
    EXPECT_FALSE(m.blocked(lay.t_v(), lay.e_z() + 3));
}

TEST(AttentionMask, NlDeepBlocksTemplate) {
    ModelConfig cfg = toy();
    TokenLayout lay = TokenLayout::make(cfg, ReferenceModality::NL, 3, false);
    AdditiveMask m = build_attention_mask(ReferenceModality::NL, lay, LayerKind::deep);
    for (int q = lay.e_z(); q < lay.e_x(); ++q) {
        for (int k = 0; k < lay.total(); ++k) {
            EXPECT_TRUE(m.blocked(q, k));
            EXPECT_TRUE(m.blocked(k, q));
        }
    }
    EXPECT_FALSE(m.blocked(lay.t_l(), lay.e_x()));      // language attends search
    EXPECT_FALSE(m.blocked(lay.e_l(), lay.e_l() + 1));  // language attends language
}

TEST(AttentionMask, NlBboxDeepOpenOnAvailable) {
    ModelConfig cfg = toy();
    TokenLayout lay = TokenLayout::make(cfg, ReferenceModality::NL_BBOX, 3, false);
    AdditiveMask m = build_attention_mask(ReferenceModality::NL_BBOX, lay, LayerKind::deep);
    auto avail = lay.availability();
    for (int q = 0; q < lay.total(); ++q)
        for (int k = 0; k < lay.total(); ++k)
            if (avail[q] && avail[k]) EXPECT_FALSE(m.blocked(q, k));
}

TEST(AttentionMask, InconsistentAvailabilityThrows) {
    ModelConfig cfg = toy();
    TokenLayout lay = TokenLayout::make(cfg, ReferenceModality::NL_BBOX, 3, false);
    EXPECT_THROW(build_attention_mask(ReferenceModality::BBOX, lay, LayerKind::deep),
                 std::invalid_argument);
}

TEST(EncoderLayer, ShapeContract) {
    Rng rng(7);
    LayerParams lp = LayerParams::init(16, rng);
    Tensor e = rng.normal_tensor({10, 16}, 1.0);
    Tensor out = encoder_layer_forward(e, AdditiveMask::open(10, 10), lp, 2);
    EXPECT_EQ(out.dims, e.dims);
}

TEST(EncoderLayer, ZeroWeightsActAsIdentity) {
    Rng rng(8);
    LayerParams lp = LayerParams::init(16, rng);
    lp.Wq = Tensor::zeros({16, 16});
    lp.Wk = lp.Wq; lp.Wv = lp.Wq; lp.Wo = lp.Wq;
    lp.W1 = Tensor::zeros({16, 64});
    lp.W2 = Tensor::zeros({64, 16});
    lp.b1 = Tensor::zeros({64});
    lp.b2 = Tensor::zeros({16});
    lp.bq = lp.bk = lp.bv = lp.bo = Tensor::zeros({16});
    Tensor e = rng.normal_tensor({6, 16}, 1.0);
    Tensor out = encoder_layer_forward(e, AdditiveMask::open(6, 6), lp, 2);
    EXPECT_LE(out.max_abs_diff(e), 1e-12);
}

TEST(EncoderLayer, SingleAvailableTokenMatchesReducedForward) {
    Rng rng(9);
    LayerParams lp = LayerParams::init(16, rng);
    Tensor e = rng.normal_tensor({5, 16}, 1.0);
    std::vector<bool> avail = {false, false, true, false, false};
    AdditiveMask m = AdditiveMask::from_availability(avail, avail);
    Tensor full = encoder_layer_forward(e, m, lp, 2);
    Tensor one({1, 16});
    for (int j = 0; j < 16; ++j) one.at(0, j) = e.at(2, j);
    Tensor red = encoder_layer_forward(one, AdditiveMask::open(1, 1), lp, 2);
    for (int j = 0; j < 16; ++j) EXPECT_NEAR(full.at(2, j), red.at(0, j), 1e-12);
}

TEST(EncoderLayer, HeadPermutationInvariance) {
    Rng rng(10);
    int c = 16, dh = 8;
    LayerParams lp = LayerParams::init(c, rng);
    lp.bq = rng.normal_tensor({c}, 0.1);
    lp.bk = rng.normal_tensor({c}, 0.1);
    lp.bv = rng.normal_tensor({c}, 0.1);
    LayerParams swapped = lp;
    auto swap_col_blocks = [&](Tensor& t) {
        for (int i = 0; i < t.rows(); ++i)
            for (int j = 0; j < dh; ++j) std::swap(t.at(i, j), t.at(i, j + dh));
    };
    auto swap_vec_blocks = [&](Tensor& t) {
        for (int j = 0; j < dh; ++j) std::swap(t.at(j), t.at(j + dh));
    };
    swap_col_blocks(swapped.Wq);
    swap_col_blocks(swapped.Wk);
    swap_col_blocks(swapped.Wv);
    swap_vec_blocks(swapped.bq);
    swap_vec_blocks(swapped.bk);
    swap_vec_blocks(swapped.bv);
    for (int j = 0; j < swapped.Wo.cols(); ++j)  // rows of Wo follow the concat order
        for (int i = 0; i < dh; ++i) std::swap(swapped.Wo.at(i, j), swapped.Wo.at(i + dh, j));
    Rng drng(11);
    Tensor e = drng.normal_tensor({9, c}, 1.0);
    Tensor a = encoder_layer_forward(e, AdditiveMask::open(9, 9), lp, 2);
    Tensor b = encoder_layer_forward(e, AdditiveMask::open(9, 9), swapped, 2);
    EXPECT_LE(a.max_abs_diff(b), 1e-12);
}

TEST(SemanticToken, SelectionRules) {
    Tensor tl = Tensor::row({2, 0}), tv = Tensor::row({0, 2});
    Tensor both = semantic_token(tl, tv, ReferenceModality::NL_BBOX);
    EXPECT_DOUBLE_EQ(both.at(0), 1.0);
    EXPECT_DOUBLE_EQ(both.at(1), 1.0);
    EXPECT_LE(semantic_token(tl, tv, ReferenceModality::BBOX).max_abs_diff(tv), 0.0);
    EXPECT_LE(semantic_token(tl, tv, ReferenceModality::NL).max_abs_diff(tl), 0.0);
}

TEST(ExtractFeatures, BboxKeepsLanguageRangesZero) {
    EncoderParams p = make_params();
    Rng rng(12);
    EncoderInputs in = make_inputs(ReferenceModality::BBOX, rng);
    EmbeddingSet set = extract_features(p, in, /*reduce=*/false);
    const TokenLayout& lay = set.layout;
    for (int i = lay.t_l(); i < lay.t_v(); ++i)
        for (int j = 0; j < p.cfg.embed_dim; ++j) EXPECT_DOUBLE_EQ(set.joint.at(i, j), 0.0);
}

TEST(ExtractFeatures, NlKeepsTemplateRangesZero) {
    EncoderParams p = make_params();
    Rng rng(13);
    EncoderInputs in = make_inputs(ReferenceModality::NL, rng);
    EmbeddingSet set = extract_features(p, in, /*reduce=*/false);
    const TokenLayout& lay = set.layout;
    for (int i = lay.e_z(); i < lay.e_x(); ++i)
        for (int j = 0; j < p.cfg.embed_dim; ++j) EXPECT_DOUBLE_EQ(set.joint.at(i, j), 0.0);
}

TEST(ExtractFeatures, MaskedEqualsPrunedAllReferences) {
    for (uint64_t seed : {21ULL, 22ULL, 23ULL}) {
        EncoderParams p = make_params(seed);
        for (auto ref : {ReferenceModality::BBOX, ReferenceModality::NL,
                         ReferenceModality::NL_BBOX}) {
            Rng rng(seed * 100 + static_cast<uint64_t>(ref));
            EncoderInputs in = make_inputs(ref, rng);
            EmbeddingSet padded = extract_features(p, in, false);
            EmbeddingSet reduced = extract_features(p, in, true);
            EXPECT_LE(padded.joint.max_abs_diff(reduced.joint), 1e-10);
            for (size_t l = 0; l < padded.t_l_layers.size(); ++l) {
                EXPECT_LE(padded.t_l_layers[l].max_abs_diff(reduced.t_l_layers[l]), 1e-10);
                EXPECT_LE(padded.t_v_layers[l].max_abs_diff(reduced.t_v_layers[l]), 1e-10);
            }
        }
    }
}

TEST(ExtractFeatures, MaskedEqualsPrunedWithAuxiliary) {
    EncoderParams p = make_params(31);
    p.add_aux_embed();
    Rng rng(32);
    EncoderInputs in = make_inputs(ReferenceModality::NL_BBOX, rng, /*aux=*/true);
    Rng brng(33);
    std::vector<AdapterBlock> blocks;
    blocks.push_back(AdapterBlock::make(0, {0, AdapterSite::Proj::query}, p.deep_layers[0].Wq, 4, brng));
    blocks.push_back(AdapterBlock::make(1, {1, AdapterSite::Proj::mlp_in}, p.deep_layers[1].W1, 4, brng));
    for (auto& b : blocks)
        for (auto& l : b.lambda) l = brng.normal_tensor({4}, 0.5);
    std::vector<AdapterBlock*> ptrs{&blocks[0], &blocks[1]};
    EmbeddingSet padded = extract_features(p, in, false, ptrs);
    EmbeddingSet reduced = extract_features(p, in, true, ptrs);
    EXPECT_LE(padded.joint.max_abs_diff(reduced.joint), 1e-10);
}

TEST(ExtractFeatures, ZeroLambdaAdaptersMatchAdapterFree) {
    EncoderParams p = make_params(41);
    p.add_aux_embed();
    Rng rng(42);
    EncoderInputs in = make_inputs(ReferenceModality::BBOX, rng, /*aux=*/true);
    Rng brng(43);
    std::vector<AdapterBlock> blocks;
    blocks.push_back(AdapterBlock::make(0, {0, AdapterSite::Proj::value}, p.deep_layers[0].Wv, 4, brng));
    std::vector<AdapterBlock*> ptrs{&blocks[0]};
    EmbeddingSet with = extract_features(p, in, true, ptrs);
    EmbeddingSet without = extract_features(p, in, true, {});
    EXPECT_LE(with.joint.max_abs_diff(without.joint), 0.0);
}
