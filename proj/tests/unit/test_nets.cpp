#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fedssl/errors.hpp"
#include "fedssl/nets.hpp"
#include "fedssl/ops.hpp"

using namespace fedssl;

namespace {

nets::VitConfig tiny_vit() {
    nets::VitConfig c;
    c.height = c.width = 16;
    c.patch = 4;
    c.embed_dim = 8;
    c.heads = 2;
    c.depth = 2;
    c.mlp_ratio = 2;
    c.decoder_dim = 8;
    c.decoder_heads = 2;
    c.decoder_depth = 1;
    return c;
}

Tensor rand_images(std::size_t b, std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
    std::vector<double> v(b * c * h * w);
    for (double& x : v) x = uniform01(rng);
    return Tensor({b, c, h, w}, std::move(v));
}

}  // namespace

TEST(Cnn, ShapesAndUnitNormProjection) {
    Rng rng = derive_rng(1, "init");
    nets::CnnConfig cfg;
    ParamSet p = nets::init_cnn(cfg, rng, true);
    Tensor x = rand_images(3, 3, 32, 32, rng);
    Tensor f = nets::cnn_features(p, cfg, x);
    EXPECT_EQ(f.shape(), (Shape{3, cfg.feature_dim()}));
    Tensor z = nets::cnn_forward(p, cfg, x, true);
    ASSERT_EQ(z.shape(), (Shape{3, cfg.head_out}));
    for (std::size_t r = 0; r < 3; ++r) {
        double n = 0.0;
        for (std::size_t c = 0; c < cfg.head_out; ++c) n += z.at(r * cfg.head_out + c) * z.at(r * cfg.head_out + c);
        EXPECT_NEAR(n, 1.0, 1e-12);
    }
}

TEST(Cnn, ZeroImageGivesFiniteUnitFeature) {
    Rng rng = derive_rng(2, "init");
    nets::CnnConfig cfg;
    ParamSet p = nets::init_cnn(cfg, rng, true);
    Tensor z = nets::cnn_forward(p, cfg, Tensor::zeros({1, 3, 32, 32}), true);
    Tensor z2 = nets::cnn_forward(p, cfg, Tensor::zeros({1, 3, 32, 32}), true);
    double n = 0.0;
    for (std::size_t i = 0; i < z.numel(); ++i) {
        ASSERT_TRUE(std::isfinite(z.at(i)));
        EXPECT_EQ(z.at(i), z2.at(i));
        n += z.at(i) * z.at(i);
    }
    EXPECT_NEAR(n, 1.0, 1e-12);
}

TEST(Cnn, WrongChannelCountIsShapeError) {
    Rng rng = derive_rng(3, "init");
    nets::CnnConfig cfg;
    ParamSet p = nets::init_cnn(cfg, rng, false);
    EXPECT_THROW(nets::cnn_features(p, cfg, Tensor::zeros({1, 1, 32, 32})), ShapeError);
    EXPECT_FALSE(p.contains("head.fc1.weight"));
}

TEST(Vit, PatchifyRoundTrip) {
    Rng rng = derive_rng(4, "init");
    Tensor x = rand_images(2, 3, 16, 16, rng);
    Tensor p = nets::patchify(x, 4);
    ASSERT_EQ(p.shape(), (Shape{2, 16, 48}));
    Tensor y = nets::unpatchify(p, 3, 16, 16, 4);
    for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(x.at(i), y.at(i));
    EXPECT_THROW(nets::patchify(x, 5), ShapeError);
}

TEST(Vit, ConfigValidation) {
    nets::VitConfig c = tiny_vit();
    c.heads = 3;
    EXPECT_THROW(c.validate(), ShapeError);
    c = tiny_vit();
    c.patch = 5;
    EXPECT_THROW(c.validate(), ShapeError);
}

TEST(Vit, SubsetEncoderAgreesWithFullOnAllPatches) {
    Rng rng = derive_rng(5, "init");
    const auto cfg = tiny_vit();
    ParamSet p = nets::init_mae(cfg, rng);
    Tensor patches = nets::patchify(rand_images(2, 3, 16, 16, rng), 4);
    nets::IndexLists all(2, std::vector<std::size_t>(16));
    for (auto& l : all) std::iota(l.begin(), l.end(), 0);
    Tensor a = nets::vit_encode(p, cfg, patches, all);
    Tensor b = nets::vit_encode_full(p, cfg, patches);
    ASSERT_EQ(a.shape(), b.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
}

TEST(Vit, PermutationEquivariance) {
    // Permuting the (patch, index) pairs permutes the patch states and leaves
    // the class-token state unchanged.
    Rng rng = derive_rng(6, "init");
    const auto cfg = tiny_vit();
    ParamSet p = nets::init_mae(cfg, rng);
    Tensor all = nets::patchify(rand_images(1, 3, 16, 16, rng), 4);
    const std::vector<std::size_t> idx = {1, 4, 7, 11, 14};
    const std::vector<std::size_t> perm = {3, 0, 4, 2, 1};
    std::vector<std::size_t> pidx;
    for (std::size_t k : perm) pidx.push_back(idx[k]);
    const std::size_t d = cfg.patch_dim();
    Tensor flat = ops::reshape(all, {16, d});
    Tensor v1 = ops::reshape(ops::gather_rows(flat, idx), {1, 5, d});
    Tensor v2 = ops::reshape(ops::gather_rows(flat, pidx), {1, 5, d});
    Tensor s1 = nets::encode_tokens(p, cfg, v1, {idx});
    Tensor s2 = nets::encode_tokens(p, cfg, v2, {pidx});
    const std::size_t e = cfg.embed_dim;
    for (std::size_t c = 0; c < e; ++c) EXPECT_NEAR(s1.at(c), s2.at(c), 1e-12);
    for (std::size_t j = 0; j < perm.size(); ++j) {
        for (std::size_t c = 0; c < e; ++c) {
            EXPECT_NEAR(s2.at((1 + j) * e + c), s1.at((1 + perm[j]) * e + c), 1e-12);
        }
    }
}

TEST(Vit, IndexContract) {
    Rng rng = derive_rng(7, "init");
    const auto cfg = tiny_vit();
    ParamSet p = nets::init_mae(cfg, rng);
    Tensor v = Tensor::zeros({1, 2, cfg.patch_dim()});
    EXPECT_THROW(nets::vit_encode(p, cfg, v, {{3, 1}}), IndexError);
    EXPECT_THROW(nets::vit_encode(p, cfg, v, {{1, 16}}), IndexError);
    EXPECT_THROW(nets::encode_tokens(p, cfg, v, {{2, 2}}), IndexError);
}

TEST(Vit, DecoderWithNothingVisibleUsesMaskTokens) {
    Rng rng = derive_rng(8, "init");
    const auto cfg = tiny_vit();
    ParamSet p = nets::init_mae(cfg, rng);
    Tensor out = nets::vit_decode(p, cfg, Tensor(), {{}, {}}, 2);
    ASSERT_EQ(out.shape(), (Shape{2, 16, cfg.patch_dim()}));
    // both images see identical decoder inputs
    const std::size_t half = out.numel() / 2;
    for (std::size_t i = 0; i < half; ++i) {
        ASSERT_TRUE(std::isfinite(out.at(i)));
        EXPECT_EQ(out.at(i), out.at(half + i));
    }
}

TEST(Vit, ClassTokenIsLocalByDefault) {
    Rng rng = derive_rng(9, "init");
    ParamSet p = nets::init_mae(tiny_vit(), rng);
    EXPECT_EQ(p.tag("encoder.cls_token"), Knowledge::local);
    for (const auto& e : p.entries()) {
        if (e.name != "encoder.cls_token") {
            EXPECT_EQ(e.tag, Knowledge::global) << e.name;
        }
    }
}

TEST(Classifier, ZeroInitGivesUniformLogits) {
    Rng rng = derive_rng(10, "init");
    ParamSet h = nets::init_classifier(4, 3, rng, true);
    Tensor z = nets::classify(h, Tensor::full({2, 4}, 1.0));
    for (std::size_t i = 0; i < z.numel(); ++i) EXPECT_EQ(z.at(i), 0.0);
}
