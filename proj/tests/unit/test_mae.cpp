#include <gtest/gtest.h>

#include <cmath>

#include "fedssl/errors.hpp"
#include "fedssl/mae.hpp"
#include "fedssl/ops.hpp"

using namespace fedssl;

namespace {

nets::VitConfig tiny_vit() {
    nets::VitConfig c;
    c.height = c.width = 16;
    c.patch = 4;
    c.embed_dim = 8;
    c.heads = 2;
    c.depth = 1;
    c.mlp_ratio = 2;
    c.decoder_dim = 8;
    c.decoder_heads = 2;
    c.decoder_depth = 1;
    return c;
}

}  // namespace

TEST(Mask, ExactCountDisjointSortedCover) {
    Rng rng = derive_rng(1, "masks");
    for (std::size_t n : {2u, 5u, 16u, 49u}) {
        for (double r : {0.25, 0.5, 0.75}) {
            const auto expect = static_cast<std::size_t>(std::llround(r * static_cast<double>(n)));
            if (expect == 0 || expect == n) continue;
            for (int t = 0; t < 50; ++t) {
                const auto m = mae::make_mask(n, r, rng);
                ASSERT_EQ(m.masked.size(), expect);
                ASSERT_EQ(m.visible.size() + m.masked.size(), n);
                ASSERT_TRUE(std::is_sorted(m.masked.begin(), m.masked.end()));
                ASSERT_TRUE(std::is_sorted(m.visible.begin(), m.visible.end()));
                std::vector<int> seen(n, 0);
                for (auto i : m.masked) ++seen[i];
                for (auto i : m.visible) ++seen[i];
                for (int s : seen) ASSERT_EQ(s, 1);
            }
        }
    }
}

TEST(Mask, PerIndexFrequencyWithinThreeSigma) {
    Rng rng = derive_rng(2, "masks");
    const std::size_t n = 16, draws = 10000;
    const double r = 0.75;
    std::vector<double> hits(n, 0.0);
    for (std::size_t t = 0; t < draws; ++t) {
        for (auto i : mae::make_mask(n, r, rng).masked) hits[i] += 1.0;
    }
    const double sigma = std::sqrt(r * (1.0 - r) / static_cast<double>(draws));
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(hits[i] / draws, r, 3.0 * sigma) << "index " << i;
}

TEST(Mask, ContractsAndDegenerateRatios) {
    Rng rng = derive_rng(3, "masks");
    EXPECT_THROW(mae::make_mask(16, 0.0, rng), ContractError);
    EXPECT_THROW(mae::make_mask(16, 1.0, rng), ContractError);
    EXPECT_THROW(mae::make_mask(1, 0.5, rng), ContractError);
    EXPECT_THROW(mae::make_mask(4, 0.1, rng), DegenerateMaskError);
    EXPECT_THROW(mae::make_mask(4, 0.95, rng), DegenerateMaskError);
}

TEST(Reconstruction, ScopesDifferAsDefined) {
    // error only on patch 0 of a 2-patch image
    Tensor recon({1, 2, 2}, {1.0, 1.0, 0.0, 0.0});
    Tensor target = Tensor::zeros({1, 2, 2});
    mae::MaskPlan plan;
    plan.num_patches = 2;
    plan.masked = {0};
    plan.visible = {1};
    EXPECT_DOUBLE_EQ(mae::reconstruction_loss(recon, target, {plan}, mae::LossScope::full).item(), 0.5);
    EXPECT_DOUBLE_EQ(mae::reconstruction_loss(recon, target, {plan}, mae::LossScope::masked).item(), 1.0);
    plan.masked = {1};
    plan.visible = {0};
    EXPECT_DOUBLE_EQ(mae::reconstruction_loss(recon, target, {plan}, mae::LossScope::masked).item(), 0.0);
    plan.masked.clear();
    plan.visible = {0, 1};
    EXPECT_THROW(mae::reconstruction_loss(recon, target, {plan}, mae::LossScope::masked), DegenerateMaskError);
}

TEST(MaeLoss, EncoderSeesOnlyVisiblePatches) {
    Rng rng = derive_rng(4, "init");
    const auto cfg = tiny_vit();
    ParamSet p = nets::init_mae(cfg, rng);
    std::vector<double> px(2 * 3 * 16 * 16);
    for (double& v : px) v = uniform01(rng);
    Tensor x({2, 3, 16, 16}, px);
    Rng mrng = derive_rng(4, "masks");
    std::vector<mae::MaskPlan> plans = {mae::make_mask(16, 0.75, mrng), mae::make_mask(16, 0.75, mrng)};
    nets::IndexLists seen;
    mae::EncoderTrace trace = [&](const nets::IndexLists& idx) { seen = idx; };
    Tensor loss = mae::mae_loss(p, cfg, x, plans, mae::LossScope::full, &trace);
    EXPECT_TRUE(std::isfinite(loss.item()));
    ASSERT_EQ(seen.size(), 2u);
    EXPECT_EQ(seen[0], plans[0].visible);
    EXPECT_EQ(seen[1], plans[1].visible);
    loss.backward();
    EXPECT_TRUE(p.at("decoder.mask_token").has_grad());
}

TEST(MaeEpoch, ZeroEpochsIsNoOpAndTrainingReducesLoss) {
    Rng rng = derive_rng(6, "init");
    mae::MaeConfig cfg;
    cfg.vit = tiny_vit();
    cfg.batch = 4;
    ParamSet p = nets::init_mae(cfg.vit, rng);
    data::SynthSpec spec;
    spec.height = spec.width = 16;
    spec.num_clients = 1;
    spec.samples_per_client = 20;
    const auto part = data::generate(spec, 6);
    const auto& shard = part.clients[0];
    const auto train = shard.indices(data::Split::train);
    OptimizerConfig oc;
    oc.kind = OptimizerConfig::Kind::adam;
    oc.lr = 3e-3;
    Optimizer opt(oc);
    Rng s = derive_rng(6, "sampling"), a = derive_rng(6, "augment"), m = derive_rng(6, "masks");
    const auto d0 = digest(p);
    EXPECT_TRUE(mae::mae_local_epoch(p, opt, cfg, shard, train, 0, {&s, &a, &m}).empty());
    EXPECT_EQ(digest(p), d0);
    const auto losses = mae::mae_local_epoch(p, opt, cfg, shard, train, 30, {&s, &a, &m});
    ASSERT_EQ(losses.size(), 30u * 3u);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 9; ++i) {
        first += losses[i];
        last += losses[losses.size() - 1 - i];
    }
    EXPECT_LT(last, first);
}
