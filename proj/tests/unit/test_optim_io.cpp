#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "fedssl/errors.hpp"
#include "fedssl/optim.hpp"
#include "fedssl/param_set.hpp"
#include "fedssl/rng.hpp"
#include "fedssl/serialize.hpp"

using namespace fedssl;

namespace {

ParamSet scalar_param(double v) {
    ParamSet p;
    p.add("w", Tensor({1}, {v}, true));
    return p;
}

void set_grad(ParamSet& p, double g) {
    p.zero_grad();
    p.at("w").node()->accumulate(0, g);
}

}  // namespace

TEST(Optim, SgdSingleStep) {
    OptimizerConfig cfg;
    cfg.lr = 0.1;
    cfg.momentum = 0.0;
    Optimizer opt(cfg);
    ParamSet p = scalar_param(1.0);
    set_grad(p, 1.0);
    opt.step(p);
    EXPECT_DOUBLE_EQ(p.at("w").at(0), 0.9);
}

TEST(Optim, AdamMatchesScalarRollout) {
    OptimizerConfig cfg;
    cfg.kind = OptimizerConfig::Kind::adam;
    cfg.lr = 0.01;
    Optimizer opt(cfg);
    ParamSet p = scalar_param(0.5);
    double theta = 0.5, m = 0.0, v = 0.0;
    const std::vector<double> grads = {0.3, -1.2, 0.7, 0.05, -0.4, 2.0};
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        const double g = grads[t - 1];
        set_grad(p, g);
        opt.step(p);
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1.0 - std::pow(0.9, static_cast<double>(t)));
        const double vh = v / (1.0 - std::pow(0.999, static_cast<double>(t)));
        theta -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
        EXPECT_NEAR(p.at("w").at(0), theta, 1e-14) << "step " << t;
    }
    EXPECT_EQ(opt.step_count(), static_cast<std::int64_t>(grads.size()));
}

TEST(Optim, SgdMomentumRollout) {
    OptimizerConfig cfg;
    cfg.lr = 0.1;
    cfg.momentum = 0.9;
    Optimizer opt(cfg);
    ParamSet p = scalar_param(1.0);
    double theta = 1.0, buf = 0.0;
    for (double g : {1.0, 0.5, -0.25}) {
        set_grad(p, g);
        opt.step(p);
        buf = 0.9 * buf + g;
        theta -= 0.1 * buf;
        EXPECT_NEAR(p.at("w").at(0), theta, 1e-15);
    }
}

TEST(Optim, MissingGradLeavesParamsUntouched) {
    Optimizer opt(OptimizerConfig{});
    ParamSet p = scalar_param(1.0);
    p.add("v", Tensor({1}, {2.0}, true));
    p.at("w").node()->accumulate(0, 1.0);
    EXPECT_THROW(opt.step(p), MissingGradError);
    EXPECT_EQ(p.at("w").at(0), 1.0);
    EXPECT_TRUE(opt.state().empty());
}

TEST(Optim, FrozenParamsHaveNoState) {
    Optimizer opt(OptimizerConfig{});
    ParamSet p = scalar_param(1.0);
    p.add("frozen", Tensor({1}, {2.0}, false));
    set_grad(p, 1.0);
    opt.step(p);
    EXPECT_EQ(opt.state().count("frozen"), 0u);
    EXPECT_EQ(p.at("frozen").at(0), 2.0);
}

TEST(Optim, CosineSchedule) {
    EXPECT_DOUBLE_EQ(cosine_lr(0.1, 0, 10), 0.1);
    EXPECT_NEAR(cosine_lr(0.1, 5, 10), 0.05, 1e-15);
    EXPECT_NEAR(cosine_lr(0.1, 10, 10), 0.0, 1e-15);
    EXPECT_THROW(cosine_lr(0.1, 11, 10), ContractError);
    EXPECT_THROW(cosine_lr(0.1, 0, 0), ContractError);
}

TEST(Serialize, CheckpointRoundTripIsBitwise) {
    Rng rng = derive_rng(5, "init");
    ParamSet p;
    p.add("encoder.a", Tensor({2, 3}, {1.5, -2.0, 1e-300, normal(rng), normal(rng), -0.0}, true));
    p.add("decoder.b", Tensor({4}, {normal(rng), normal(rng), normal(rng), normal(rng)}, true));
    const io::Bytes bytes = io::encode_checkpoint(p);
    ParamSet q = io::decode_checkpoint(bytes);
    ASSERT_EQ(q.names(), p.names());
    EXPECT_EQ(digest(q), digest(p));
    EXPECT_EQ(io::encode_checkpoint(q), bytes);
}

TEST(Serialize, RejectsCorruptInput) {
    ParamSet p = scalar_param(1.0);
    io::Bytes bytes = io::encode_checkpoint(p);
    io::Bytes truncated(bytes.begin(), bytes.end() - 3);
    EXPECT_THROW(io::decode_checkpoint(truncated), FormatError);
    io::Bytes bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(io::decode_checkpoint(bad), FormatError);
}

TEST(Serialize, FileRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "fedssl_test_ckpt.bin";
    ParamSet p = scalar_param(3.25);
    io::save_checkpoint(path, p);
    EXPECT_EQ(digest(io::load_checkpoint(path)), digest(p));
    std::filesystem::remove(path);
}

TEST(ParamSet, SchemaMismatchNamesParameter) {
    ParamSet a = scalar_param(1.0), b;
    b.add("w", Tensor({2}, {1.0, 2.0}));
    try {
        require_same_schema(a, b);
        FAIL();
    } catch (const SchemaError& e) {
        EXPECT_NE(std::string(e.what()).find("w"), std::string::npos);
    }
}

TEST(Rng, StreamsAreIndependentAndReproducible) {
    Rng a = derive_rng(1, "data", 0, 0), b = derive_rng(1, "data", 0, 0);
    Rng c = derive_rng(1, "data", 1, 0), d = derive_rng(1, "masks", 0, 0);
    const auto va = a(), vb = b(), vc = c(), vd = d();
    EXPECT_EQ(va, vb);
    EXPECT_NE(va, vc);
    EXPECT_NE(va, vd);
}

TEST(Rng, UniformIndexInRangeAndCoversAll) {
    Rng r = derive_rng(2, "sampling");
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 7000; ++i) {
        const auto k = uniform_index(r, 7);
        ASSERT_LT(k, 7u);
        ++hits[k];
    }
    for (int h : hits) EXPECT_GT(h, 800);
}
