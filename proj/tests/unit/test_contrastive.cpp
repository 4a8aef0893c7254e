#include <gtest/gtest.h>

#include <cmath>
#include <deque>

#include "fedssl/contrastive.hpp"
#include "fedssl/errors.hpp"
#include "fedssl/ops.hpp"

using namespace fedssl;
using namespace fedssl::contrastive;

namespace {

std::vector<double> unit(Rng& rng, std::size_t d) {
    std::vector<double> v(d);
    double n = 0.0;
    for (double& x : v) {
        x = normal(rng);
        n += x * x;
    }
    for (double& x : v) x /= std::sqrt(n);
    return v;
}

Tensor unit_rows(Rng& rng, std::size_t rows, std::size_t d) {
    std::vector<double> all;
    for (std::size_t r = 0; r < rows; ++r) {
        auto v = unit(rng, d);
        all.insert(all.end(), v.begin(), v.end());
    }
    return Tensor({rows, d}, std::move(all));
}

// Direct evaluation of the loss from its definition, one row at a time.
double scalar_info_nce(const Tensor& q, const Tensor& k, const Tensor& n, double tau) {
    const std::size_t b = q.dim(0), d = q.dim(1), m = n.dim(0);
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<double> logits;
        double pos = 0.0;
        for (std::size_t c = 0; c < d; ++c) pos += q.at(i * d + c) * k.at(i * d + c);
        logits.push_back(pos / tau);
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) s += q.at(i * d + c) * n.at(j * d + c);
            logits.push_back(s / tau);
        }
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l);
        double z = 0.0;
        for (double l : logits) z += std::exp(l - mx);
        total += -(logits[0] - mx - std::log(z));
    }
    return total / static_cast<double>(b);
}

}  // namespace

TEST(FeatureBank, FifoMatchesReferenceQueueExhaustively) {
    Rng rng = derive_rng(1, "sampling");
    for (std::size_t k = 1; k <= 8; ++k) {
        for (std::size_t pushes = 0; pushes <= 3 * k; ++pushes) {
            FeatureBank bank(k);
            std::deque<std::uint32_t> ref;
            for (std::uint32_t i = 0; i < pushes; ++i) {
                bank.push({unit(rng, 3), i, BankTag::local});
                ref.push_back(i);
                if (ref.size() > k) ref.pop_front();
                ASSERT_EQ(bank.size(), ref.size());
                for (std::size_t j = 0; j < ref.size(); ++j) ASSERT_EQ(bank.entries()[j].origin, ref[j]);
            }
        }
    }
}

TEST(FeatureBank, RejectsNonUnitAndWidthChange) {
    FeatureBank bank(4);
    EXPECT_THROW(bank.push({{1.0, 1.0}, 0, BankTag::local}), ContractError);
    bank.push({{1.0, 0.0}, 0, BankTag::local});
    EXPECT_THROW(bank.push({{1.0, 0.0, 0.0}, 0, BankTag::local}), ShapeError);
    EXPECT_FALSE(FeatureBank(2).as_tensor().defined());
}

TEST(FeatureBank, SnapshotAnonymizes) {
    Rng rng = derive_rng(2, "sampling");
    FeatureBank bank(5);
    for (std::uint32_t i = 0; i < 4; ++i) bank.push({unit(rng, 4), i, BankTag::local});
    FeatureBank plain = decode_snapshot(encode_snapshot(bank, false), 5, BankTag::remote);
    FeatureBank anon = decode_snapshot(encode_snapshot(bank, true), 5, BankTag::remote);
    ASSERT_EQ(anon.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(plain.entries()[i].origin, i);
        EXPECT_EQ(anon.entries()[i].origin, kAnonymousOrigin);
        EXPECT_EQ(anon.entries()[i].feature, bank.entries()[i].feature);
        EXPECT_EQ(anon.entries()[i].tag, BankTag::remote);
    }
}

TEST(InfoNce, MatchesScalarOracle) {
    Rng rng = derive_rng(3, "sampling");
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t b = 1 + uniform_index(rng, 4), d = 2 + uniform_index(rng, 8);
        const std::size_t m = 1 + uniform_index(rng, 12);
        const double tau = inst == 0 ? 0.07 : uniform(rng, 0.05, 1.0);
        Tensor q = unit_rows(rng, b, d), k = unit_rows(rng, b, d), n = unit_rows(rng, m, d);
        EXPECT_NEAR(info_nce(q, k, n, tau).item(), scalar_info_nce(q, k, n, tau), 1e-10);
    }
}

TEST(InfoNce, EqualLogitsGiveLogOfCount) {
    for (std::size_t m : {1u, 4u, 9u}) {
        Tensor q({1, 2}, {1.0, 0.0});
        std::vector<double> nv;
        for (std::size_t j = 0; j < m; ++j) nv.insert(nv.end(), {1.0, 0.0});
        for (double tau : {0.07, 0.5, 2.0}) {
            EXPECT_NEAR(info_nce(q, q, Tensor({m, 2}, nv), tau).item(), std::log(static_cast<double>(m + 1)), 1e-9);
        }
    }
}

TEST(InfoNce, ContractsAndEmptyBank) {
    Tensor q({1, 2}, {1.0, 0.0});
    EXPECT_THROW(info_nce(q, q, Tensor(), 0.0), ContractError);
    EXPECT_THROW(info_nce(q, q, Tensor::zeros({2, 3}), 0.1), ShapeError);
    EXPECT_NEAR(info_nce(q, q, Tensor(), 0.1).item(), 0.0, 1e-15);
}

TEST(Momentum, ZeroCoefficientCopiesMainAndRangeIsChecked) {
    Rng rng = derive_rng(4, "init");
    DualModel dual = make_dual(nets::init_cnn(nets::CnnConfig{}, rng, true));
    for (const auto& e : dual.momentum.entries()) EXPECT_FALSE(e.tensor.requires_grad());
    for (auto& e : dual.main.entries()) {
        for (double& v : dual.main.at(e.name).mutable_data()) v += 0.5;
    }
    momentum_update(dual, 0.0);
    EXPECT_EQ(digest(dual.main), digest(dual.momentum));
    EXPECT_THROW(momentum_update(dual, 1.0), ContractError);
    EXPECT_THROW(momentum_update(dual, -0.1), ContractError);
}

TEST(Momentum, EmaFormula) {
    ParamSet main;
    main.add("w", Tensor({1}, {2.0}, true));
    DualModel dual = make_dual(main);
    dual.main.at("w").mutable_data()[0] = 4.0;
    momentum_update(dual, 0.75);
    EXPECT_DOUBLE_EQ(dual.momentum.at("w").at(0), 0.75 * 2.0 + 0.25 * 4.0);
}

TEST(RemoteBank, ExcludesSelfAndShuffles) {
    Rng rng = derive_rng(5, "sampling");
    std::map<std::uint32_t, FeatureBank> banks;
    for (std::uint32_t c = 1; c < 4; ++c) {
        FeatureBank b(6);
        for (int i = 0; i < 6; ++i) b.push({unit(rng, 3), c, BankTag::local});
        banks.emplace(c, b);
    }
    Rng srv = derive_rng(5, "server");
    FeatureBank r = build_remote_bank(banks, 0, srv);
    EXPECT_EQ(r.size(), 18u);
    EXPECT_EQ(r.count_origin(0), 0u);
    for (std::uint32_t c = 1; c < 4; ++c) EXPECT_EQ(r.count_origin(c), 6u);
    bool in_order = true;
    for (std::size_t i = 1; i < r.size(); ++i) in_order = in_order && r.entries()[i - 1].origin <= r.entries()[i].origin;
    EXPECT_FALSE(in_order);
    EXPECT_THROW(build_remote_bank(banks, 2, srv), ContractError);
}

TEST(RemoteBank, SamplingEmptyBankThrows) {
    Rng rng = derive_rng(6, "sampling");
    EXPECT_THROW(sample_remote(FeatureBank(4), 2, rng), EmptyBankError);
}

TEST(Qcl, InitialContentsAndUpdateSetsPerMode) {
    Rng rng = derive_rng(7, "sampling");
    FeatureBank local(4), remote(10);
    for (int i = 0; i < 4; ++i) local.push({unit(rng, 3), 0, BankTag::local});
    for (int i = 0; i < 10; ++i) remote.push({unit(rng, 3), 1, BankTag::remote});
    const std::vector<FeatureEntry> l = {{unit(rng, 3), 0, BankTag::local}};
    const std::vector<FeatureEntry> r = {{unit(rng, 3), 2, BankTag::remote}};

    FeatureBank none = init_qcl(local, remote, BankMode::none, 4);
    EXPECT_EQ(none.count_origin(1), 0u);
    update_qcl(none, l, r, BankMode::none);
    EXPECT_EQ(none.count_origin(2), 0u);

    FeatureBank with = init_qcl(local, remote, BankMode::with_local, 4);
    EXPECT_EQ(with.count_origin(0), 4u);
    update_qcl(with, l, r, BankMode::with_local);
    EXPECT_EQ(with.count_origin(2), 1u);
    EXPECT_EQ(with.count_origin(0), 3u);

    FeatureBank ro = init_qcl(local, remote, BankMode::remote_only, 4);
    EXPECT_EQ(ro.size(), 4u);
    EXPECT_EQ(ro.count_origin(0), 0u);
    update_qcl(ro, l, r, BankMode::remote_only);
    EXPECT_EQ(ro.count_origin(0), 0u);
    EXPECT_EQ(ro.count_origin(2), 1u);
}

TEST(LocalStep, UpdatesMainMomentumAndBanks) {
    Rng rng = derive_rng(8, "init");
    ContrastiveConfig cfg;
    cfg.bank_capacity = 8;
    cfg.mode = BankMode::with_local;
    Learner L;
    L.id = 3;
    L.model = make_dual(nets::init_cnn(L.net, rng, true));
    L.local = FeatureBank(8);
    L.remote = FeatureBank(8);
    L.qcl = FeatureBank(8);
    for (int i = 0; i < 8; ++i) L.qcl.push({unit(rng, L.net.head_out), 5, BankTag::remote});
    std::vector<std::vector<double>> imgs(4, std::vector<double>(3 * 32 * 32));
    for (auto& im : imgs) {
        for (double& v : im) v = uniform01(rng);
    }
    std::vector<std::span<const double>> views(imgs.begin(), imgs.end());
    const auto before_main = digest(L.model.main), before_mom = digest(L.model.momentum);
    Rng aug = derive_rng(8, "augment"), samp = derive_rng(8, "sampling");
    NegativeAudit audit;
    const double loss = local_cl_step(L, views, {3, 32, 32}, cfg, {&aug, &samp}, &audit);
    EXPECT_TRUE(std::isfinite(loss));
    EXPECT_NE(digest(L.model.main), before_main);
    EXPECT_NE(digest(L.model.momentum), before_mom);
    EXPECT_EQ(L.local.size(), 4u);
    EXPECT_EQ(L.local.count_origin(3), 4u);
    EXPECT_EQ(audit.evaluations, 1u);
    EXPECT_TRUE(L.opt.state().count("encoder.conv1.weight"));
}
