#include <gtest/gtest.h>

#include <cmath>

#include "fedssl/errors.hpp"
#include "fedssl/ops.hpp"
#include "fedssl/rng.hpp"
#include "fedssl/tensor.hpp"

using namespace fedssl;

namespace {

Tensor randn(const Shape& s, Rng& rng, bool grad = false) {
    std::vector<double> v(shape_numel(s));
    for (double& x : v) x = normal(rng);
    return Tensor(s, std::move(v), grad);
}

}  // namespace

TEST(Tensor, ConstructionChecksSize) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
    Tensor t({2, 3}, std::vector<double>(6, 1.0));
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.rank(), 2u);
}

TEST(Tensor, CopiesAliasAndCloneIsDeep) {
    Tensor a({2}, {1.0, 2.0});
    Tensor b = a;
    b.mutable_data()[0] = 5.0;
    EXPECT_EQ(a.at(0), 5.0);
    Tensor c = a.clone();
    c.mutable_data()[0] = 7.0;
    EXPECT_EQ(a.at(0), 5.0);
}

TEST(Tensor, BroadcastAddShapes) {
    Tensor a = Tensor::full({2, 3}, 1.0);
    Tensor b({3}, {1.0, 2.0, 3.0});
    Tensor c = ops::add(a, b);
    ASSERT_EQ(c.shape(), (Shape{2, 3}));
    EXPECT_EQ(c.at(5), 4.0);
    EXPECT_THROW(ops::add(a, Tensor::zeros({2})), ShapeError);
}

TEST(Tensor, ShapeErrorNamesBothShapes) {
    try {
        ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("(2,3)"), std::string::npos) << msg;
        EXPECT_NE(msg.find("(4,5)"), std::string::npos) << msg;
    }
}

TEST(Tensor, GradientAccumulatesOverReuse) {
    Tensor x({3}, {1.0, 2.0, 3.0}, true);
    Tensor y = ops::sum(ops::add(ops::mul(x, x), x));  // d/dx = 2x + 1
    y.backward();
    ASSERT_TRUE(x.has_grad());
    EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 7.0);
}

TEST(Tensor, BackwardReleasesGraph) {
    Tensor x({2}, {1.0, 2.0}, true);
    Tensor y = ops::sum(ops::square(x));
    EXPECT_GT(Tape::record(y).size(), 1u);
    y.backward();
    EXPECT_EQ(Tape::record(y).size(), 0u);
}

TEST(Tensor, NoGradGuardRecordsNothing) {
    Tensor x({2}, {1.0, 2.0}, true);
    Tensor y;
    {
        NoGradGuard g;
        EXPECT_FALSE(grad_enabled());
        y = ops::sum(ops::square(x));
    }
    EXPECT_TRUE(grad_enabled());
    EXPECT_FALSE(y.requires_grad());
    EXPECT_EQ(Tape::record(y).size(), 0u);
}

TEST(Tensor, BackwardOnConstantIsNoOp) {
    Tensor c = Tensor::scalar(3.0);
    EXPECT_NO_THROW(c.backward());
    EXPECT_FALSE(c.has_grad());
}

TEST(Tensor, DetachCutsHistory) {
    Tensor x({2}, {1.0, 2.0}, true);
    Tensor y = ops::mul(ops::square(x).detach(), x);
    ops::sum(y).backward();
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);  // only the undetached factor
}

TEST(Ops, MatmulMatchesLoops) {
    Rng rng = derive_rng(7, "init");
    Tensor a = randn({3, 4}, rng), b = randn({4, 2}, rng);
    Tensor c = ops::matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 4; ++k) s += a.at(i * 4 + k) * b.at(k * 2 + j);
            EXPECT_NEAR(c.at(i * 2 + j), s, 1e-12);
        }
    }
}

TEST(Ops, Conv2dMatchesDirectSum) {
    Rng rng = derive_rng(3, "init");
    for (std::size_t stride : {1u, 2u}) {
        for (std::size_t pad : {0u, 1u}) {
            const std::size_t B = 2, C = 2, H = 5, W = 6, O = 3, K = 3;
            Tensor x = randn({B, C, H, W}, rng), w = randn({O, C, K, K}, rng), bias = randn({O}, rng);
            Tensor y = ops::conv2d(x, w, bias, stride, pad);
            const std::size_t OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;
            ASSERT_EQ(y.shape(), (Shape{B, O, OH, OW}));
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t o = 0; o < O; ++o) {
                    for (std::size_t i = 0; i < OH; ++i) {
                        for (std::size_t j = 0; j < OW; ++j) {
                            double s = bias.at(o);
                            for (std::size_t c = 0; c < C; ++c) {
                                for (std::size_t ki = 0; ki < K; ++ki) {
                                    for (std::size_t kj = 0; kj < K; ++kj) {
                                        const long r = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                                        const long q = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                                        if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W))
                                            continue;
                                        s += x.at(((b * C + c) * H + r) * W + q) * w.at(((o * C + c) * K + ki) * K + kj);
                                    }
                                }
                            }
                            EXPECT_NEAR(y.at(((b * O + o) * OH + i) * OW + j), s, 1e-12);
                        }
                    }
                }
            }
        }
    }
}

TEST(Ops, SoftmaxRowsSumToOneUnderLargeLogits) {
    Tensor x({2, 3}, {1000.0, 1001.0, 1002.0, -5.0, 0.0, 5.0});
    Tensor s = ops::softmax(x);
    for (std::size_t r = 0; r < 2; ++r) {
        double t = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_TRUE(std::isfinite(s.at(r * 3 + c)));
            t += s.at(r * 3 + c);
        }
        EXPECT_NEAR(t, 1.0, 1e-12);
    }
    Tensor ls = ops::log_softmax(x);
    EXPECT_NEAR(std::exp(ls.at(2)), s.at(2), 1e-12);
}

TEST(Ops, LayerNormZeroMeanUnitVariance) {
    Rng rng = derive_rng(1, "init");
    Tensor x = randn({4, 8}, rng);
    Tensor y = ops::layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}), 1e-12);
    for (std::size_t r = 0; r < 4; ++r) {
        double m = 0.0, v = 0.0;
        for (std::size_t c = 0; c < 8; ++c) m += y.at(r * 8 + c) / 8.0;
        for (std::size_t c = 0; c < 8; ++c) v += (y.at(r * 8 + c) - m) * (y.at(r * 8 + c) - m) / 8.0;
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v, 1.0, 1e-9);
    }
}

TEST(Ops, L2NormalizeUnitRowsAndZeroRowFinite) {
    Tensor x({2, 3}, {3.0, 4.0, 0.0, 0.0, 0.0, 0.0});
    Tensor y = ops::l2_normalize(x);
    EXPECT_NEAR(y.at(0), 0.6, 1e-15);
    EXPECT_NEAR(y.at(1), 0.8, 1e-15);
    for (std::size_t i = 3; i < 6; ++i) EXPECT_EQ(y.at(i), 0.0);
}

TEST(Ops, LogRejectsNonPositive) { EXPECT_THROW(ops::log(Tensor({2}, {1.0, 0.0})), ContractError); }

TEST(Ops, CrossEntropyUniformLogits) {
    Tensor z = Tensor::zeros({3, 4});
    EXPECT_NEAR(ops::cross_entropy(z, {0, 1, 3}).item(), std::log(4.0), 1e-12);
    EXPECT_THROW(ops::cross_entropy(z, {0, 1, 4}), IndexError);
}

TEST(Ops, GatherRowsAccumulatesRepeats) {
    Tensor x({2, 2}, {1.0, 2.0, 3.0, 4.0}, true);
    ops::sum(ops::gather_rows(x, {1, 1, 0})).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 2.0);
    EXPECT_THROW(ops::gather_rows(x, {2}), IndexError);
}

TEST(Ops, FaultInjectionFlipsOneRule) {
    Tensor x({2}, {1.0, 2.0}, true);
    fedssl::testing::inject_backward_fault("square");
    ops::sum(ops::square(x)).backward();
    fedssl::testing::clear_backward_fault();
    EXPECT_DOUBLE_EQ(x.grad()[1], -4.0);
    x.zero_grad();
    ops::sum(ops::square(x)).backward();
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}
