#include <gtest/gtest.h>

#include "fedssl/errors.hpp"
#include "fedssl/gradcheck.hpp"
#include "fedssl/ops.hpp"

using namespace fedssl;

TEST(Gradcheck, EmptyRegistryIsContractError) {
    EXPECT_THROW(gradcheck::run(gradcheck::Registry{}), ContractError);
}

TEST(Gradcheck, DefaultRegistryPassesWithTenInstancesEach) {
    const auto reg = gradcheck::default_registry();
    const auto report = gradcheck::run(reg);
    EXPECT_TRUE(report.ok()) << report.to_text();
    for (const auto& e : report.entries) EXPECT_GE(e.instances, 10u) << e.name;
    EXPECT_LT(report.seconds, 60.0);
}

TEST(Gradcheck, InjectedFaultIsReportedByName) {
    fedssl::testing::inject_backward_fault("square");
    gradcheck::Registry reg;
    reg.add("square", [](Rng& rng) {
        Tensor x({3}, {normal(rng), normal(rng), normal(rng)}, true);
        return gradcheck::Case{{x}, [](const std::vector<Tensor>& in) { return ops::sum(ops::square(in[0])); }};
    });
    reg.add("exp", [](Rng& rng) {
        Tensor x({2}, {normal(rng), normal(rng)}, true);
        return gradcheck::Case{{x}, [](const std::vector<Tensor>& in) { return ops::sum(ops::exp(in[0])); }};
    });
    const auto report = gradcheck::run(reg);
    fedssl::testing::clear_backward_fault();
    EXPECT_FALSE(report.ok());
    EXPECT_EQ(report.failures(), std::vector<std::string>{"square"});
}
