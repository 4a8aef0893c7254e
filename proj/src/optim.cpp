#include "fedssl/optim.hpp"

#include <cmath>
#include <numbers>

#include "fedssl/errors.hpp"

namespace fedssl {

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

void Optimizer::step(ParamSet& params) {
    for (auto& e : params.entries()) {
        if (e.tensor.requires_grad() && !e.tensor.has_grad()) {
            throw MissingGradError("parameter has no gradient: " + e.name);
        }
    }
    ++steps_;
    const double lr = cfg_.lr;
    const bool adam = cfg_.kind == OptimizerConfig::Kind::adam;
    const double bc1 = adam ? 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_)) : 1.0;
    const double bc2 = adam ? 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_)) : 1.0;
    for (auto& e : params.entries()) {
        if (!e.tensor.requires_grad()) continue;
        Tensor t = e.tensor;
        auto w = t.mutable_data();
        auto g = t.grad();
        State& st = state_[e.name];
        if (st.m.size() != w.size()) st.m.assign(w.size(), 0.0);
        if (adam) {
            if (st.v.size() != w.size()) st.v.assign(w.size(), 0.0);
            for (std::size_t i = 0; i < w.size(); ++i) {
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                double mh = st.m[i] / bc1;
                double vh = st.v[i] / bc2;
                w[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
        } else {
            for (std::size_t i = 0; i < w.size(); ++i) {
                st.m[i] = cfg_.momentum * st.m[i] + g[i];
                w[i] -= lr * st.m[i];
            }
        }
        if (cfg_.weight_decay != 0.0) {
            const double f = lr * cfg_.weight_decay;
            for (auto& x : w) x -= f * x;
        }
    }
}

double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
    if (total_steps < 1) throw ContractError("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > total_steps) {
        throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
    }
    double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace fedssl
