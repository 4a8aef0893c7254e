#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedssl/param_set.hpp"

namespace fedssl {

struct OptimizerConfig {
    enum class Kind { sgd, adam };
    Kind kind = Kind::sgd;
    double lr = 0.03;
    double momentum = 0.9;  // sgd
    double beta1 = 0.9;     // adam
    double beta2 = 0.999;
    double eps = 1e-8;
    // Decoupled decay, applied after the gradient update: theta -= lr*wd*theta.
    double weight_decay = 0.0;
};

// SGD with heavy-ball momentum, or Adam. State buffers are keyed by parameter
// name and created lazily on first step. Parameters with requires_grad ==
// false are skipped.
class Optimizer {
public:
    struct State {
        std::vector<double> m;
        std::vector<double> v;
    };

    explicit Optimizer(OptimizerConfig cfg);

    // Throws MissingGradError (before touching anything) if a trainable
    // parameter has no grad. Does not clear grads.
    void step(ParamSet& params);

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    std::int64_t step_count() const { return steps_; }
    const OptimizerConfig& config() const { return cfg_; }
    const std::map<std::string, State>& state() const { return state_; }

private:
    OptimizerConfig cfg_;
    std::int64_t steps_ = 0;
    std::map<std::string, State> state_;
};

// base_lr * 0.5 * (1 + cos(pi * step / total_steps)); ContractError unless
// 0 <= step <= total_steps and total_steps >= 1.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps);

}  // namespace fedssl
