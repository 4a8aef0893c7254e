#include "fedssl/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "fedssl/contrastive.hpp"
#include "fedssl/errors.hpp"
#include "fedssl/mae.hpp"
#include "fedssl/nets.hpp"
#include "fedssl/ops.hpp"

namespace fedssl::gradcheck {

void Registry::add(std::string name, std::function<Case(Rng&)> make, std::size_t instances) {
    entries_.push_back(Entry{std::move(name), std::move(make), instances});
}

double case_error(const Case& c, const Options& opt, Rng& coord_rng) {
    for (Tensor t : c.inputs) {  // aliases the input
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor out = c.fn(c.inputs);
    if (out.numel() != 1) throw ShapeError("gradcheck function must return a scalar, got " + shape_str(out.shape()));
    out.backward();

    // (input, flat index) pairs to probe
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t i = 0; i < c.inputs.size(); ++i) {
        for (std::size_t j = 0; j < c.inputs[i].numel(); ++j) coords.emplace_back(i, j);
    }
    if (coords.size() > opt.max_coords) {
        shuffle(coords, coord_rng);
        coords.resize(opt.max_coords);
    }

    double diff2 = 0.0, an2 = 0.0, nu2 = 0.0;
    for (auto [i, j] : coords) {
        Tensor t = c.inputs[i];
        const double analytic = t.has_grad() ? t.grad()[j] : 0.0;
        const double orig = t.data()[j];
        double fp = 0.0, fm = 0.0;
        {
            NoGradGuard guard;
            t.mutable_data()[j] = orig + opt.h;
            fp = c.fn(c.inputs).item();
            t.mutable_data()[j] = orig - opt.h;
            fm = c.fn(c.inputs).item();
            t.mutable_data()[j] = orig;
        }
        const double numeric = (fp - fm) / (2.0 * opt.h);
        diff2 += (analytic - numeric) * (analytic - numeric);
        an2 += analytic * analytic;
        nu2 += numeric * numeric;
    }
    const double denom = std::sqrt(std::max(an2, nu2));
    if (denom == 0.0) return 0.0;
    return std::sqrt(diff2) / denom;
}

bool Report::ok() const {
    return std::all_of(entries.begin(), entries.end(), [](const EntryReport& e) { return e.ok(); });
}

std::vector<std::string> Report::failures() const {
    std::vector<std::string> out;
    for (const auto& e : entries) {
        if (!e.ok()) out.push_back(e.name);
    }
    return out;
}

std::string Report::to_text() const {
    std::ostringstream os;
    char buf[160];
    for (const auto& e : entries) {
        std::snprintf(buf, sizeof buf, "%-4s %-28s instances=%zu failed=%zu worst_rel_err=%.3e", e.ok() ? "ok" : "FAIL",
                      e.name.c_str(), e.instances, e.failed, e.worst_error);
        os << buf;
        if (!e.error.empty()) os << " error=" << e.error;
        os << '\n';
    }
    std::snprintf(buf, sizeof buf, "%zu entries, %zu failed, %.2f s\n", entries.size(), failures().size(), seconds);
    os << buf;
    return os.str();
}

Report run(const Registry& registry, const Options& opt) {
    if (registry.empty()) throw ContractError("gradcheck registry is empty");
    const auto t0 = std::chrono::steady_clock::now();
    Report report;
    for (std::size_t k = 0; k < registry.entries().size(); ++k) {
        const Entry& entry = registry.entries()[k];
        EntryReport er;
        er.name = entry.name;
        Rng rng = derive_rng(opt.seed, "sampling", fnv1a(entry.name), 0);
        for (std::size_t n = 0; n < entry.instances; ++n) {
            ++er.instances;
            try {
                Case c = entry.make(rng);
                const double err = case_error(c, opt, rng);
                er.worst_error = std::max(er.worst_error, std::isnan(err) ? INFINITY : err);
                if (!(err <= opt.tol)) ++er.failed;
            } catch (const std::exception& ex) {
                er.error = ex.what();
                break;
            }
        }
        report.entries.push_back(std::move(er));
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

namespace {

Tensor randn(const Shape& shape, Rng& rng, double std = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = std * normal(rng);
    return Tensor(shape, std::move(v), true);
}

// |x| in [lo, hi] with a random sign; keeps kinks and poles out of reach of h
Tensor rand_away(const Shape& shape, Rng& rng, double lo, double hi, bool signed_values = true) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) {
        x = uniform(rng, lo, hi);
        if (signed_values && bernoulli(rng, 0.5)) x = -x;
    }
    return Tensor(shape, std::move(v), true);
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + uniform_index(rng, hi - lo + 1); }

// Reduces a tensor output to a scalar with fixed random weights so every
// output coordinate contributes a distinct amount.
Tensor weigh(const Tensor& y, const Tensor& w) { return ops::sum(ops::mul(y, w)); }

Case unary(Rng& rng, Tensor x, std::function<Tensor(const Tensor&)> f) {
    Tensor probe = f(x.detach());
    Tensor w = randn(probe.shape(), rng).detach();
    return Case{{x}, [f, w](const std::vector<Tensor>& in) { return weigh(f(in[0]), w); }};
}

Case binary(Rng& rng, Tensor a, Tensor b, std::function<Tensor(const Tensor&, const Tensor&)> f) {
    Tensor probe = f(a.detach(), b.detach());
    Tensor w = randn(probe.shape(), rng).detach();
    return Case{{a, b}, [f, w](const std::vector<Tensor>& in) { return weigh(f(in[0], in[1]), w); }};
}

Shape small_shape(Rng& rng) {
    const std::size_t rank = pick(rng, 1, 3);
    Shape s;
    for (std::size_t i = 0; i < rank; ++i) s.push_back(pick(rng, 1, 4));
    return s;
}

// a second shape broadcast-compatible with s: a suffix of s with some
// extents set to 1
Shape broadcast_partner(const Shape& s, Rng& rng) {
    const std::size_t drop = uniform_index(rng, s.size());
    Shape t(s.begin() + static_cast<std::ptrdiff_t>(drop), s.end());
    for (auto& e : t) {
        if (bernoulli(rng, 0.3)) e = 1;
    }
    return t;
}

using Binary = std::function<Tensor(const Tensor&, const Tensor&)>;

void add_elementwise(Registry& r) {
    const std::vector<std::pair<std::string, Binary>> bins = {
        {"add", [](const Tensor& a, const Tensor& b) { return ops::add(a, b); }},
        {"sub", [](const Tensor& a, const Tensor& b) { return ops::sub(a, b); }},
        {"mul", [](const Tensor& a, const Tensor& b) { return ops::mul(a, b); }},
    };
    for (const auto& [name, f] : bins) {
        r.add(name, [f](Rng& rng) {
            Shape s = small_shape(rng);
            Tensor a = randn(s, rng);
            Tensor b = randn(s, rng);
            return binary(rng, a, b, f);
        });
        r.add(name + "_broadcast", [f](Rng& rng) {
            Shape s = small_shape(rng);
            Shape t = broadcast_partner(s, rng);
            if (bernoulli(rng, 0.5)) {
                Tensor a = randn(s, rng);
                Tensor b = randn(t, rng);
                return binary(rng, a, b, f);
            }
            Tensor a = randn(t, rng);
            Tensor b = randn(s, rng);
            return binary(rng, a, b, f);
        });
    }
    r.add("div", [](Rng& rng) {
        Shape s = small_shape(rng);
        Shape t = bernoulli(rng, 0.5) ? s : broadcast_partner(s, rng);
        Tensor a = randn(s, rng);
        Tensor b = rand_away(t, rng, 0.5, 2.0);
        return binary(rng, a, b,
                      [](const Tensor& a, const Tensor& b) { return ops::div(a, b); });
    });
    r.add("scale", [](Rng& rng) {
        const double k = uniform(rng, -2.0, 2.0);
        return unary(rng, randn(small_shape(rng), rng), [k](const Tensor& x) { return ops::scale(x, k); });
    });
    r.add("add_scalar", [](Rng& rng) {
        const double k = uniform(rng, -2.0, 2.0);
        return unary(rng, randn(small_shape(rng), rng), [k](const Tensor& x) { return ops::add_scalar(x, k); });
    });
    r.add("neg", [](Rng& rng) { return unary(rng, randn(small_shape(rng), rng), ops::neg); });
    r.add("relu", [](Rng& rng) { return unary(rng, rand_away(small_shape(rng), rng, 0.05, 2.0), ops::relu); });
    r.add("gelu", [](Rng& rng) { return unary(rng, randn(small_shape(rng), rng, 1.5), ops::gelu); });
    r.add("exp", [](Rng& rng) { return unary(rng, randn(small_shape(rng), rng), ops::exp); });
    r.add("log", [](Rng& rng) {
        return unary(rng, rand_away(small_shape(rng), rng, 0.3, 3.0, false), ops::log);
    });
    r.add("square", [](Rng& rng) { return unary(rng, randn(small_shape(rng), rng), ops::square); });
}

void add_linear_algebra(Registry& r) {
    r.add("matmul", [](Rng& rng) {
        const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
        Tensor a = randn({m, k}, rng);
        Tensor b = randn({k, n}, rng);
        return binary(rng, a, b,
                      [](const Tensor& a, const Tensor& b) { return ops::matmul(a, b); });
    });
    r.add("matmul_shared_right", [](Rng& rng) {
        const std::size_t b = pick(rng, 1, 3), m = pick(rng, 1, 3), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
        Tensor lhs = randn({b, m, k}, rng);
        Tensor rhs = randn({k, n}, rng);
        return binary(rng, lhs, rhs,
                      [](const Tensor& x, const Tensor& y) { return ops::matmul(x, y); });
    });
    r.add("matmul_batched", [](Rng& rng) {
        const std::size_t b = pick(rng, 1, 3), m = pick(rng, 1, 3), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
        Tensor lhs = randn({b, m, k}, rng);
        Tensor rhs = randn({b, k, n}, rng);
        return binary(rng, lhs, rhs,
                      [](const Tensor& x, const Tensor& y) { return ops::matmul(x, y); });
    });
    r.add("transpose", [](Rng& rng) {
        Shape s = small_shape(rng);
        if (s.size() < 2) s.push_back(pick(rng, 2, 4));
        return unary(rng, randn(s, rng), ops::transpose);
    });
    r.add("reshape", [](Rng& rng) {
        const std::size_t a = pick(rng, 1, 4), b = pick(rng, 1, 4), c = pick(rng, 1, 3);
        return unary(rng, randn({a, b, c}, rng), [=](const Tensor& x) { return ops::reshape(x, {a * c, b}); });
    });
    r.add("dot", [](Rng& rng) {
        const std::size_t n = pick(rng, 1, 6);
        Tensor a = randn({n}, rng), b = randn({n}, rng);
        return Case{{a, b}, [](const std::vector<Tensor>& in) { return ops::dot(in[0], in[1]); }};
    });
    r.add("linear", [](Rng& rng) {
        const std::size_t b = pick(rng, 1, 3), t = pick(rng, 1, 3), i = pick(rng, 1, 4), o = pick(rng, 1, 4);
        Shape xs = bernoulli(rng, 0.5) ? Shape{b, i} : Shape{b, t, i};
        Tensor x = randn(xs, rng), w = randn({i, o}, rng), bias = randn({o}, rng);
        Tensor probe = ops::linear(x.detach(), w.detach(), bias.detach());
        Tensor wt = randn(probe.shape(), rng).detach();
        return Case{{x, w, bias},
                    [wt](const std::vector<Tensor>& in) { return weigh(ops::linear(in[0], in[1], in[2]), wt); }};
    });
    r.add("conv2d", [](Rng& rng) {
        const std::size_t b = pick(rng, 1, 2), c = pick(rng, 1, 3), o = pick(rng, 1, 3);
        const std::size_t k = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = uniform_index(rng, 2);
        const std::size_t h = pick(rng, k, 6), w = pick(rng, k, 6);
        Tensor x = randn({b, c, h, w}, rng), wt = randn({o, c, k, k}, rng), bias = randn({o}, rng);
        Tensor probe = ops::conv2d(x.detach(), wt.detach(), bias.detach(), stride, pad);
        Tensor r_ = randn(probe.shape(), rng).detach();
        return Case{{x, wt, bias}, [r_, stride, pad](const std::vector<Tensor>& in) {
                        return weigh(ops::conv2d(in[0], in[1], in[2], stride, pad), r_);
                    }};
    });
}

void add_reductions(Registry& r) {
    r.add("sum", [](Rng& rng) {
        Tensor x = randn(small_shape(rng), rng);
        return Case{{x}, [](const std::vector<Tensor>& in) { return ops::sum(ops::square(in[0])); }};
    });
    r.add("mean", [](Rng& rng) {
        Tensor x = randn(small_shape(rng), rng);
        return Case{{x}, [](const std::vector<Tensor>& in) { return ops::mean(ops::square(in[0])); }};
    });
    r.add("sum_axis", [](Rng& rng) {
        Shape s = small_shape(rng);
        const int axis = static_cast<int>(uniform_index(rng, s.size())) - (bernoulli(rng, 0.5) ? static_cast<int>(s.size()) : 0);
        const bool keep = bernoulli(rng, 0.5);
        return unary(rng, randn(s, rng), [axis, keep](const Tensor& x) { return ops::sum(x, axis, keep); });
    });
    r.add("mean_axis", [](Rng& rng) {
        Shape s = small_shape(rng);
        const int axis = static_cast<int>(uniform_index(rng, s.size()));
        const bool keep = bernoulli(rng, 0.5);
        return unary(rng, randn(s, rng), [axis, keep](const Tensor& x) { return ops::mean(x, axis, keep); });
    });
    r.add("softmax", [](Rng& rng) { return unary(rng, randn(small_shape(rng), rng), ops::softmax); });
    r.add("log_softmax", [](Rng& rng) { return unary(rng, randn(small_shape(rng), rng), ops::log_softmax); });
    r.add("layer_norm", [](Rng& rng) {
        const std::size_t rows = pick(rng, 1, 3), d = pick(rng, 2, 6);
        Tensor x = randn({rows, d}, rng), g = randn({d}, rng), b = randn({d}, rng);
        Tensor wt = randn({rows, d}, rng).detach();
        return Case{{x, g, b}, [wt](const std::vector<Tensor>& in) {
                        return weigh(ops::layer_norm(in[0], in[1], in[2], 1e-5), wt);
                    }};
    });
    r.add("l2_normalize", [](Rng& rng) {
        const std::size_t rows = pick(rng, 1, 3), d = pick(rng, 1, 6);
        return unary(rng, randn({rows, d}, rng), [](const Tensor& x) { return ops::l2_normalize(x); });
    });
    r.add("mse", [](Rng& rng) {
        Shape s = small_shape(rng);
        Tensor a = randn(s, rng), b = randn(s, rng);
        return Case{{a, b}, [](const std::vector<Tensor>& in) { return ops::mse(in[0], in[1]); }};
    });
    r.add("cross_entropy", [](Rng& rng) {
        const std::size_t n = pick(rng, 1, 4), k = pick(rng, 2, 5);
        std::vector<std::size_t> labels(n);
        for (auto& l : labels) l = uniform_index(rng, k);
        Tensor x = randn({n, k}, rng);
        return Case{{x}, [labels](const std::vector<Tensor>& in) { return ops::cross_entropy(in[0], labels); }};
    });
}

void add_indexing(Registry& r) {
    r.add("concat", [](Rng& rng) {
        Shape s = small_shape(rng);
        const int axis = static_cast<int>(uniform_index(rng, s.size()));
        Shape t = s;
        t[static_cast<std::size_t>(axis)] = pick(rng, 1, 3);
        Tensor a = randn(s, rng);
        Tensor b = randn(t, rng);
        return binary(rng, a, b,
                      [axis](const Tensor& a, const Tensor& b) { return ops::concat({a, b, a}, axis); });
    });
    r.add("gather_rows", [](Rng& rng) {
        const std::size_t n = pick(rng, 1, 4), d = pick(rng, 1, 3), m = pick(rng, 1, 6);
        std::vector<std::size_t> rows(m);
        for (auto& i : rows) i = uniform_index(rng, n);  // repeats exercise accumulation
        return unary(rng, randn({n, d}, rng), [rows](const Tensor& x) { return ops::gather_rows(x, rows); });
    });
    r.add("slice_last", [](Rng& rng) {
        Shape s = small_shape(rng);
        s.back() = pick(rng, 2, 5);
        const std::size_t start = uniform_index(rng, s.back());
        const std::size_t len = pick(rng, 1, s.back() - start);
        return unary(rng, randn(s, rng), [=](const Tensor& x) { return ops::slice_last(x, start, len); });
    });
}

void add_losses(Registry& r) {
    r.add("info_nce", [](Rng& rng) {
        const std::size_t b = pick(rng, 1, 4), d = pick(rng, 2, 6), m = pick(rng, 1, 8);
        const double tau = uniform(rng, 0.1, 1.0);
        Tensor q = randn({b, d}, rng, 0.5), k = randn({b, d}, rng, 0.5), n = randn({m, d}, rng, 0.5);
        return Case{{q, k, n}, [tau](const std::vector<Tensor>& in) {
                        return contrastive::info_nce(in[0], in[1], in[2], tau);
                    }};
    });
    r.add("info_nce_normalized", [](Rng& rng) {
        const std::size_t b = pick(rng, 1, 4), d = pick(rng, 2, 6), m = pick(rng, 1, 8);
        Tensor q = randn({b, d}, rng), k = randn({b, d}, rng), n = randn({m, d}, rng);
        return Case{{q, k, n}, [](const std::vector<Tensor>& in) {
                        return contrastive::info_nce(ops::l2_normalize(in[0]), ops::l2_normalize(in[1]),
                                                     ops::l2_normalize(in[2]), 0.2);
                    }};
    });
    for (mae::LossScope scope : {mae::LossScope::full, mae::LossScope::masked}) {
        const std::string name = scope == mae::LossScope::full ? "reconstruction_full" : "reconstruction_masked";
        r.add(name, [scope](Rng& rng) {
            const std::size_t b = pick(rng, 1, 3), n = pick(rng, 2, 6), d = pick(rng, 1, 4);
            std::vector<mae::MaskPlan> plans;
            for (std::size_t i = 0; i < b; ++i) {
                mae::MaskPlan p;
                p.num_patches = n;
                for (std::size_t j = 0; j < n; ++j) (j == 0 || bernoulli(rng, 0.5) ? p.masked : p.visible).push_back(j);
                plans.push_back(std::move(p));
            }
            Tensor recon = randn({b, n, d}, rng), target = randn({b, n, d}, rng);
            return Case{{recon, target}, [plans, scope](const std::vector<Tensor>& in) {
                            return mae::reconstruction_loss(in[0], in[1], plans, scope);
                        }};
        });
    }
}

// Rebuilds a ParamSet around the probed tensors so the model code sees
// them by name.
ParamSet rebind(const std::vector<std::string>& names, const std::vector<Tensor>& tensors, std::size_t offset) {
    ParamSet p;
    for (std::size_t i = 0; i < names.size(); ++i) p.add(names[i], tensors[offset + i]);
    return p;
}

void add_composites(Registry& r) {
    r.add("cnn_info_nce", [](Rng& rng) {
        nets::CnnConfig cfg;
        cfg.conv1_channels = 4;
        cfg.conv2_channels = 6;
        cfg.head_hidden = 8;
        cfg.head_out = 5;
        ParamSet model = nets::init_cnn(cfg, rng, true).clone();
        std::vector<std::string> names = model.names();
        std::vector<Tensor> inputs;
        for (const auto& e : model.entries()) inputs.push_back(e.tensor);
        const std::size_t b = 2;
        Tensor x1 = rand_away({b, 3, 8, 8}, rng, 0.0, 1.0, false).detach();
        Tensor x2 = rand_away({b, 3, 8, 8}, rng, 0.0, 1.0, false).detach();
        Tensor negs = ops::l2_normalize(randn({6, cfg.head_out}, rng)).detach();
        return Case{inputs, [=](const std::vector<Tensor>& in) {
                        ParamSet p = rebind(names, in, 0);
                        Tensor q = nets::cnn_forward(p, cfg, x1, true);
                        Tensor k = nets::cnn_forward(p, cfg, x2, true);
                        return contrastive::info_nce(q, k, negs, 0.2);
                    }};
    });
    r.add("mae_model", [](Rng& rng) {
        nets::VitConfig cfg;
        cfg.height = cfg.width = 16;
        cfg.patch = 4;
        cfg.embed_dim = 8;
        cfg.heads = 2;
        cfg.depth = 1;
        cfg.mlp_ratio = 2;
        cfg.decoder_dim = 8;
        cfg.decoder_heads = 2;
        cfg.decoder_depth = 1;
        ParamSet model = nets::init_mae(cfg, rng).clone();
        std::vector<std::string> names = model.names();
        std::vector<Tensor> inputs;
        for (const auto& e : model.entries()) inputs.push_back(e.tensor);
        const std::size_t b = 2;
        Tensor x = rand_away({b, 3, 16, 16}, rng, 0.0, 1.0, false).detach();
        std::vector<mae::MaskPlan> plans;
        for (std::size_t i = 0; i < b; ++i) plans.push_back(mae::make_mask(cfg.num_patches(), 0.75, rng));
        const auto scope = bernoulli(rng, 0.5) ? mae::LossScope::full : mae::LossScope::masked;
        return Case{inputs, [=](const std::vector<Tensor>& in) {
                        return mae::mae_loss(rebind(names, in, 0), cfg, x, plans, scope);
                    }};
    });
    r.add("vit_classifier", [](Rng& rng) {
        nets::VitConfig cfg;
        cfg.height = cfg.width = 8;
        cfg.patch = 4;
        cfg.embed_dim = 4;
        cfg.heads = 2;
        cfg.depth = 1;
        cfg.mlp_ratio = 2;
        ParamSet model = nets::init_mae(cfg, rng).subset_with_prefix("encoder.").clone();
        ParamSet head = nets::init_classifier(cfg.embed_dim, 3, rng, false).clone();
        std::vector<std::string> names = model.names(), head_names = head.names();
        std::vector<Tensor> inputs;
        for (const auto& e : model.entries()) inputs.push_back(e.tensor);
        for (const auto& e : head.entries()) inputs.push_back(e.tensor);
        Tensor x = rand_away({2, 3, 8, 8}, rng, 0.0, 1.0, false).detach();
        std::vector<std::size_t> labels = {uniform_index(rng, 3), uniform_index(rng, 3)};
        return Case{inputs, [=](const std::vector<Tensor>& in) {
                        ParamSet enc = rebind(names, in, 0);
                        ParamSet cls = rebind(head_names, in, names.size());
                        Tensor f = nets::class_token_state(nets::vit_encode_full(enc, cfg, nets::patchify(x, cfg.patch)));
                        return ops::cross_entropy(nets::classify(cls, f), labels);
                    }};
    });
}

}  // namespace

Registry default_registry() {
    Registry r;
    add_elementwise(r);
    add_linear_algebra(r);
    add_reductions(r);
    add_indexing(r);
    add_losses(r);
    add_composites(r);
    return r;
}

}  // namespace fedssl::gradcheck
