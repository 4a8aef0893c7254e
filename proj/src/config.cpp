#include "fedssl/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>

#include "fedssl/errors.hpp"
#include "fedssl/serialize.hpp"

namespace fedssl::config {
namespace {

using Cfg = ExperimentConfig;

struct Key {
    std::string section;
    std::string name;
    std::string doc;
    std::function<std::string(const Cfg&)> get;
    // throws ConfigError with a message that omits the key; the caller
    // prefixes it
    std::function<void(Cfg&, const std::string&)> set;
};

std::string fmt_double(double v) {
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

double parse_double(const std::string& s) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
        throw ConfigError("'" + s + "' is not a number");
    }
    return v;
}

std::uint64_t parse_u64(const std::string& s) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("'" + s + "' is not a non-negative integer");
    return v;
}

template <typename T>
using Field = std::function<T&(Cfg&)>;

template <typename T>
T& field(const Field<T>& f, const Cfg& c) {
    return f(const_cast<Cfg&>(c));
}

Key size_key(std::string sec, std::string name, std::string doc, Field<std::size_t> f, std::size_t lo,
             std::size_t hi) {
    doc += " [" + std::to_string(lo) + ", " + std::to_string(hi) + "]";
    return {std::move(sec), std::move(name), std::move(doc),
            [f](const Cfg& c) { return std::to_string(field(f, c)); },
            [f, lo, hi](Cfg& c, const std::string& s) {
                const std::uint64_t v = parse_u64(s);
                if (v < lo || v > hi) {
                    throw ConfigError(s + " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
                }
                f(c) = static_cast<std::size_t>(v);
            }};
}

// Interval with optionally open ends.
struct Range {
    double lo, hi;
    bool lo_open = false, hi_open = false;
    bool contains(double v) const {
        return (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
    }
    std::string str() const {
        return std::string(lo_open ? "(" : "[") + fmt_double(lo) + ", " + fmt_double(hi) + (hi_open ? ")" : "]");
    }
};

Key double_key(std::string sec, std::string name, std::string doc, Field<double> f, Range r) {
    doc += " " + r.str();
    return {std::move(sec), std::move(name), std::move(doc), [f](const Cfg& c) { return fmt_double(field(f, c)); },
            [f, r](Cfg& c, const std::string& s) {
                const double v = parse_double(s);
                if (!r.contains(v)) throw ConfigError(s + " outside " + r.str());
                f(c) = v;
            }};
}

Key bool_key(std::string sec, std::string name, std::string doc, Field<bool> f) {
    return {std::move(sec), std::move(name), std::move(doc) + " {true, false}",
            [f](const Cfg& c) { return std::string(field(f, c) ? "true" : "false"); },
            [f](Cfg& c, const std::string& s) {
                if (s == "true") {
                    f(c) = true;
                } else if (s == "false") {
                    f(c) = false;
                } else {
                    throw ConfigError("'" + s + "' is not true or false");
                }
            }};
}

template <typename E>
Key enum_key(std::string sec, std::string name, std::string doc, Field<E> f,
             std::vector<std::pair<std::string, E>> values) {
    std::string choices;
    for (const auto& [n, v] : values) choices += (choices.empty() ? "" : ", ") + n;
    doc += " {" + choices + "}";
    return {std::move(sec), std::move(name), std::move(doc),
            [f, values](const Cfg& c) {
                for (const auto& [n, v] : values) {
                    if (v == field(f, c)) return n;
                }
                return std::string("?");
            },
            [f, values, choices](Cfg& c, const std::string& s) {
                for (const auto& [n, v] : values) {
                    if (n == s) {
                        f(c) = v;
                        return;
                    }
                }
                throw ConfigError("'" + s + "' is not one of {" + choices + "}");
            }};
}

const std::vector<std::pair<std::string, OptimizerConfig::Kind>> kOptimizers = {
    {"sgd", OptimizerConfig::Kind::sgd}, {"adam", OptimizerConfig::Kind::adam}};

const Range kLr{0.0, 10.0, true};
const Range kUnit{0.0, 1.0};
const Range kUnitOpenLow{0.0, 1.0, true};
const Range kUnitOpenHigh{0.0, 1.0, false, true};

void add_optimizer(std::vector<Key>& keys, const std::string& sec, std::function<OptimizerConfig&(Cfg&)> o) {
    keys.push_back(enum_key<OptimizerConfig::Kind>(sec, "optimizer", "update rule",
                                                   [o](Cfg& c) -> OptimizerConfig::Kind& { return o(c).kind; },
                                                   kOptimizers));
    keys.push_back(double_key(sec, "lr", "base learning rate", [o](Cfg& c) -> double& { return o(c).lr; }, kLr));
    keys.push_back(double_key(sec, "sgd_momentum", "heavy-ball coefficient (sgd)",
                              [o](Cfg& c) -> double& { return o(c).momentum; }, kUnitOpenHigh));
    keys.push_back(double_key(sec, "weight_decay", "decoupled weight decay",
                              [o](Cfg& c) -> double& { return o(c).weight_decay; }, kUnit));
}

void add_augment(std::vector<Key>& keys, const std::string& sec, std::function<data::AugmentConfig&(Cfg&)> a) {
    keys.push_back(double_key(sec, "crop_scale_min", "smallest crop area fraction",
                              [a](Cfg& c) -> double& { return a(c).crop_scale_min; }, kUnitOpenLow));
    keys.push_back(double_key(sec, "crop_scale_max", "largest crop area fraction",
                              [a](Cfg& c) -> double& { return a(c).crop_scale_max; }, kUnitOpenLow));
    keys.push_back(double_key(sec, "flip_p", "horizontal flip probability",
                              [a](Cfg& c) -> double& { return a(c).flip_p; }, kUnit));
    keys.push_back(double_key(sec, "rot90_p", "90 degree rotation probability",
                              [a](Cfg& c) -> double& { return a(c).rot90_p; }, kUnit));
    keys.push_back(double_key(sec, "channel_jitter", "per-channel scale jitter",
                              [a](Cfg& c) -> double& { return a(c).channel_jitter; }, kUnitOpenHigh));
    keys.push_back(double_key(sec, "aug_noise", "additive noise sigma",
                              [a](Cfg& c) -> double& { return a(c).noise_sigma; }, kUnit));
}

std::vector<Key> build_keys() {
    std::vector<Key> k;
    constexpr std::size_t kBig = 1000000;

    k.push_back(enum_key<fed::Protocol>("experiment", "protocol", "pretraining protocol",
                                        [](Cfg& c) -> fed::Protocol& { return c.protocol; },
                                        {{"fedclf", fed::Protocol::fedclf}, {"fedmae", fed::Protocol::fedmae}}));
    k.push_back({"experiment", "seed", "root seed of every random stream",
                 [](const Cfg& c) { return std::to_string(c.seed); },
                 [](Cfg& c, const std::string& s) { c.seed = parse_u64(s); }});

    const std::string d = "data";
    k.push_back(size_key(d, "classes", "number of classes", [](Cfg& c) -> std::size_t& { return c.data.num_classes; },
                         2, 100));
    k.push_back(size_key(d, "clients", "number of clients", [](Cfg& c) -> std::size_t& { return c.data.num_clients; },
                         1, 1000));
    k.push_back(size_key(d, "samples_per_client", "images per client",
                         [](Cfg& c) -> std::size_t& { return c.data.samples_per_client; }, 1, kBig));
    k.push_back(size_key(d, "height", "image height", [](Cfg& c) -> std::size_t& { return c.data.height; }, 4, 256));
    k.push_back(size_key(d, "width", "image width", [](Cfg& c) -> std::size_t& { return c.data.width; }, 4, 256));
    k.push_back(size_key(d, "channels", "image channels", [](Cfg& c) -> std::size_t& { return c.data.channels; }, 1, 4));
    k.push_back(double_key(d, "noise_sigma", "pixel noise", [](Cfg& c) -> double& { return c.data.noise_sigma; },
                           kUnit));
    k.push_back(double_key(d, "texture_amplitude", "class texture strength",
                           [](Cfg& c) -> double& { return c.data.texture_amplitude; }, kUnit));
    k.push_back(double_key(d, "class_tint", "class colour offset", [](Cfg& c) -> double& { return c.data.class_tint; },
                           kUnit));
    k.push_back(double_key(d, "brightness_jitter", "per-image brightness jitter",
                           [](Cfg& c) -> double& { return c.data.brightness_jitter; }, kUnitOpenHigh));

    const std::string f = "fedclf";
    k.push_back(size_key(f, "rounds", "communication rounds", [](Cfg& c) -> std::size_t& { return c.fedclf.rounds; },
                         1, kBig));
    k.push_back(size_key(f, "local_epochs", "local epochs per round",
                         [](Cfg& c) -> std::size_t& { return c.fedclf.local_epochs; }, 1, 1000));
    k.push_back(size_key(f, "batch", "local batch size", [](Cfg& c) -> std::size_t& { return c.fedclf.cl.batch; }, 1,
                         4096));
    add_optimizer(k, f, [](Cfg& c) -> OptimizerConfig& { return c.fedclf.opt; });
    k.push_back(bool_key(f, "cosine", "cosine learning-rate decay over rounds",
                         [](Cfg& c) -> bool& { return c.fedclf.cosine; }));
    k.push_back(double_key(f, "active_ratio", "fraction of clients per round",
                           [](Cfg& c) -> double& { return c.fedclf.active_ratio; }, kUnitOpenLow));
    k.push_back(bool_key(f, "uniform_avg", "equal client weights in aggregation",
                         [](Cfg& c) -> bool& { return c.fedclf.uniform_avg; }));
    k.push_back(double_key(f, "tau", "contrastive temperature", [](Cfg& c) -> double& { return c.fedclf.cl.tau; },
                           Range{0.0, 10.0, true}));
    k.push_back(double_key(f, "momentum", "momentum-encoder coefficient m",
                           [](Cfg& c) -> double& { return c.fedclf.cl.momentum; }, kUnitOpenHigh));
    k.push_back(size_key(f, "bank_capacity", "capacity K of every feature bank",
                         [](Cfg& c) -> std::size_t& { return c.fedclf.cl.bank_capacity; }, 1, kBig));
    k.push_back(enum_key<contrastive::BankMode>(
        f, "bank_mode", "negatives: none, local plus remote, or remote only",
        [](Cfg& c) -> contrastive::BankMode& { return c.fedclf.cl.mode; },
        {{"none", contrastive::BankMode::none},
         {"with_local", contrastive::BankMode::with_local},
         {"remote_only", contrastive::BankMode::remote_only}}));
    k.push_back(enum_key<contrastive::BankSource>(
        f, "bank_source", "features pushed to the local bank",
        [](Cfg& c) -> contrastive::BankSource& { return c.fedclf.cl.bank_source; },
        {{"kplus", contrastive::BankSource::kplus}, {"clean", contrastive::BankSource::clean}}));
    k.push_back(enum_key<fed::MomentumSync>(f, "sync_momentum", "momentum encoder at round start",
                                            [](Cfg& c) -> fed::MomentumSync& { return c.fedclf.sync_momentum; },
                                            {{"reset", fed::MomentumSync::reset}, {"keep", fed::MomentumSync::keep}}));
    k.push_back(size_key(f, "conv1_channels", "first convolution width",
                         [](Cfg& c) -> std::size_t& { return c.fedclf.net.conv1_channels; }, 1, 512));
    k.push_back(size_key(f, "conv2_channels", "second convolution width (feature size)",
                         [](Cfg& c) -> std::size_t& { return c.fedclf.net.conv2_channels; }, 1, 512));
    k.push_back(size_key(f, "head_hidden", "projection hidden width",
                         [](Cfg& c) -> std::size_t& { return c.fedclf.net.head_hidden; }, 1, 1024));
    k.push_back(size_key(f, "head_out", "projection output width",
                         [](Cfg& c) -> std::size_t& { return c.fedclf.net.head_out; }, 1, 1024));
    add_augment(k, f, [](Cfg& c) -> data::AugmentConfig& { return c.fedclf.cl.augment; });

    const std::string m = "fedmae";
    k.push_back(size_key(m, "rounds", "communication rounds", [](Cfg& c) -> std::size_t& { return c.fedmae.rounds; },
                         1, kBig));
    k.push_back(size_key(m, "local_epochs", "local epochs per round",
                         [](Cfg& c) -> std::size_t& { return c.fedmae.local_epochs; }, 1, 1000));
    k.push_back(size_key(m, "batch", "local batch size", [](Cfg& c) -> std::size_t& { return c.fedmae.mae.batch; }, 1,
                         4096));
    add_optimizer(k, m, [](Cfg& c) -> OptimizerConfig& { return c.fedmae.opt; });
    k.push_back(bool_key(m, "cosine", "cosine learning-rate decay over rounds",
                         [](Cfg& c) -> bool& { return c.fedmae.cosine; }));
    k.push_back(double_key(m, "active_ratio", "fraction of clients per round",
                           [](Cfg& c) -> double& { return c.fedmae.active_ratio; }, kUnitOpenLow));
    k.push_back(bool_key(m, "uniform_avg", "equal client weights in aggregation",
                         [](Cfg& c) -> bool& { return c.fedmae.uniform_avg; }));
    k.push_back(double_key(m, "mask_ratio", "fraction of patches removed",
                           [](Cfg& c) -> double& { return c.fedmae.mae.mask_ratio; }, Range{0.0, 1.0, true, true}));
    k.push_back(enum_key<mae::LossScope>(m, "loss_scope", "patches entering the reconstruction loss",
                                         [](Cfg& c) -> mae::LossScope& { return c.fedmae.mae.scope; },
                                         {{"full", mae::LossScope::full}, {"masked", mae::LossScope::masked}}));
    {
        std::vector<std::pair<std::string, fed::SyncSet>> sets;
        for (fed::SyncSet s : fed::all_sync_sets()) sets.emplace_back(fed::to_string(s), s);
        k.push_back(enum_key<fed::SyncSet>(m, "sync_set", "parameters averaged every round",
                                           [](Cfg& c) -> fed::SyncSet& { return c.fedmae.sync; }, sets));
    }
    k.push_back(size_key(m, "patch", "patch side", [](Cfg& c) -> std::size_t& { return c.fedmae.mae.vit.patch; }, 1,
                         64));
    k.push_back(size_key(m, "embed_dim", "encoder width",
                         [](Cfg& c) -> std::size_t& { return c.fedmae.mae.vit.embed_dim; }, 1, 1024));
    k.push_back(size_key(m, "heads", "encoder attention heads",
                         [](Cfg& c) -> std::size_t& { return c.fedmae.mae.vit.heads; }, 1, 64));
    k.push_back(size_key(m, "depth", "encoder blocks", [](Cfg& c) -> std::size_t& { return c.fedmae.mae.vit.depth; },
                         1, 64));
    k.push_back(size_key(m, "mlp_ratio", "block MLP expansion",
                         [](Cfg& c) -> std::size_t& { return c.fedmae.mae.vit.mlp_ratio; }, 1, 16));
    k.push_back(size_key(m, "decoder_dim", "decoder width",
                         [](Cfg& c) -> std::size_t& { return c.fedmae.mae.vit.decoder_dim; }, 1, 1024));
    k.push_back(size_key(m, "decoder_heads", "decoder attention heads",
                         [](Cfg& c) -> std::size_t& { return c.fedmae.mae.vit.decoder_heads; }, 1, 64));
    k.push_back(size_key(m, "decoder_depth", "decoder blocks",
                         [](Cfg& c) -> std::size_t& { return c.fedmae.mae.vit.decoder_depth; }, 1, 64));
    add_augment(k, m, [](Cfg& c) -> data::AugmentConfig& { return c.fedmae.mae.augment; });

    const std::string t = "finetune";
    k.push_back(enum_key<eval::Mode>(t, "mode", "supervised stage", [](Cfg& c) -> eval::Mode& { return c.finetune.mode; },
                                     {{"federated", eval::Mode::federated}, {"local", eval::Mode::local}}));
    k.push_back(double_key(t, "label_fraction", "labeled share L of each client's train split",
                           [](Cfg& c) -> double& { return c.finetune.label_fraction; }, kUnitOpenLow));
    k.push_back(size_key(t, "rounds", "rounds (federated)", [](Cfg& c) -> std::size_t& { return c.finetune.rounds; },
                         1, kBig));
    k.push_back(size_key(t, "local_epochs", "epochs per round (federated)",
                         [](Cfg& c) -> std::size_t& { return c.finetune.local_epochs; }, 1, 1000));
    k.push_back(size_key(t, "epochs", "epochs (local)", [](Cfg& c) -> std::size_t& { return c.finetune.epochs; }, 1,
                         kBig));
    k.push_back(size_key(t, "batch", "batch size", [](Cfg& c) -> std::size_t& { return c.finetune.batch; }, 1, 4096));
    add_optimizer(k, t, [](Cfg& c) -> OptimizerConfig& { return c.finetune.opt; });
    k.push_back(bool_key(t, "freeze_encoder", "train the classifier only",
                         [](Cfg& c) -> bool& { return c.finetune.freeze_encoder; }));
    k.push_back(bool_key(t, "zero_head_init", "start the classifier at zero",
                         [](Cfg& c) -> bool& { return c.finetune.zero_head_init; }));
    k.push_back(bool_key(t, "uniform_avg", "equal client weights in aggregation",
                         [](Cfg& c) -> bool& { return c.finetune.uniform_avg; }));
    k.push_back(bool_key(t, "augment", "random horizontal flips", [](Cfg& c) -> bool& { return c.finetune.augment; }));
    return k;
}

const std::vector<Key>& keys() {
    static const std::vector<Key> k = build_keys();
    return k;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void ExperimentConfig::resolve() {
    data.validate();
    auto& vit = fedmae.mae.vit;
    vit.height = data.height;
    vit.width = data.width;
    vit.channels = data.channels;
    fedclf.net.in_channels = data.channels;
    try {
        vit.validate();
    } catch (const ShapeError& e) {
        throw ConfigError(std::string("fedmae: ") + e.what());
    }
    const auto n = vit.num_patches();
    const auto masked = static_cast<std::size_t>(std::llround(fedmae.mae.mask_ratio * static_cast<double>(n)));
    if (n < 2 || masked == 0 || masked == n) {
        throw ConfigError("fedmae.mask_ratio " + fmt_double(fedmae.mae.mask_ratio) + " masks " +
                          std::to_string(masked) + " of " + std::to_string(n) + " patches");
    }
    for (auto [name, aug] : {std::pair<const char*, const data::AugmentConfig*>{"fedclf", &fedclf.cl.augment},
                             {"fedmae", &fedmae.mae.augment}}) {
        if (aug->crop_scale_min > aug->crop_scale_max) {
            throw ConfigError(std::string(name) + ".crop_scale_min exceeds " + name + ".crop_scale_max");
        }
    }
}

eval::Encoder ExperimentConfig::encoder() const {
    eval::Encoder enc;
    enc.backbone = protocol == fed::Protocol::fedclf ? eval::Backbone::cnn : eval::Backbone::vit;
    enc.cnn = fedclf.net;
    enc.vit = fedmae.mae.vit;
    return enc;
}

ExperimentConfig parse(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    std::set<std::string> seen;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = "line " + std::to_string(lineno) + ": ";
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "malformed section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            bool known = false;
            for (const Key& k : keys()) known = known || k.section == section;
            if (!known) throw ConfigError(where + "unknown section '" + section + "'");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value, got '" + line + "'");
        const std::string name = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const std::string full = (section.empty() ? "" : section + ".") + name;
        const Key* key = nullptr;
        for (const Key& k : keys()) {
            if (k.section == section && k.name == name) key = &k;
        }
        if (!key) throw ConfigError(where + "unknown key '" + full + "'");
        if (!seen.insert(full).second) throw ConfigError(where + "repeated key '" + full + "'");
        try {
            key->set(cfg, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + full + ": " + e.what());
        }
    }
    cfg.resolve();
    return cfg;
}

ExperimentConfig load(const std::filesystem::path& path) {
    io::Bytes b;
    try {
        b = io::read_file(path);
    } catch (const std::exception& e) {
        throw ConfigError("cannot read config " + path.string() + ": " + e.what());
    }
    return parse(std::string(b.begin(), b.end()));
}

std::string dump(const ExperimentConfig& cfg) {
    std::ostringstream os;
    std::string section;
    for (const Key& k : keys()) {
        if (k.section != section) {
            if (!section.empty()) os << '\n';
            section = k.section;
            os << '[' << section << "]\n";
        }
        os << "# " << k.doc << '\n' << k.name << " = " << k.get(cfg) << '\n';
    }
    return os.str();
}

}  // namespace fedssl::config
