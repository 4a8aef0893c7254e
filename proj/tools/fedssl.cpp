// fedssl: data generation, federated pretraining, fine-tuning, ablations and
// gradient checks from one config file. Exit codes: 0 success, 1 runtime
// failure, 2 configuration error.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "fedssl/config.hpp"
#include "fedssl/errors.hpp"
#include "fedssl/experiment.hpp"
#include "fedssl/gradcheck.hpp"
#include "fedssl/serialize.hpp"

namespace fs = std::filesystem;
using namespace fedssl;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct Common {
    std::string config_path;
    std::string out_dir;
    bool force = false;
    std::size_t workers = 1;
    std::string seed_override;
    std::string data_dir;
};

config::ExperimentConfig load_config(const Common& c) {
    config::ExperimentConfig cfg = c.config_path.empty() ? config::parse("") : config::load(c.config_path);
    if (!c.seed_override.empty()) {
        try {
            cfg.seed = std::stoull(c.seed_override);
        } catch (const std::exception&) {
            throw ConfigError("--seed: '" + c.seed_override + "' is not a non-negative integer");
        }
    }
    if (c.workers == 0) throw ConfigError("--workers must be at least 1");
    return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
    io::write_file(p, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string read_text(const fs::path& p) {
    io::Bytes b = io::read_file(p);
    return std::string(b.begin(), b.end());
}

// Creates `dir` and refuses to reuse it when `marker` exists and --force is
// not given.
void prepare_out(const Common& c, const std::string& marker) {
    if (c.out_dir.empty()) throw ConfigError("--out is required");
    const fs::path dir(c.out_dir);
    if (fs::exists(dir / marker) && !c.force) {
        throw Error((dir / marker).string() + " exists; pass --force to overwrite");
    }
    fs::create_directories(dir);
}

void persist_config(const Common& c, const config::ExperimentConfig& cfg) {
    write_text(fs::path(c.out_dir) / "config.ini", config::dump(cfg));
}

nlohmann::ordered_json spec_json(const data::SynthSpec& s) {
    nlohmann::ordered_json j;
    j["classes"] = s.num_classes;
    j["clients"] = s.num_clients;
    j["samples_per_client"] = s.samples_per_client;
    j["height"] = s.height;
    j["width"] = s.width;
    j["channels"] = s.channels;
    j["noise_sigma"] = s.noise_sigma;
    j["texture_amplitude"] = s.texture_amplitude;
    j["class_tint"] = s.class_tint;
    j["brightness_jitter"] = s.brightness_jitter;
    return j;
}

// Partition from gen-data output; it must have been generated with the
// same [data] section and seed as `cfg`.
data::Partition load_partition(const fs::path& dir, const config::ExperimentConfig& cfg) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest: " + std::string(e.what()));
    }
    if (manifest.at("seed").get<std::uint64_t>() != cfg.seed ||
        manifest.at("spec") != nlohmann::json(spec_json(cfg.data))) {
        throw ConfigError("--data " + dir.string() + " was generated with a different [data] section or seed");
    }
    data::Partition part;
    part.spec = cfg.data;
    part.seed = cfg.seed;
    for (const auto& entry : manifest.at("clients")) {
        io::Bytes bytes = io::read_file(dir / entry.at("file").get<std::string>());
        if (hex_digest(fed::digest_bytes(bytes)) != entry.at("digest").get<std::string>()) {
            throw FormatError(entry.at("file").get<std::string>() + ": digest mismatch");
        }
        part.clients.push_back(data::decode_client(bytes));
    }
    return part;
}

data::Partition partition_for(const Common& c, const config::ExperimentConfig& cfg) {
    if (!c.data_dir.empty()) return load_partition(c.data_dir, cfg);
    return data::generate(cfg.data, cfg.seed);
}

int cmd_gen_data(const Common& c) {
    const auto cfg = load_config(c);
    prepare_out(c, "manifest.json");
    const data::Partition part = data::generate(cfg.data, cfg.seed);
    nlohmann::ordered_json manifest;
    manifest["format"] = "fedssl-data/1";
    manifest["seed"] = cfg.seed;
    manifest["spec"] = spec_json(cfg.data);
    manifest["clients"] = nlohmann::ordered_json::array();
    for (const auto& shard : part.clients) {
        char name[32];
        std::snprintf(name, sizeof name, "client_%02u.bin", shard.id);
        const io::Bytes bytes = data::encode_client(shard, cfg.data);
        io::write_file(fs::path(c.out_dir) / name, bytes);
        nlohmann::ordered_json e;
        e["id"] = shard.id;
        e["group"] = std::string(1, static_cast<char>('A' + shard.group));
        e["file"] = name;
        e["train"] = shard.indices(data::Split::train).size();
        e["val"] = shard.indices(data::Split::val).size();
        e["test"] = shard.indices(data::Split::test).size();
        e["digest"] = hex_digest(fed::digest_bytes(bytes));
        manifest["clients"].push_back(e);
    }
    write_text(fs::path(c.out_dir) / "manifest.json", manifest.dump(2) + "\n");
    persist_config(c, cfg);
    std::cout << "wrote " << part.clients.size() << " client files to " << c.out_dir << "\n";
    return 0;
}

int cmd_pretrain(const Common& c) {
    const auto cfg = load_config(c);
    prepare_out(c, "checkpoint.bin");
    const data::Partition part = partition_for(c, cfg);
    persist_config(c, cfg);
    const fed::PretrainResult res = experiment::pretrain(cfg, part, cfg.seed, c.workers);
    const fs::path out(c.out_dir);
    io::save_checkpoint(out / "checkpoint.bin", res.checkpoint);
    write_text(out / "transcript.jsonl", res.transcript.to_jsonl());
    std::ostringstream losses;
    losses << "round,client,mean_loss,steps\n";
    char buf[96];
    for (const auto& r : res.rounds) {
        for (const auto& cr : r.clients) {
            std::snprintf(buf, sizeof buf, "%llu,%u,%.9g,%zu\n", static_cast<unsigned long long>(r.round), cr.client,
                          cr.mean_loss, cr.losses.size());
            losses << buf;
        }
    }
    write_text(out / "losses.csv", losses.str());
    const std::string d = hex_digest(digest(res.checkpoint));
    std::cout << "checkpoint " << (out / "checkpoint.bin").string() << " digest " << d << "\n";
    return 0;
}

int cmd_finetune(const Common& c, const std::string& checkpoint, bool random_init) {
    const auto cfg = load_config(c);
    if (checkpoint.empty() == !random_init) throw ConfigError("give exactly one of --checkpoint and --random-init");
    prepare_out(c, "metrics.csv");
    const data::Partition part = partition_for(c, cfg);
    const ParamSet model =
        random_init ? experiment::initial_model(cfg, cfg.seed) : io::load_checkpoint(checkpoint);
    persist_config(c, cfg);
    const eval::FinetuneResult res = experiment::finetune(cfg, model, part, cfg.seed, c.workers);
    eval::MetricsRow row;
    row.run_id = random_init ? "random" : hex_digest(digest(model));
    row.stage = "finetune";
    row.mode = cfg.finetune.mode == eval::Mode::federated ? "federated" : "local";
    row.label_fraction = cfg.finetune.label_fraction;
    row.seed = cfg.seed;
    row.metrics = res.metrics;
    const fs::path out(c.out_dir);
    write_text(out / "metrics.csv", eval::csv_header() + "\n" + eval::csv_row(row) + "\n");
    write_text(out / "metrics.jsonl", eval::jsonl_row(row) + "\n");
    std::printf("macro_recall=%.4f macro_f1=%.4f macro_auc=%.4f\n", res.metrics.macro_recall, res.metrics.macro_f1,
                res.metrics.macro_auc);
    return 0;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

int cmd_ablate(const Common& c, const std::string& variants_arg, const std::string& seeds_arg) {
    const auto cfg = load_config(c);
    std::vector<std::string> variants =
        variants_arg.empty() ? experiment::default_variants(cfg.protocol) : split_list(variants_arg);
    for (const auto& v : variants) experiment::parse_variant(v);
    std::vector<std::uint64_t> seeds;
    if (seeds_arg.empty()) {
        seeds.push_back(cfg.seed);
    } else {
        for (const auto& s : split_list(seeds_arg)) {
            try {
                seeds.push_back(std::stoull(s));
            } catch (const std::exception&) {
                throw ConfigError("--seeds: '" + s + "' is not a non-negative integer");
            }
        }
    }
    prepare_out(c, "ablation.csv");
    persist_config(c, cfg);
    const auto rows = experiment::ablate(cfg, variants, seeds, c.workers,
                                         [](const std::string& line) { std::cerr << line << std::endl; });

    std::ostringstream table;
    table << experiment::ablation_csv_header() << "\n";
    for (const auto& r : rows) table << experiment::ablation_csv_row(r) << "\n";
    write_text(fs::path(c.out_dir) / "ablation.csv", table.str());

    // per-variant means, in the order the variants were listed
    std::ostringstream summary;
    summary << "variant,label,seeds,macro_recall,macro_f1,macro_auc\n";
    std::vector<std::string> order;
    std::map<std::string, std::array<double, 4>> acc;
    std::map<std::string, std::string> labels;
    for (const auto& r : rows) {
        auto [it, fresh] = acc.try_emplace(r.variant.key, std::array<double, 4>{0, 0, 0, 0});
        if (fresh) order.push_back(r.variant.key);
        labels[r.variant.key] = r.variant.label;
        it->second[0] += 1;
        it->second[1] += r.metrics.macro_recall;
        it->second[2] += r.metrics.macro_f1;
        it->second[3] += r.metrics.macro_auc;
    }
    char buf[256];
    for (const auto& k : order) {
        const auto& a = acc[k];
        std::snprintf(buf, sizeof buf, "%s,%s,%.0f,%.6f,%.6f,%.6f\n", k.c_str(), labels[k].c_str(), a[0], a[1] / a[0],
                      a[2] / a[0], a[3] / a[0]);
        summary << buf;
    }
    write_text(fs::path(c.out_dir) / "ablation_summary.csv", summary.str());
    std::cout << summary.str();
    return 0;
}

int cmd_gradcheck(const std::string& fault, const std::string& out_dir) {
    if (!fault.empty()) testing::inject_backward_fault(fault);
    const gradcheck::Report report = gradcheck::run(gradcheck::default_registry());
    testing::clear_backward_fault();
    const std::string text = report.to_text();
    std::cout << text;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "gradcheck.txt", text);
    }
    if (!report.ok()) {
        std::cerr << "gradcheck failed:";
        for (const auto& f : report.failures()) std::cerr << ' ' << f;
        std::cerr << '\n';
        return kExitRuntime;
    }
    return 0;
}

void add_common(CLI::App* sub, Common& c, bool with_data) {
    sub->add_option("--config", c.config_path, "experiment config file (defaults when omitted)");
    sub->add_option("--out", c.out_dir, "output directory");
    sub->add_flag("--force", c.force, "overwrite existing outputs");
    sub->add_option("--workers", c.workers, "parallel client threads (results do not depend on it)");
    sub->add_option("--seed", c.seed_override, "override [experiment] seed");
    if (with_data) sub->add_option("--data", c.data_dir, "read the partition written by gen-data");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated self-supervised pretraining on synthetic multi-site images"};
    app.require_subcommand(0, 1);
    bool dump_defaults = false;
    app.add_flag("--dump-defaults", dump_defaults, "print every config key with its default value and exit");

    Common common;
    std::string checkpoint, variants, seeds, fault;
    bool random_init = false;

    auto* gen = app.add_subcommand("gen-data", "write the synthetic client files and a manifest");
    add_common(gen, common, false);
    auto* pre = app.add_subcommand("pretrain", "federated self-supervised pretraining");
    add_common(pre, common, true);
    auto* fin = app.add_subcommand("finetune", "supervised fine-tuning and evaluation");
    add_common(fin, common, true);
    fin->add_option("--checkpoint", checkpoint, "pretrained checkpoint");
    fin->add_flag("--random-init", random_init, "start from the untrained model instead");
    auto* abl = app.add_subcommand("ablate", "pretrain and fine-tune every variant over several seeds");
    add_common(abl, common, false);
    abl->add_option("--variants", variants, "comma-separated variant keys (default: all for the protocol)");
    abl->add_option("--seeds", seeds, "comma-separated seeds (default: the config seed)");
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every backward rule");
    gc->add_option("--inject-fault", fault, "negate the backward rule of this op (self-test)");
    gc->add_option("--out", common.out_dir, "also write the report here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (dump_defaults) {
            std::cout << config::dump(config::parse(""));
            return 0;
        }
        if (*gen) return cmd_gen_data(common);
        if (*pre) return cmd_pretrain(common);
        if (*fin) return cmd_finetune(common, checkpoint, random_init);
        if (*abl) return cmd_ablate(common, variants, seeds);
        if (*gc) return cmd_gradcheck(fault, common.out_dir);
        std::cout << app.help();
        return kExitConfig;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}
