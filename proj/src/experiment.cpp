#include "fedssl/experiment.hpp"

#include <cstdio>

#include "fedssl/errors.hpp"

namespace fedssl::experiment {

ParamSet initial_model(const config::ExperimentConfig& cfg, std::uint64_t seed) {
    Rng init = derive_rng(seed, "init");
    if (cfg.protocol == fed::Protocol::fedclf) return nets::init_cnn(cfg.fedclf.net, init, true);
    return nets::init_mae(cfg.fedmae.mae.vit, init);
}

fed::PretrainResult pretrain(const config::ExperimentConfig& cfg, const data::Partition& part, std::uint64_t seed,
                             std::size_t workers) {
    fed::RunOptions opts;
    opts.seed = seed;
    opts.workers = workers;
    if (cfg.protocol == fed::Protocol::fedclf) return fed::run_fedclf(cfg.fedclf, part, opts);
    return fed::run_fedmae(cfg.fedmae, part, opts);
}

eval::FinetuneResult finetune(const config::ExperimentConfig& cfg, const ParamSet& checkpoint,
                              const data::Partition& part, std::uint64_t seed, std::size_t workers) {
    return eval::finetune(checkpoint, cfg.encoder(), cfg.finetune, part, seed, workers);
}

namespace {

const std::vector<std::pair<std::string, contrastive::BankMode>> kBankVariants = {
    {"none", contrastive::BankMode::none},
    {"with_local", contrastive::BankMode::with_local},
    {"remote_only", contrastive::BankMode::remote_only},
};

std::string bank_label(contrastive::BankMode m) {
    switch (m) {
        case contrastive::BankMode::none: return "W/o FE";
        case contrastive::BankMode::with_local: return "FE";
        case contrastive::BankMode::remote_only: return "FE+Neg";
    }
    return "?";
}

}  // namespace

Variant parse_variant(const std::string& key) {
    if (key == "random") return {key, "Random Init.", false};
    for (const auto& [name, mode] : kBankVariants) {
        if (name == key) return {key, bank_label(mode), true};
    }
    for (fed::SyncSet s : fed::all_sync_sets()) {
        if (fed::to_string(s) == key) return {key, fed::table_label(s), true};
    }
    std::string known = "random";
    for (const auto& kv : kBankVariants) known += ", " + kv.first;
    for (fed::SyncSet s : fed::all_sync_sets()) known += ", " + fed::to_string(s);
    throw ConfigError("unknown variant '" + key + "' (known: " + known + ")");
}

std::vector<std::string> default_variants(fed::Protocol p) {
    std::vector<std::string> out;
    if (p == fed::Protocol::fedclf) {
        for (const auto& kv : kBankVariants) out.push_back(kv.first);
    } else {
        for (fed::SyncSet s : fed::all_sync_sets()) out.push_back(fed::to_string(s));
    }
    return out;
}

config::ExperimentConfig apply_variant(config::ExperimentConfig cfg, const Variant& v) {
    for (const auto& [name, mode] : kBankVariants) {
        if (name == v.key) {
            cfg.protocol = fed::Protocol::fedclf;
            cfg.fedclf.cl.mode = mode;
        }
    }
    for (fed::SyncSet s : fed::all_sync_sets()) {
        if (fed::to_string(s) == v.key) {
            cfg.protocol = fed::Protocol::fedmae;
            cfg.fedmae.sync = s;
        }
    }
    return cfg;
}

std::vector<AblationRow> ablate(const config::ExperimentConfig& cfg, const std::vector<std::string>& variants,
                                const std::vector<std::uint64_t>& seeds, std::size_t workers,
                                const Progress& progress) {
    if (variants.empty() || seeds.empty()) throw ConfigError("ablation needs at least one variant and one seed");
    std::vector<Variant> parsed;
    for (const auto& k : variants) parsed.push_back(parse_variant(k));
    std::vector<AblationRow> rows;
    for (std::uint64_t seed : seeds) {
        const data::Partition part = data::generate(cfg.data, seed);
        for (const Variant& v : parsed) {
            const config::ExperimentConfig vc = apply_variant(cfg, v);
            AblationRow row;
            row.variant = v;
            row.seed = seed;
            ParamSet model;
            if (v.pretrained) {
                model = pretrain(vc, part, seed, workers).checkpoint;
                row.checkpoint_digest = digest(model);
            } else {
                model = initial_model(vc, seed);
            }
            row.metrics = finetune(vc, model, part, seed, workers).metrics;
            if (progress) {
                char buf[160];
                std::snprintf(buf, sizeof buf, "%s seed=%llu macro_recall=%.4f macro_f1=%.4f", v.key.c_str(),
                              static_cast<unsigned long long>(seed), row.metrics.macro_recall, row.metrics.macro_f1);
                progress(buf);
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::string ablation_csv_header() {
    return "variant,label,seed,macro_recall,macro_precision,macro_f1,macro_specificity,macro_auc,accuracy,"
           "checkpoint_digest";
}

std::string ablation_csv_row(const AblationRow& r) {
    char buf[512];
    const auto& m = r.metrics;
    std::snprintf(buf, sizeof buf, "%s,%s,%llu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%s", r.variant.key.c_str(),
                  r.variant.label.c_str(), static_cast<unsigned long long>(r.seed), m.macro_recall,
                  m.macro_precision, m.macro_f1, m.macro_specificity, m.macro_auc, m.accuracy,
                  r.variant.pretrained ? hex_digest(r.checkpoint_digest).c_str() : "");
    return buf;
}

}  // namespace fedssl::experiment
