#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fedssl/config.hpp"
#include "fedssl/eval.hpp"
#include "fedssl/federation.hpp"

// Pretrain-then-fine-tune pipelines shared by the command line and the
// acceptance suite.
namespace fedssl::experiment {

// The untrained model pretraining starts from: drawn from the "init" stream
// of `seed`, so it is also the random-initialization baseline.
ParamSet initial_model(const config::ExperimentConfig& cfg, std::uint64_t seed);

fed::PretrainResult pretrain(const config::ExperimentConfig& cfg, const data::Partition& part, std::uint64_t seed,
                             std::size_t workers);

eval::FinetuneResult finetune(const config::ExperimentConfig& cfg, const ParamSet& checkpoint,
                              const data::Partition& part, std::uint64_t seed, std::size_t workers);

// One ablation arm. Keys:
//   random                                   no pretraining
//   none | with_local | remote_only          FedCLF negatives
//   encoder_plus_decoder | wo_decoder | ...  FedMAE sync set
struct Variant {
    std::string key;
    std::string label;  // table row name
    bool pretrained = true;
};

Variant parse_variant(const std::string& key);  // ConfigError
std::vector<std::string> default_variants(fed::Protocol p);
// Config with the variant's protocol and setting applied.
config::ExperimentConfig apply_variant(config::ExperimentConfig cfg, const Variant& v);

struct AblationRow {
    Variant variant;
    std::uint64_t seed = 0;
    eval::MetricsRecord metrics;
    std::uint64_t checkpoint_digest = 0;  // 0 for random
};

using Progress = std::function<void(const std::string&)>;

// Every variant on every seed. Data depend only on (data spec, seed), so
// all variants of one seed see the same partition.
std::vector<AblationRow> ablate(const config::ExperimentConfig& cfg, const std::vector<std::string>& variants,
                                const std::vector<std::uint64_t>& seeds, std::size_t workers,
                                const Progress& progress = {});

std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& row);

}  // namespace fedssl::experiment
