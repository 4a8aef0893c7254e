#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedssl/data.hpp"
#include "fedssl/nets.hpp"
#include "fedssl/optim.hpp"
#include "fedssl/param_set.hpp"

namespace fedssl::eval {

// All values in [0,1]. Macro values are unweighted means over classes.
struct MetricsRecord {
    std::size_t num_classes = 0;
    std::size_t samples = 0;
    std::vector<double> recall, precision, specificity, f1;
    std::vector<double> auc;  // per class; excluded classes hold 0
    double macro_recall = 0.0;  // balanced accuracy
    double macro_precision = 0.0;
    double macro_f1 = 0.0;
    double macro_specificity = 0.0;
    double macro_auc = 0.0;
    double accuracy = 0.0;
    // zero denominators and AUC exclusions, e.g. "precision[3]:no predictions"
    std::vector<std::string> flags;
};

// Confusion-matrix metrics. A zero denominator yields 0 and a flag.
// ContractError on empty or unequal inputs; IndexError on out-of-range ids.
MetricsRecord confusion_metrics(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                                std::size_t num_classes);

struct AucResult {
    double macro = 0.0;
    std::vector<double> per_class;
    std::vector<std::size_t> excluded;  // classes with no positives or no negatives
};

// One-vs-rest AUC per class from the Mann-Whitney statistic (ties count 1/2),
// averaged over classes that have both positives and negatives.
// scores is row-major (n, num_classes).
AucResult macro_auc(const std::vector<double>& scores, const std::vector<std::size_t>& labels,
                    std::size_t num_classes);

// Predictions are argmax with ties to the lowest class id.
MetricsRecord evaluate_scores(const std::vector<double>& scores, const std::vector<std::size_t>& labels,
                              std::size_t num_classes);

enum class Mode { local, federated };
enum class Backbone { cnn, vit };

struct FinetuneConfig {
    Mode mode = Mode::federated;
    double label_fraction = 0.1;
    std::size_t rounds = 20;        // federated
    std::size_t local_epochs = 1;   // per round (federated)
    std::size_t epochs = 40;        // local mode
    std::size_t batch = 16;
    OptimizerConfig opt = [] {
        OptimizerConfig o;
        o.kind = OptimizerConfig::Kind::adam;
        o.lr = 1e-3;
        return o;
    }();
    bool freeze_encoder = false;
    bool zero_head_init = false;
    bool uniform_avg = false;
    bool augment = true;  // random flip only
};

struct Encoder {
    Backbone backbone = Backbone::cnn;
    nets::CnnConfig cnn;
    nets::VitConfig vit;

    std::size_t feature_dim() const { return backbone == Backbone::cnn ? cnn.feature_dim() : vit.embed_dim; }
    // Fresh encoder.* parameters (the schema a checkpoint must match).
    ParamSet init(Rng& rng) const;
    // (B,C,H,W) -> (B, feature_dim)
    Tensor features(const ParamSet& params, const Tensor& x) const;
};

struct FinetuneResult {
    MetricsRecord metrics;
    double train_accuracy = 0.0;        // on the labeled subset
    std::vector<ParamSet> models;       // one per client (local) or the global model (federated)
};

// Fine-tunes encoder.* of `checkpoint` plus a linear classifier on the
// labeled subset. Federated mode averages encoder and head every round and
// evaluates on the pooled test splits; local mode trains every client alone
// and averages its device-level metrics uniformly.
// SchemaError if the checkpoint's encoder does not match `enc`.
FinetuneResult finetune(const ParamSet& checkpoint, const Encoder& enc, const FinetuneConfig& cfg,
                        const data::Partition& part, std::uint64_t seed, std::size_t workers = 1);

// CSV with a header row; one row per record.
struct MetricsRow {
    std::string run_id;
    std::string stage;
    std::string mode;
    double label_fraction = 0.0;
    std::uint64_t seed = 0;
    MetricsRecord metrics;
};
std::string csv_header();
std::string csv_row(const MetricsRow& row);
std::string jsonl_row(const MetricsRow& row);

}  // namespace fedssl::eval
