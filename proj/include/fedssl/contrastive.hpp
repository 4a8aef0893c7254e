#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <vector>

#include "fedssl/data.hpp"
#include "fedssl/nets.hpp"
#include "fedssl/optim.hpp"
#include "fedssl/param_set.hpp"
#include "fedssl/rng.hpp"
#include "fedssl/tensor.hpp"

namespace fedssl::contrastive {

enum class BankTag : std::uint8_t { local, remote };

// Placeholder origin written into de-identified snapshots.
inline constexpr std::uint32_t kAnonymousOrigin = 0xFFFFFFFFu;

struct FeatureEntry {
    std::vector<double> feature;  // unit norm
    std::uint32_t origin = kAnonymousOrigin;
    BankTag tag = BankTag::local;
};

// Fixed-capacity FIFO of unit-norm features. Pushing into a full bank evicts
// the oldest entry. All entries share one width.
class FeatureBank {
public:
    explicit FeatureBank(std::size_t capacity = 256);

    // ContractError if |norm - 1| > 1e-6 or the width differs from the bank's.
    void push(FeatureEntry e);
    // One entry per row of a (B, D) tensor.
    void push_rows(const Tensor& rows, std::uint32_t origin, BankTag tag);
    void clear() { entries_.clear(); }

    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    bool empty() const { return entries_.empty(); }
    std::size_t width() const { return entries_.empty() ? 0 : entries_.front().feature.size(); }
    const std::deque<FeatureEntry>& entries() const { return entries_; }
    std::size_t count_origin(std::uint32_t origin) const;

    // (size, width), no grad; undefined Tensor when empty.
    Tensor as_tensor() const;

private:
    std::size_t capacity_;
    std::deque<FeatureEntry> entries_;
};

// Snapshot: u64 count | u32 width | per entry: u32 origin, f64[width].
// With anonymize, every origin is written as kAnonymousOrigin.
std::vector<std::uint8_t> encode_snapshot(const FeatureBank& bank, bool anonymize);
// Capacity of the result is max(count, capacity).
FeatureBank decode_snapshot(std::span<const std::uint8_t> bytes, std::size_t capacity, BankTag tag);

struct DualModel {
    ParamSet main;
    ParamSet momentum;  // requires_grad false, never handed to an optimizer
};

// Momentum copy starts equal to main.
DualModel make_dual(const ParamSet& main);

// theta_mom <- m * theta_mom + (1 - m) * theta_main for every parameter.
// ContractError unless 0 <= m < 1; ShapeError on mismatched schemas.
void momentum_update(DualModel& dual, double m);

// Momentum-model features of x (no grad), appended to `bank` with the given
// origin and local tag. Returns the (B, D) features.
Tensor encode_local_features(const DualModel& dual, const nets::CnnConfig& cfg, const Tensor& x,
                             std::uint32_t origin, FeatureBank& bank);

// Union of every other client's local bank, shuffled by the server stream.
// Entries keep their true origin; capacity equals the union size.
// ContractError if `banks` holds self_id or any entry originates from it.
FeatureBank build_remote_bank(const std::map<std::uint32_t, FeatureBank>& banks, std::uint32_t self_id,
                              Rng& rng);

// B uniform draws with replacement. EmptyBankError on an empty bank.
std::vector<FeatureEntry> sample_remote(const FeatureBank& remote, std::size_t batch, Rng& rng);

enum class BankMode {
    none,         // no feature exchange: Q_CL tracks local features only
    with_local,   // Q_CL starts as Q_l and takes local + sampled remote
    remote_only,  // Q_CL starts as Q_r and takes sampled remote only
};

// Round-start Q_CL. Capacity K; for remote_only the last K entries of Q_r
// are kept.
FeatureBank init_qcl(const FeatureBank& local, const FeatureBank& remote, BankMode mode, std::size_t capacity);
// FIFO replacement by the mode's update set.
void update_qcl(FeatureBank& qcl, const std::vector<FeatureEntry>& local, const std::vector<FeatureEntry>& remote,
                BankMode mode);

// Mean over rows of -log(exp(q.k/tau) / (exp(q.k/tau) + sum_n exp(q.n/tau))).
// q and k_plus are (B, D) or (D); negatives is (n, D) or undefined (empty).
// ContractError if tau <= 0.
Tensor info_nce(const Tensor& q, const Tensor& k_plus, const Tensor& negatives, double tau);

enum class BankSource { kplus, clean };

struct ContrastiveConfig {
    double tau = 0.07;
    double momentum = 0.99;
    std::size_t bank_capacity = 256;
    std::size_t batch = 32;
    BankMode mode = BankMode::remote_only;
    BankSource bank_source = BankSource::kplus;
    data::AugmentConfig augment = data::AugmentConfig::contrastive();
};

// Everything one client keeps between contrastive steps.
struct Learner {
    std::uint32_t id = 0;
    nets::CnnConfig net;
    DualModel model;
    Optimizer opt{OptimizerConfig{}};
    FeatureBank local{256};
    FeatureBank remote{256};
    FeatureBank qcl{256};
};

// Counts every negative presented to the loss.
struct NegativeAudit {
    std::size_t evaluations = 0;
    std::size_t negatives = 0;
    std::size_t self_origin = 0;
};

struct StepRngs {
    Rng* augment;
    Rng* sampling;
};

// One optimizer step on a batch of images (each (C,H,W) in [0,1]).
// Returns the batch-mean loss.
double local_cl_step(Learner& learner, const std::vector<std::span<const double>>& images,
                     const data::ImageGeom& geom, const ContrastiveConfig& cfg, StepRngs rngs,
                     NegativeAudit* audit = nullptr);

}  // namespace fedssl::contrastive
