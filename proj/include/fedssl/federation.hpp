#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedssl/contrastive.hpp"
#include "fedssl/data.hpp"
#include "fedssl/mae.hpp"
#include "fedssl/nets.hpp"
#include "fedssl/optim.hpp"
#include "fedssl/param_set.hpp"
#include "fedssl/serialize.hpp"

namespace fedssl::fed {

// Which part of the masked autoencoder is averaged every round. Everything
// outside the set stays on the clients and is averaged once, after the last
// round.
enum class SyncSet { encoder_plus_decoder, wo_decoder, wo_linear_projection, wo_decoder_projection, wo_class_token };

std::string to_string(SyncSet s);
SyncSet parse_sync_set(const std::string& s);  // ConfigError
// Row label used in ablation tables, e.g. "W/o Class Token".
std::string table_label(SyncSet s);
const std::vector<SyncSet>& all_sync_sets();

// Names synchronized every round, in model order. Stable for a fixed model.
std::vector<std::string> resolve_sync_set(const ParamSet& model, SyncSet s);
// Tags names in the set global and everything else local.
void apply_sync_tags(ParamSet& model, SyncSet s);

struct ClientParams {
    std::uint32_t client = 0;
    double size = 0.0;  // |D_c|
    ParamSet params;
};

// Weighted mean of `names` over clients (weights |D_c|, or equal weights with
// uniform); every other name keeps the value in `server`. Clients are reduced
// in increasing id order as theta_1 + sum_c w_c/W (theta_c - theta_1), so
// identical inputs reproduce theta_1 bitwise.
// ContractError on an empty list or non-positive size; SchemaError if a
// client's schema differs from the server's.
ParamSet fedavg(const ParamSet& server, std::vector<ClientParams> clients, const std::vector<std::string>& names,
                bool uniform = false);

// JSON-lines log: {"round":r,"event":e,"client":c|null,"digest":"<16 hex>"}.
struct TranscriptRecord {
    std::uint64_t round = 0;
    std::string event;
    std::optional<std::uint32_t> client;
    std::uint64_t digest = 0;
};

class Transcript {
public:
    void add(std::uint64_t round, std::string event, std::optional<std::uint32_t> client, std::uint64_t digest);
    const std::vector<TranscriptRecord>& records() const { return records_; }
    std::vector<TranscriptRecord> find(const std::string& event) const;
    std::string to_jsonl() const;
    static Transcript parse_jsonl(const std::string& text);  // FormatError

private:
    std::vector<TranscriptRecord> records_;
};

std::uint64_t digest_bytes(std::span<const std::uint8_t> bytes);

// In-process transport. Every message is encoded, copied and decoded, so the
// receiver never shares storage with the sender.
struct Transport {
    static io::Bytes send(const io::Bytes& payload) { return payload; }
    static ParamSet send_params(const ParamSet& params, std::uint64_t* digest_out = nullptr);
};

struct ServerState {
    ParamSet global;
    std::uint64_t round = 0;
    std::map<std::uint32_t, double> sizes;
    std::map<std::uint32_t, contrastive::FeatureBank> banks;  // latest uploaded Q_l per client
    Transcript transcript;
};

enum class MomentumSync { reset, keep };

struct FedClfConfig {
    nets::CnnConfig net;
    contrastive::ContrastiveConfig cl;
    OptimizerConfig opt;  // sgd, lr 0.03, momentum 0.9
    std::size_t rounds = 30;
    std::size_t local_epochs = 1;
    double active_ratio = 1.0;
    bool uniform_avg = false;
    bool cosine = true;
    MomentumSync sync_momentum = MomentumSync::reset;
};

struct FedMaeConfig {
    mae::MaeConfig mae;
    OptimizerConfig opt = [] {
        OptimizerConfig o;
        o.kind = OptimizerConfig::Kind::adam;
        o.lr = 1e-3;
        return o;
    }();
    SyncSet sync = SyncSet::wo_class_token;
    std::size_t rounds = 10;
    std::size_t local_epochs = 10;
    double active_ratio = 1.0;
    bool uniform_avg = false;
    bool cosine = true;
};

struct RunOptions {
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    // Called on the worker before a client trains; throwing aborts the round.
    std::function<void(std::uint32_t client, std::uint64_t round)> client_hook;
    // FedMAE: called with each encoder index set.
    std::function<void(std::uint32_t client, const nets::IndexLists&)> encoder_trace;
};

struct ClfClient {
    contrastive::Learner learner;
    const data::ClientShard* shard = nullptr;
    data::ImageGeom geom{3, 32, 32};
    std::vector<std::size_t> train;
    contrastive::NegativeAudit audit;  // cumulative
};

struct MaeClient {
    std::uint32_t id = 0;
    ParamSet params;
    Optimizer opt{OptimizerConfig{}};
    const data::ClientShard* shard = nullptr;
    std::vector<std::size_t> train;
};

struct ClientReport {
    std::uint32_t client = 0;
    std::vector<double> losses;
    double mean_loss = 0.0;
    contrastive::NegativeAudit audit;  // this round only (FedCLF)
    std::size_t remote_self_origin = 0;  // entries of the received Q_r from this client
};

struct RoundReport {
    std::uint64_t round = 0;
    std::vector<ClientReport> clients;
    std::uint64_t global_digest = 0;
};

// Initial global model and clients. FedCLF clients fill Q_l from their clean
// train images with the initial momentum model and upload it, so round 0
// already has remote features.
ServerState init_fedclf(const FedClfConfig& cfg, const data::Partition& part, std::vector<ClfClient>& clients,
                        const RunOptions& opts);
ServerState init_fedmae(const FedMaeConfig& cfg, const data::Partition& part, std::vector<MaeClient>& clients,
                        const RunOptions& opts);

// One synchronous round. On any client failure the server state is left as
// it was before aggregation, an "abort" record is logged and RoundAborted is
// thrown.
RoundReport run_round_fedclf(ServerState& server, std::vector<ClfClient>& clients, const FedClfConfig& cfg,
                             const RunOptions& opts);
RoundReport run_round_fedmae(ServerState& server, std::vector<MaeClient>& clients, const FedMaeConfig& cfg,
                             const RunOptions& opts);

enum class Protocol { fedclf, fedmae };

struct PretrainResult {
    ParamSet checkpoint;
    Transcript transcript;
    std::vector<RoundReport> rounds;
};

PretrainResult run_fedclf(const FedClfConfig& cfg, const data::Partition& part, const RunOptions& opts);
PretrainResult run_fedmae(const FedMaeConfig& cfg, const data::Partition& part, const RunOptions& opts);

// Runs `fn(i)` for i in [0, n) on up to `workers` threads. The first
// exception (lowest i) is rethrown after all tasks finish.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace fedssl::fed
