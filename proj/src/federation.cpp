#include "fedssl/federation.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <json.hpp>
#include <numeric>
#include <sstream>
#include <thread>

#include "fedssl/errors.hpp"

namespace fedssl::fed {

namespace {

// rng round index for the pre-round-0 bank fill
constexpr std::uint64_t kBootstrapRound = 0xB007;

struct SyncInfo {
    SyncSet set;
    const char* key;
    const char* label;
};

constexpr SyncInfo kSyncInfo[] = {
    {SyncSet::encoder_plus_decoder, "encoder_plus_decoder", "Encoder+Decoder"},
    {SyncSet::wo_decoder, "wo_decoder", "W/o Decoder"},
    {SyncSet::wo_linear_projection, "wo_linear_projection", "W/o Linear Projection"},
    {SyncSet::wo_decoder_projection, "wo_decoder_projection", "W/o Decoder Projection"},
    {SyncSet::wo_class_token, "wo_class_token", "W/o Class Token"},
};

const SyncInfo& info(SyncSet s) {
    for (auto& i : kSyncInfo) {
        if (i.set == s) return i;
    }
    throw ContractError("unknown sync set");
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

bool excluded(const std::string& name, SyncSet s) {
    switch (s) {
        case SyncSet::encoder_plus_decoder:
            return false;
        case SyncSet::wo_decoder:
            return starts_with(name, "decoder.");
        case SyncSet::wo_linear_projection:
            return starts_with(name, "encoder.patch_embed.");
        case SyncSet::wo_decoder_projection:
            return starts_with(name, "decoder.embed.");
        case SyncSet::wo_class_token:
            return name == "encoder.cls_token";
    }
    return false;
}

ParamSet select(const ParamSet& p, const std::vector<std::string>& names) {
    ParamSet out;
    for (auto& n : names) out.add(n, p.at(n), p.tag(n));
    return out;
}

std::vector<std::string> complement(const ParamSet& p, const std::vector<std::string>& names) {
    std::vector<std::string> out;
    for (auto& e : p.entries()) {
        if (std::find(names.begin(), names.end(), e.name) == names.end()) out.push_back(e.name);
    }
    return out;
}

// Active clients for a round, as indices into `ids`, in increasing id order.
std::vector<std::size_t> select_active(const std::vector<std::uint32_t>& ids, double ratio, std::uint64_t seed,
                                       std::uint64_t round) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("active_ratio must be in (0, 1]");
    std::vector<std::size_t> idx(ids.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (ratio < 1.0) {
        auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ids.size()))));
        Rng rng = derive_rng(seed, "server", round, 0xAC71FEu);
        shuffle(idx, rng);
        idx.resize(k);
    }
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
    return idx;
}

double round_lr(double base, bool cosine, std::uint64_t round, std::size_t rounds) {
    if (!cosine || rounds == 0) return base;
    auto t = static_cast<std::int64_t>(std::min<std::uint64_t>(round, rounds));
    return cosine_lr(base, t, static_cast<std::int64_t>(rounds));
}

template <typename F>
void run_clients(ServerState& server, std::size_t n, std::size_t workers, F&& fn) {
    try {
        parallel_for(n, workers, fn);
    } catch (const std::exception& e) {
        server.transcript.add(server.round, "abort", std::nullopt, 0);
        throw RoundAborted("round " + std::to_string(server.round) + " aborted: " + e.what());
    }
}

}  // namespace

std::string to_string(SyncSet s) { return info(s).key; }

SyncSet parse_sync_set(const std::string& s) {
    for (auto& i : kSyncInfo) {
        if (s == i.key) return i.set;
    }
    throw ConfigError("unknown sync set '" + s + "'");
}

std::string table_label(SyncSet s) { return info(s).label; }

const std::vector<SyncSet>& all_sync_sets() {
    static const std::vector<SyncSet> v = {SyncSet::encoder_plus_decoder, SyncSet::wo_decoder,
                                           SyncSet::wo_linear_projection, SyncSet::wo_decoder_projection,
                                           SyncSet::wo_class_token};
    return v;
}

std::vector<std::string> resolve_sync_set(const ParamSet& model, SyncSet s) {
    std::vector<std::string> out;
    for (auto& e : model.entries()) {
        if (!excluded(e.name, s)) out.push_back(e.name);
    }
    return out;
}

void apply_sync_tags(ParamSet& model, SyncSet s) {
    for (auto& name : model.names()) model.set_tag(name, excluded(name, s) ? Knowledge::local : Knowledge::global);
}

ParamSet fedavg(const ParamSet& server, std::vector<ClientParams> clients, const std::vector<std::string>& names,
                bool uniform) {
    if (clients.empty()) throw ContractError("fedavg needs at least one client");
    std::sort(clients.begin(), clients.end(), [](auto& a, auto& b) { return a.client < b.client; });
    double total = 0.0;
    for (auto& c : clients) {
        require_same_schema(server, c.params);
        if (!(c.size > 0.0)) throw ContractError("client " + std::to_string(c.client) + " has non-positive size");
        total += c.size;
    }
    if (uniform) total = static_cast<double>(clients.size());
    ParamSet out = server.clone();
    for (auto& name : names) {
        auto ref = clients.front().params.at(name).data();
        std::vector<double> acc(ref.begin(), ref.end());
        for (auto& c : clients) {
            const double w = (uniform ? 1.0 : c.size) / total;
            auto src = c.params.at(name).data();
            for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w * (src[j] - ref[j]);
        }
        auto dst = out.at(name).mutable_data();
        std::copy(acc.begin(), acc.end(), dst.begin());
    }
    return out;
}

void Transcript::add(std::uint64_t round, std::string event, std::optional<std::uint32_t> client,
                     std::uint64_t digest) {
    records_.push_back({round, std::move(event), client, digest});
}

std::vector<TranscriptRecord> Transcript::find(const std::string& event) const {
    std::vector<TranscriptRecord> out;
    for (auto& r : records_) {
        if (r.event == event) out.push_back(r);
    }
    return out;
}

std::string Transcript::to_jsonl() const {
    std::string out;
    for (auto& r : records_) {
        nlohmann::ordered_json j;
        j["round"] = r.round;
        j["event"] = r.event;
        j["client"] = r.client ? nlohmann::ordered_json(*r.client) : nlohmann::ordered_json(nullptr);
        j["digest"] = hex_digest(r.digest);
        out += j.dump();
        out += '\n';
    }
    return out;
}

Transcript Transcript::parse_jsonl(const std::string& text) {
    Transcript t;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            std::optional<std::uint32_t> client;
            if (!j.at("client").is_null()) client = j.at("client").get<std::uint32_t>();
            t.add(j.at("round").get<std::uint64_t>(), j.at("event").get<std::string>(), client,
                  std::stoull(j.at("digest").get<std::string>(), nullptr, 16));
        } catch (const std::exception& e) {
            throw FormatError(std::string("bad transcript line: ") + e.what());
        }
    }
    return t;
}

std::uint64_t digest_bytes(std::span<const std::uint8_t> bytes) {
    Fnv1a h;
    h.update(bytes.data(), bytes.size());
    return h.value();
}

ParamSet Transport::send_params(const ParamSet& params, std::uint64_t* digest_out) {
    io::Bytes wire = send(io::encode_checkpoint(params));
    ParamSet out = io::decode_checkpoint(wire);
    for (auto& e : params.entries()) out.set_tag(e.name, e.tag);
    if (digest_out) *digest_out = digest(out);
    return out;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    std::vector<std::exception_ptr> errors(n);
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(workers, n); ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

ServerState init_fedclf(const FedClfConfig& cfg, const data::Partition& part, std::vector<ClfClient>& clients,
                        const RunOptions& opts) {
    ServerState server;
    Rng init = derive_rng(opts.seed, "init");
    server.global = nets::init_cnn(cfg.net, init, true);
    clients.clear();
    const std::size_t k = cfg.cl.bank_capacity;
    for (auto& shard : part.clients) {
        ClfClient c;
        c.shard = &shard;
        c.geom = {part.spec.channels, part.spec.height, part.spec.width};
        c.train = shard.indices(data::Split::train);
        c.learner.id = shard.id;
        c.learner.net = cfg.net;
        c.learner.model = contrastive::make_dual(server.global.clone());
        c.learner.opt = Optimizer(cfg.opt);
        c.learner.local = contrastive::FeatureBank(k);
        c.learner.remote = contrastive::FeatureBank(k);
        c.learner.qcl = contrastive::FeatureBank(k);
        if (!c.train.empty()) {
            // same view distribution as the k+ features that replace these later
            Rng aug = derive_rng(opts.seed, "augment", shard.id, kBootstrapRound);
            std::vector<std::vector<double>> views;
            for (auto i : c.train) {
                const auto& px = shard.samples[i].pixels;
                views.push_back(cfg.cl.bank_source == contrastive::BankSource::kplus
                                    ? data::augment(px, c.geom, cfg.cl.augment, aug)
                                    : px);
            }
            contrastive::encode_local_features(c.learner.model, cfg.net, data::stack_pixels(views, part.spec),
                                               shard.id, c.learner.local);
        }
        io::Bytes wire = Transport::send(contrastive::encode_snapshot(c.learner.local, false));
        server.banks.emplace(shard.id, contrastive::decode_snapshot(wire, k, contrastive::BankTag::local));
        server.transcript.add(0, "bootstrap_bank", shard.id, digest_bytes(wire));
        server.sizes[shard.id] = static_cast<double>(c.train.size());
        clients.push_back(std::move(c));
    }
    return server;
}

ServerState init_fedmae(const FedMaeConfig& cfg, const data::Partition& part, std::vector<MaeClient>& clients,
                        const RunOptions& opts) {
    ServerState server;
    Rng init = derive_rng(opts.seed, "init");
    server.global = nets::init_mae(cfg.mae.vit, init);
    apply_sync_tags(server.global, cfg.sync);
    clients.clear();
    for (auto& shard : part.clients) {
        MaeClient c;
        c.id = shard.id;
        c.shard = &shard;
        c.train = shard.indices(data::Split::train);
        c.params = server.global.clone();
        c.opt = Optimizer(cfg.opt);
        server.sizes[shard.id] = static_cast<double>(c.train.size());
        clients.push_back(std::move(c));
    }
    return server;
}

RoundReport run_round_fedclf(ServerState& server, std::vector<ClfClient>& clients, const FedClfConfig& cfg,
                             const RunOptions& opts) {
    const std::uint64_t t = server.round;
    std::vector<std::uint32_t> ids;
    for (auto& c : clients) ids.push_back(c.learner.id);
    const auto active = select_active(ids, cfg.active_ratio, opts.seed, t);
    const double lr = round_lr(cfg.opt.lr, cfg.cosine, t, cfg.rounds);
    const std::size_t k = cfg.cl.bank_capacity;

    RoundReport report;
    report.round = t;
    report.clients.resize(active.size());

    // (1) distribute the global model and each client's de-identified remote bank
    for (std::size_t a = 0; a < active.size(); ++a) {
        ClfClient& c = clients[active[a]];
        contrastive::Learner& L = c.learner;
        std::uint64_t d = 0;
        ParamSet recv = Transport::send_params(server.global, &d);
        server.transcript.add(t, "distribute", L.id, d);
        L.model.main.assign_from(recv);
        if (cfg.sync_momentum == MomentumSync::reset) L.model.momentum.assign_from(recv);

        std::map<std::uint32_t, contrastive::FeatureBank> others;
        for (auto& [cid, bank] : server.banks) {
            if (cid != L.id) others.emplace(cid, bank);
        }
        Rng srng = derive_rng(opts.seed, "server", t, L.id);
        contrastive::FeatureBank qr = contrastive::build_remote_bank(others, L.id, srng);
        io::Bytes wire = Transport::send(contrastive::encode_snapshot(qr, true));
        server.transcript.add(t, "remote_bank", L.id, digest_bytes(wire));
        contrastive::FeatureBank received =
            contrastive::decode_snapshot(wire, qr.size(), contrastive::BankTag::remote);
        // origins travel out of band, for auditing only
        contrastive::FeatureBank audited(received.capacity());
        for (std::size_t i = 0; i < received.size(); ++i) {
            contrastive::FeatureEntry e = received.entries()[i];
            e.origin = qr.entries()[i].origin;
            audited.push(std::move(e));
        }
        L.remote = std::move(audited);
        L.qcl = contrastive::init_qcl(L.local, L.remote, cfg.cl.mode, k);
        L.opt.set_lr(lr);
        report.clients[a].client = L.id;
        report.clients[a].remote_self_origin = L.remote.count_origin(L.id);
    }

    // (2) local contrastive training
    run_clients(server, active.size(), opts.workers, [&](std::size_t a) {
        ClfClient& c = clients[active[a]];
        contrastive::Learner& L = c.learner;
        if (opts.client_hook) opts.client_hook(L.id, t);
        Rng aug = derive_rng(opts.seed, "augment", L.id, t);
        Rng samp = derive_rng(opts.seed, "sampling", L.id, t);
        ClientReport& rep = report.clients[a];
        std::vector<std::size_t> order = c.train;
        for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
            shuffle(order, samp);
            for (std::size_t s = 0; s < order.size(); s += cfg.cl.batch) {
                std::vector<std::span<const double>> imgs;
                for (std::size_t i = s; i < std::min(order.size(), s + cfg.cl.batch); ++i) {
                    imgs.emplace_back(c.shard->samples[order[i]].pixels);
                }
                rep.losses.push_back(
                    contrastive::local_cl_step(L, imgs, c.geom, cfg.cl, {&aug, &samp}, &rep.audit));
            }
        }
    });

    // (3) uploads, (4) aggregation
    std::vector<ClientParams> ups;
    for (std::size_t a = 0; a < active.size(); ++a) {
        ClfClient& c = clients[active[a]];
        const std::uint32_t id = c.learner.id;
        std::uint64_t d = 0;
        ups.push_back({id, server.sizes.at(id), Transport::send_params(c.learner.model.main, &d)});
        server.transcript.add(t, "upload_params", id, d);
        io::Bytes wire = Transport::send(contrastive::encode_snapshot(c.learner.local, false));
        server.banks.insert_or_assign(id, contrastive::decode_snapshot(wire, k, contrastive::BankTag::local));
        server.transcript.add(t, "upload_bank", id, digest_bytes(wire));

        ClientReport& rep = report.clients[a];
        if (!rep.losses.empty()) {
            rep.mean_loss = std::accumulate(rep.losses.begin(), rep.losses.end(), 0.0) /
                            static_cast<double>(rep.losses.size());
        }
        c.audit.evaluations += rep.audit.evaluations;
        c.audit.negatives += rep.audit.negatives;
        c.audit.self_origin += rep.audit.self_origin;
    }
    server.global = fedavg(server.global, std::move(ups), server.global.names(), cfg.uniform_avg);
    report.global_digest = digest(server.global);
    server.transcript.add(t, "aggregate", std::nullopt, report.global_digest);
    ++server.round;
    return report;
}

RoundReport run_round_fedmae(ServerState& server, std::vector<MaeClient>& clients, const FedMaeConfig& cfg,
                             const RunOptions& opts) {
    const std::uint64_t t = server.round;
    std::vector<std::uint32_t> ids;
    for (auto& c : clients) ids.push_back(c.id);
    const auto active = select_active(ids, cfg.active_ratio, opts.seed, t);
    const double lr = round_lr(cfg.opt.lr, cfg.cosine, t, cfg.rounds);
    const auto sync_names = resolve_sync_set(server.global, cfg.sync);
    const auto local_names = complement(server.global, sync_names);
    const bool final_round = t + 1 == cfg.rounds;

    RoundReport report;
    report.round = t;
    report.clients.resize(active.size());

    for (std::size_t a = 0; a < active.size(); ++a) {
        MaeClient& c = clients[active[a]];
        std::uint64_t d = 0;
        ParamSet recv = Transport::send_params(select(server.global, sync_names), &d);
        server.transcript.add(t, "distribute", c.id, d);
        c.params.assign_from(recv, sync_names);
        c.opt.set_lr(lr);
        report.clients[a].client = c.id;
    }

    run_clients(server, active.size(), opts.workers, [&](std::size_t a) {
        MaeClient& c = clients[active[a]];
        if (opts.client_hook) opts.client_hook(c.id, t);
        Rng samp = derive_rng(opts.seed, "sampling", c.id, t);
        Rng aug = derive_rng(opts.seed, "augment", c.id, t);
        Rng masks = derive_rng(opts.seed, "masks", c.id, t);
        mae::EncoderTrace trace;
        if (opts.encoder_trace) {
            const std::uint32_t id = c.id;
            trace = [&opts, id](const nets::IndexLists& idx) { opts.encoder_trace(id, idx); };
        }
        report.clients[a].losses = mae::mae_local_epoch(c.params, c.opt, cfg.mae, *c.shard, c.train,
                                                        cfg.local_epochs, {&samp, &aug, &masks}, &trace);
    });

    std::vector<ClientParams> ups;
    for (std::size_t a = 0; a < active.size(); ++a) {
        MaeClient& c = clients[active[a]];
        std::uint64_t d = 0;
        ParamSet up = Transport::send_params(c.params, &d);
        server.transcript.add(t, "upload_params", c.id, d);
        if (!local_names.empty()) server.transcript.add(t, "upload_local", c.id, digest(select(up, local_names)));
        ups.push_back({c.id, server.sizes.at(c.id), std::move(up)});
        ClientReport& rep = report.clients[a];
        if (!rep.losses.empty()) {
            rep.mean_loss = std::accumulate(rep.losses.begin(), rep.losses.end(), 0.0) /
                            static_cast<double>(rep.losses.size());
        }
    }
    ParamSet next = fedavg(server.global, ups, sync_names, cfg.uniform_avg);
    if (final_round && !local_names.empty()) {
        next = fedavg(next, ups, local_names, cfg.uniform_avg);
        server.transcript.add(t, "final_aggregate", std::nullopt, digest(select(next, local_names)));
    }
    server.global = std::move(next);
    report.global_digest = digest(server.global);
    server.transcript.add(t, "aggregate", std::nullopt, report.global_digest);
    ++server.round;
    return report;
}

PretrainResult run_fedclf(const FedClfConfig& cfg, const data::Partition& part, const RunOptions& opts) {
    std::vector<ClfClient> clients;
    ServerState server = init_fedclf(cfg, part, clients, opts);
    PretrainResult res;
    for (std::size_t r = 0; r < cfg.rounds; ++r) res.rounds.push_back(run_round_fedclf(server, clients, cfg, opts));
    res.checkpoint = server.global.clone();
    res.transcript = server.transcript;
    return res;
}

PretrainResult run_fedmae(const FedMaeConfig& cfg, const data::Partition& part, const RunOptions& opts) {
    std::vector<MaeClient> clients;
    ServerState server = init_fedmae(cfg, part, clients, opts);
    PretrainResult res;
    for (std::size_t r = 0; r < cfg.rounds; ++r) res.rounds.push_back(run_round_fedmae(server, clients, cfg, opts));
    res.checkpoint = server.global.clone();
    res.transcript = server.transcript;
    return res;
}

}  // namespace fedssl::fed
