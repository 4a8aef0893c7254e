#include "fedssl/contrastive.hpp"

#include <algorithm>
#include <cmath>

#include "fedssl/errors.hpp"
#include "fedssl/ops.hpp"
#include "fedssl/serialize.hpp"

namespace fedssl::contrastive {

namespace {

constexpr double kUnitTol = 1e-6;

double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

std::vector<FeatureEntry> rows_to_entries(const Tensor& rows, std::uint32_t origin, BankTag tag) {
    if (rows.rank() != 2) throw ShapeError("feature rows must be (B,D), got " + shape_str(rows.shape()));
    const std::size_t b = rows.dim(0), d = rows.dim(1);
    auto src = rows.data();
    std::vector<FeatureEntry> out(b);
    for (std::size_t i = 0; i < b; ++i) {
        out[i].feature.assign(src.begin() + static_cast<std::ptrdiff_t>(i * d),
                              src.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
        out[i].origin = origin;
        out[i].tag = tag;
    }
    return out;
}

}  // namespace

FeatureBank::FeatureBank(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ContractError("feature bank capacity must be >= 1");
}

void FeatureBank::push(FeatureEntry e) {
    if (!entries_.empty() && e.feature.size() != width()) {
        throw ShapeError("feature width " + std::to_string(e.feature.size()) + " does not match bank width " +
                         std::to_string(width()));
    }
    double n = norm(e.feature);
    if (std::fabs(n - 1.0) > kUnitTol) {
        throw ContractError("feature bank entries must have unit norm, got " + std::to_string(n));
    }
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.push_back(std::move(e));
}

void FeatureBank::push_rows(const Tensor& rows, std::uint32_t origin, BankTag tag) {
    for (auto& e : rows_to_entries(rows, origin, tag)) push(std::move(e));
}

std::size_t FeatureBank::count_origin(std::uint32_t origin) const {
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [&](const FeatureEntry& e) { return e.origin == origin; }));
}

Tensor FeatureBank::as_tensor() const {
    if (entries_.empty()) return {};
    const std::size_t d = width();
    std::vector<double> buf;
    buf.reserve(entries_.size() * d);
    for (auto& e : entries_) buf.insert(buf.end(), e.feature.begin(), e.feature.end());
    return Tensor({entries_.size(), d}, std::move(buf));
}

std::vector<std::uint8_t> encode_snapshot(const FeatureBank& bank, bool anonymize) {
    io::ByteWriter w;
    w.u64(bank.size());
    w.u32(static_cast<std::uint32_t>(bank.width()));
    for (auto& e : bank.entries()) {
        w.u32(anonymize ? kAnonymousOrigin : e.origin);
        for (double v : e.feature) w.f64(v);
    }
    return w.take();
}

FeatureBank decode_snapshot(std::span<const std::uint8_t> bytes, std::size_t capacity, BankTag tag) {
    io::ByteReader r(bytes);
    std::uint64_t count = r.u64();
    std::uint32_t width = r.u32();
    if (count > 0 && (width == 0 || count > r.remaining() / (4 + 8 * static_cast<std::uint64_t>(width)))) {
        throw FormatError("truncated feature bank snapshot");
    }
    FeatureBank bank(std::max<std::size_t>({capacity, static_cast<std::size_t>(count), 1}));
    for (std::uint64_t i = 0; i < count; ++i) {
        FeatureEntry e;
        e.origin = r.u32();
        e.tag = tag;
        e.feature.resize(width);
        for (auto& v : e.feature) v = r.f64();
        bank.push(std::move(e));
    }
    if (!r.done()) throw FormatError("trailing bytes in feature bank snapshot");
    return bank;
}

DualModel make_dual(const ParamSet& main) {
    DualModel d{main, main.clone()};
    d.momentum.set_requires_grad(false);
    return d;
}

void momentum_update(DualModel& dual, double m) {
    if (!(m >= 0.0 && m < 1.0)) throw ContractError("momentum coefficient must be in [0,1), got " + std::to_string(m));
    require_same_schema(dual.momentum, dual.main);
    for (std::size_t i = 0; i < dual.main.size(); ++i) {
        auto src = dual.main.entries()[i].tensor.data();
        Tensor dst = dual.momentum.entries()[i].tensor;
        auto out = dst.mutable_data();
        if (out.size() != src.size()) throw ShapeError("momentum/main size mismatch");
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = m * out[j] + (1.0 - m) * src[j];
    }
}

Tensor encode_local_features(const DualModel& dual, const nets::CnnConfig& cfg, const Tensor& x,
                             std::uint32_t origin, FeatureBank& bank) {
    NoGradGuard guard;
    Tensor f = nets::cnn_forward(dual.momentum, cfg, x, true);
    bank.push_rows(f, origin, BankTag::local);
    return f;
}

FeatureBank build_remote_bank(const std::map<std::uint32_t, FeatureBank>& banks, std::uint32_t self_id, Rng& rng) {
    if (banks.count(self_id) != 0) {
        throw ContractError("remote bank for client " + std::to_string(self_id) + " must not include its own bank");
    }
    std::vector<FeatureEntry> pool;
    for (auto& [cid, bank] : banks) {
        for (auto& e : bank.entries()) {
            if (e.origin == self_id) {
                throw ContractError("bank of client " + std::to_string(cid) + " holds an entry from client " +
                                    std::to_string(self_id));
            }
            FeatureEntry copy = e;
            copy.tag = BankTag::remote;
            pool.push_back(std::move(copy));
        }
    }
    shuffle(pool, rng);
    FeatureBank out(std::max<std::size_t>(pool.size(), 1));
    for (auto& e : pool) out.push(std::move(e));
    return out;
}

std::vector<FeatureEntry> sample_remote(const FeatureBank& remote, std::size_t batch, Rng& rng) {
    if (remote.empty()) throw EmptyBankError("cannot sample from an empty remote bank");
    std::vector<FeatureEntry> out;
    out.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) out.push_back(remote.entries()[uniform_index(rng, remote.size())]);
    return out;
}

FeatureBank init_qcl(const FeatureBank& local, const FeatureBank& remote, BankMode mode, std::size_t capacity) {
    FeatureBank q(capacity);
    const FeatureBank& src = mode == BankMode::remote_only ? remote : local;
    for (auto& e : src.entries()) q.push(e);
    return q;
}

void update_qcl(FeatureBank& qcl, const std::vector<FeatureEntry>& local, const std::vector<FeatureEntry>& remote,
                BankMode mode) {
    if (mode != BankMode::remote_only) {
        for (auto& e : local) qcl.push(e);
    }
    if (mode != BankMode::none) {
        for (auto& e : remote) qcl.push(e);
    }
}

Tensor info_nce(const Tensor& q_in, const Tensor& k_in, const Tensor& negatives, double tau) {
    if (!(tau > 0.0)) throw ContractError("temperature must be > 0, got " + std::to_string(tau));
    Tensor q = q_in.rank() == 1 ? ops::reshape(q_in, {1, q_in.numel()}) : q_in;
    Tensor k = k_in.rank() == 1 ? ops::reshape(k_in, {1, k_in.numel()}) : k_in;
    if (q.rank() != 2 || q.shape() != k.shape()) {
        throw ShapeError("info_nce q " + shape_str(q.shape()) + " vs k+ " + shape_str(k.shape()));
    }
    Tensor logits = ops::sum(ops::mul(q, k), -1, true);
    if (negatives.defined() && negatives.numel() > 0) {
        if (negatives.rank() != 2 || negatives.dim(1) != q.dim(1)) {
            throw ShapeError("info_nce q " + shape_str(q.shape()) + " vs negatives " + shape_str(negatives.shape()));
        }
        logits = ops::concat({logits, ops::matmul(q, ops::transpose(negatives))}, 1);
    }
    Tensor ls = ops::log_softmax(ops::scale(logits, 1.0 / tau));
    return ops::neg(ops::mean(ops::slice_last(ls, 0, 1)));
}

double local_cl_step(Learner& L, const std::vector<std::span<const double>>& images, const data::ImageGeom& geom,
                     const ContrastiveConfig& cfg, StepRngs rngs, NegativeAudit* audit) {
    if (images.empty()) throw ContractError("empty contrastive batch");
    std::vector<double> xq, xk, clean;
    for (auto img : images) {
        auto [a, b] = data::augment_pair(img, geom, cfg.augment, *rngs.augment);
        xq.insert(xq.end(), a.begin(), a.end());
        xk.insert(xk.end(), b.begin(), b.end());
        if (cfg.bank_source == BankSource::clean) clean.insert(clean.end(), img.begin(), img.end());
    }
    const Shape shape{images.size(), geom.channels, geom.height, geom.width};

    Tensor q = nets::cnn_forward(L.model.main, L.net, Tensor(shape, std::move(xq)), true);
    Tensor k;
    {
        NoGradGuard guard;
        k = nets::cnn_forward(L.model.momentum, L.net, Tensor(shape, std::move(xk)), true);
    }
    if (audit) {
        ++audit->evaluations;
        audit->negatives += L.qcl.size();
        audit->self_origin += L.qcl.count_origin(L.id);
    }
    Tensor loss = info_nce(q, k, L.qcl.as_tensor(), cfg.tau);
    L.model.main.zero_grad();
    loss.backward();
    L.opt.step(L.model.main);
    momentum_update(L.model, cfg.momentum);

    Tensor local_feats;
    if (cfg.bank_source == BankSource::kplus) {
        local_feats = k;
        L.local.push_rows(k, L.id, BankTag::local);
    } else {
        local_feats = encode_local_features(L.model, L.net, Tensor(shape, std::move(clean)), L.id, L.local);
    }
    std::vector<FeatureEntry> sampled;
    if (cfg.mode == BankMode::remote_only || (cfg.mode == BankMode::with_local && !L.remote.empty())) {
        sampled = sample_remote(L.remote, images.size(), *rngs.sampling);
    }
    update_qcl(L.qcl, rows_to_entries(local_feats, L.id, BankTag::local), sampled, cfg.mode);
    return loss.item();
}

}  // namespace fedssl::contrastive
