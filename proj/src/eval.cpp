#include "fedssl/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <json.hpp>
#include <numeric>

#include "fedssl/errors.hpp"
#include "fedssl/federation.hpp"
#include "fedssl/ops.hpp"

namespace fedssl::eval {

namespace {

double ratio(std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::size_t argmax_row(const std::vector<double>& scores, std::size_t row, std::size_t k) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
        if (scores[row * k + c] > scores[row * k + best]) best = c;
    }
    return best;
}

}  // namespace

MetricsRecord confusion_metrics(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                                std::size_t k) {
    if (preds.empty() || preds.size() != labels.size()) {
        throw ContractError("confusion_metrics needs equal, nonempty prediction and label lists");
    }
    if (k == 0) throw ContractError("num_classes must be positive");
    std::vector<std::size_t> cm(k * k, 0);  // [label][pred]
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] >= k || labels[i] >= k) throw IndexError("class id out of range at sample " + std::to_string(i));
        ++cm[labels[i] * k + preds[i]];
    }
    const std::size_t n = preds.size();
    MetricsRecord m;
    m.num_classes = k;
    m.samples = n;
    m.recall.resize(k);
    m.precision.resize(k);
    m.specificity.resize(k);
    m.f1.resize(k);
    m.auc.assign(k, 0.0);
    std::size_t correct = 0;
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t tp = cm[c * k + c], fn = 0, fp = 0;
        for (std::size_t j = 0; j < k; ++j) {
            if (j == c) continue;
            fn += cm[c * k + j];
            fp += cm[j * k + c];
        }
        const std::size_t tn = n - tp - fn - fp;
        correct += tp;
        const std::string idx = "[" + std::to_string(c) + "]";
        if (tp + fn == 0) m.flags.push_back("recall" + idx + ":no samples");
        if (tp + fp == 0) m.flags.push_back("precision" + idx + ":no predictions");
        if (tn + fp == 0) m.flags.push_back("specificity" + idx + ":no negatives");
        m.recall[c] = ratio(tp, tp + fn);
        m.precision[c] = ratio(tp, tp + fp);
        m.specificity[c] = ratio(tn, tn + fp);
        const double pr = m.precision[c] + m.recall[c];
        if (pr == 0.0) m.flags.push_back("f1" + idx + ":zero precision and recall");
        m.f1[c] = pr == 0.0 ? 0.0 : 2.0 * m.precision[c] * m.recall[c] / pr;
    }
    m.macro_recall = mean_of(m.recall);
    m.macro_precision = mean_of(m.precision);
    m.macro_specificity = mean_of(m.specificity);
    m.macro_f1 = mean_of(m.f1);
    m.accuracy = ratio(correct, n);
    return m;
}

AucResult macro_auc(const std::vector<double>& scores, const std::vector<std::size_t>& labels, std::size_t k) {
    const std::size_t n = labels.size();
    if (n == 0 || k == 0 || scores.size() != n * k) {
        throw ShapeError("macro_auc scores must be (n, num_classes) with n = " + std::to_string(n));
    }
    AucResult r;
    r.per_class.assign(k, 0.0);
    std::vector<double> used;
    std::vector<std::size_t> order(n);
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t pos = 0;
        for (auto l : labels) pos += l == c;
        const std::size_t neg = n - pos;
        if (pos == 0 || neg == 0) {
            r.excluded.push_back(c);
            continue;
        }
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return scores[a * k + c] < scores[b * k + c]; });
        // midranks over tie groups
        double rank_sum = 0.0;
        for (std::size_t i = 0; i < n;) {
            std::size_t j = i;
            while (j < n && scores[order[j] * k + c] == scores[order[i] * k + c]) ++j;
            const double mid = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2.0 + 1.0;
            for (std::size_t t = i; t < j; ++t) {
                if (labels[order[t]] == c) rank_sum += mid;
            }
            i = j;
        }
        const double p = static_cast<double>(pos), q = static_cast<double>(neg);
        r.per_class[c] = (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
        used.push_back(r.per_class[c]);
    }
    r.macro = mean_of(used);
    return r;
}

MetricsRecord evaluate_scores(const std::vector<double>& scores, const std::vector<std::size_t>& labels,
                              std::size_t k) {
    std::vector<std::size_t> preds(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) preds[i] = argmax_row(scores, i, k);
    MetricsRecord m = confusion_metrics(preds, labels, k);
    AucResult a = macro_auc(scores, labels, k);
    m.auc = a.per_class;
    m.macro_auc = a.macro;
    for (auto c : a.excluded) m.flags.push_back("auc[" + std::to_string(c) + "]:single-class labels");
    return m;
}

ParamSet Encoder::init(Rng& rng) const {
    if (backbone == Backbone::cnn) return nets::init_cnn(cnn, rng, false);
    return nets::init_mae(vit, rng).subset_with_prefix("encoder.").clone();
}

Tensor Encoder::features(const ParamSet& params, const Tensor& x) const {
    if (backbone == Backbone::cnn) return nets::cnn_features(params, cnn, x);
    return nets::class_token_state(nets::vit_encode_full(params, vit, nets::patchify(x, vit.patch)));
}

namespace {

Tensor logits(const Encoder& enc, const ParamSet& p, const Tensor& x) {
    return nets::classify(p, enc.features(p, x));
}

// Softmax scores for the listed samples of a shard, appended to out.
void score(const Encoder& enc, const ParamSet& p, const data::ClientShard& shard,
           const std::vector<std::size_t>& idx, const data::SynthSpec& spec, std::vector<double>& scores,
           std::vector<std::size_t>& labels) {
    if (idx.empty()) return;
    NoGradGuard guard;
    Tensor s = ops::softmax(logits(enc, p, data::stack(shard, idx, spec)));
    scores.insert(scores.end(), s.data().begin(), s.data().end());
    for (auto i : idx) labels.push_back(shard.samples[i].label);
}

void train_epochs(const Encoder& enc, ParamSet& p, Optimizer& opt, const data::ClientShard& shard,
                  const std::vector<std::size_t>& labeled, const data::SynthSpec& spec, const FinetuneConfig& cfg,
                  std::size_t epochs, Rng& sampling, Rng& augment) {
    if (labeled.empty()) return;
    const data::ImageGeom geom{spec.channels, spec.height, spec.width};
    const data::AugmentConfig flip{1.0, 1.0, 0.5, 0.0, 0.0, 0.0};
    std::vector<std::size_t> order = labeled;
    for (std::size_t e = 0; e < epochs; ++e) {
        shuffle(order, sampling);
        for (std::size_t s = 0; s < order.size(); s += cfg.batch) {
            const std::size_t end = std::min(order.size(), s + cfg.batch);
            std::vector<std::vector<double>> imgs;
            std::vector<std::size_t> y;
            for (std::size_t i = s; i < end; ++i) {
                const auto& px = shard.samples[order[i]].pixels;
                if (cfg.augment && bernoulli(augment, flip.flip_p)) {
                    imgs.push_back(data::hflip(px, geom));
                } else {
                    imgs.push_back(px);
                }
                y.push_back(shard.samples[order[i]].label);
            }
            Tensor loss = ops::cross_entropy(logits(enc, p, data::stack_pixels(imgs, spec)), y);
            p.zero_grad();
            loss.backward();
            opt.step(p);
        }
    }
}

MetricsRecord average_records(const std::vector<MetricsRecord>& recs) {
    MetricsRecord m;
    if (recs.empty()) return m;
    const double n = static_cast<double>(recs.size());
    m.num_classes = recs.front().num_classes;
    auto avg_vec = [&](auto field) {
        std::vector<double> out(m.num_classes, 0.0);
        for (auto& r : recs) {
            for (std::size_t c = 0; c < m.num_classes; ++c) out[c] += (r.*field)[c] / n;
        }
        return out;
    };
    m.recall = avg_vec(&MetricsRecord::recall);
    m.precision = avg_vec(&MetricsRecord::precision);
    m.specificity = avg_vec(&MetricsRecord::specificity);
    m.f1 = avg_vec(&MetricsRecord::f1);
    m.auc = avg_vec(&MetricsRecord::auc);
    for (auto& r : recs) {
        m.samples += r.samples;
        m.macro_recall += r.macro_recall / n;
        m.macro_precision += r.macro_precision / n;
        m.macro_f1 += r.macro_f1 / n;
        m.macro_specificity += r.macro_specificity / n;
        m.macro_auc += r.macro_auc / n;
        m.accuracy += r.accuracy / n;
        m.flags.insert(m.flags.end(), r.flags.begin(), r.flags.end());
    }
    return m;
}

constexpr std::uint64_t kFinetuneStream = 1ull << 32;

}  // namespace

FinetuneResult finetune(const ParamSet& checkpoint, const Encoder& enc, const FinetuneConfig& cfg,
                        const data::Partition& part, std::uint64_t seed, std::size_t workers) {
    const std::size_t k = part.spec.num_classes;
    Rng init = derive_rng(seed, "init", kFinetuneStream);
    ParamSet reference = enc.init(init);
    ParamSet base = checkpoint.subset_with_prefix("encoder.").clone();
    require_same_schema(reference, base);
    Rng head_rng = derive_rng(seed, "init", kFinetuneStream + 1);
    ParamSet head = nets::init_classifier(enc.feature_dim(), k, head_rng, cfg.zero_head_init);
    for (auto& e : head.entries()) base.add(e.name, e.tensor, e.tag);
    if (cfg.freeze_encoder) {
        for (auto& e : base.entries()) {
            if (e.name.rfind("encoder.", 0) == 0) base.at(e.name).set_requires_grad(false);
        }
    }
    const data::LabelMask mask = data::label_mask(part, cfg.label_fraction, seed);
    const std::size_t nc = part.clients.size();
    FinetuneResult res;

    if (cfg.mode == Mode::local) {
        std::vector<MetricsRecord> recs(nc);
        std::vector<double> train_acc(nc);
        res.models.resize(nc);
        fed::parallel_for(nc, workers, [&](std::size_t i) {
            const auto& shard = part.clients[i];
            ParamSet p = base.clone();
            Optimizer opt(cfg.opt);
            Rng samp = derive_rng(seed, "sampling", shard.id, kFinetuneStream);
            Rng aug = derive_rng(seed, "augment", shard.id, kFinetuneStream);
            train_epochs(enc, p, opt, shard, mask.labeled[i], part.spec, cfg, cfg.epochs, samp, aug);
            std::vector<double> s;
            std::vector<std::size_t> y;
            score(enc, p, shard, shard.indices(data::Split::test), part.spec, s, y);
            recs[i] = evaluate_scores(s, y, k);
            s.clear();
            y.clear();
            score(enc, p, shard, mask.labeled[i], part.spec, s, y);
            if (!y.empty()) train_acc[i] = evaluate_scores(s, y, k).accuracy;
            res.models[i] = std::move(p);
        });
        res.metrics = average_records(recs);
        res.train_accuracy = mean_of(train_acc);
        return res;
    }

    ParamSet global = base.clone();
    std::vector<ParamSet> local(nc);
    std::vector<Optimizer> opts(nc, Optimizer(cfg.opt));
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < nc; ++i) {
        if (!mask.labeled[i].empty()) active.push_back(i);
    }
    if (active.empty()) throw ContractError("no client holds labeled samples");
    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        fed::parallel_for(active.size(), workers, [&](std::size_t a) {
            const std::size_t i = active[a];
            const auto& shard = part.clients[i];
            local[i] = fed::Transport::send_params(global);
            for (auto& e : global.entries()) local[i].at(e.name).set_requires_grad(e.tensor.requires_grad());
            Rng samp = derive_rng(seed, "sampling", shard.id, kFinetuneStream + t);
            Rng aug = derive_rng(seed, "augment", shard.id, kFinetuneStream + t);
            train_epochs(enc, local[i], opts[i], shard, mask.labeled[i], part.spec, cfg, cfg.local_epochs, samp,
                         aug);
        });
        std::vector<fed::ClientParams> ups;
        for (auto i : active) {
            ups.push_back({part.clients[i].id, static_cast<double>(mask.labeled[i].size()), local[i]});
        }
        global = fed::fedavg(global, std::move(ups), global.names(), cfg.uniform_avg);
    }
    std::vector<double> s, ts;
    std::vector<std::size_t> y, ty;
    for (std::size_t i = 0; i < nc; ++i) {
        const auto& shard = part.clients[i];
        score(enc, global, shard, shard.indices(data::Split::test), part.spec, s, y);
        score(enc, global, shard, mask.labeled[i], part.spec, ts, ty);
    }
    res.metrics = evaluate_scores(s, y, k);
    res.train_accuracy = evaluate_scores(ts, ty, k).accuracy;
    res.models.push_back(std::move(global));
    return res;
}

std::string csv_header() {
    return "run_id,stage,mode,label_fraction,seed,macro_recall,macro_precision,macro_f1,macro_specificity,"
           "macro_auc,accuracy";
}

std::string csv_row(const MetricsRow& r) {
    char buf[512];
    const auto& m = r.metrics;
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%.4g,%llu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", r.run_id.c_str(),
                  r.stage.c_str(), r.mode.c_str(), r.label_fraction, static_cast<unsigned long long>(r.seed),
                  m.macro_recall, m.macro_precision, m.macro_f1, m.macro_specificity, m.macro_auc, m.accuracy);
    return buf;
}

std::string jsonl_row(const MetricsRow& r) {
    nlohmann::ordered_json j;
    const auto& m = r.metrics;
    j["run_id"] = r.run_id;
    j["stage"] = r.stage;
    j["mode"] = r.mode;
    j["label_fraction"] = r.label_fraction;
    j["seed"] = r.seed;
    j["macro_recall"] = m.macro_recall;
    j["macro_precision"] = m.macro_precision;
    j["macro_f1"] = m.macro_f1;
    j["macro_specificity"] = m.macro_specificity;
    j["macro_auc"] = m.macro_auc;
    j["accuracy"] = m.accuracy;
    j["recall"] = m.recall;
    j["precision"] = m.precision;
    j["specificity"] = m.specificity;
    j["f1"] = m.f1;
    j["auc"] = m.auc;
    j["flags"] = m.flags;
    return j.dump();
}

}  // namespace fedssl::eval
