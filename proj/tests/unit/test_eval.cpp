#include <gtest/gtest.h>

#include <cmath>

#include "fedssl/errors.hpp"
#include "fedssl/eval.hpp"
#include "fedssl/rng.hpp"

using namespace fedssl;
using namespace fedssl::eval;

namespace {

double safe(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

}  // namespace

TEST(Confusion, MatchesBruteForceTallies) {
    Rng rng = derive_rng(1, "label");
    for (int inst = 0; inst < 1000; ++inst) {
        const std::size_t k = 2 + uniform_index(rng, 6), n = 1 + uniform_index(rng, 60);
        std::vector<std::size_t> p(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = uniform_index(rng, k);
            y[i] = uniform_index(rng, k);
        }
        const auto m = confusion_metrics(p, y, k);
        double rec = 0, pre = 0, f1s = 0, spe = 0, hit = 0;
        for (std::size_t c = 0; c < k; ++c) {
            double tp = 0, fp = 0, fn = 0, tn = 0;
            for (std::size_t i = 0; i < n; ++i) {
                tp += p[i] == c && y[i] == c;
                fp += p[i] == c && y[i] != c;
                fn += p[i] != c && y[i] == c;
                tn += p[i] != c && y[i] != c;
            }
            const double r = safe(tp, tp + fn), q = safe(tp, tp + fp), s = safe(tn, tn + fp);
            const double f = safe(2 * q * r, q + r);
            ASSERT_EQ(m.recall[c], r);
            ASSERT_EQ(m.precision[c], q);
            ASSERT_EQ(m.specificity[c], s);
            ASSERT_EQ(m.f1[c], f);
            rec += r;
            pre += q;
            f1s += f;
            spe += s;
        }
        for (std::size_t i = 0; i < n; ++i) hit += p[i] == y[i];
        const double kk = static_cast<double>(k);
        ASSERT_NEAR(m.macro_recall, rec / kk, 1e-15);
        ASSERT_NEAR(m.macro_precision, pre / kk, 1e-15);
        ASSERT_NEAR(m.macro_f1, f1s / kk, 1e-15);
        ASSERT_NEAR(m.macro_specificity, spe / kk, 1e-15);
        ASSERT_EQ(m.accuracy, hit / static_cast<double>(n));
    }
}

TEST(Confusion, ZeroDenominatorsAreFlagged) {
    const auto m = confusion_metrics({0, 0}, {0, 0}, 3);
    EXPECT_EQ(m.recall[1], 0.0);
    EXPECT_EQ(m.precision[2], 0.0);
    bool saw_recall = false, saw_precision = false;
    for (const auto& f : m.flags) {
        saw_recall = saw_recall || f == "recall[1]:no samples";
        saw_precision = saw_precision || f == "precision[2]:no predictions";
    }
    EXPECT_TRUE(saw_recall);
    EXPECT_TRUE(saw_precision);
}

TEST(Confusion, Contracts) {
    EXPECT_THROW(confusion_metrics({}, {}, 2), ContractError);
    EXPECT_THROW(confusion_metrics({0}, {0, 1}, 2), ContractError);
    EXPECT_THROW(confusion_metrics({2}, {0}, 2), IndexError);
}

TEST(Auc, TrivialCases) {
    const std::vector<std::size_t> y = {0, 0, 1, 1};
    // perfect separation
    EXPECT_DOUBLE_EQ(macro_auc({0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.2, 0.8}, y, 2).macro, 1.0);
    // perfectly inverted
    EXPECT_DOUBLE_EQ(macro_auc({0.1, 0.9, 0.2, 0.8, 0.7, 0.3, 0.8, 0.2}, y, 2).macro, 0.0);
    // constant scores
    EXPECT_DOUBLE_EQ(macro_auc(std::vector<double>(8, 0.5), y, 2).macro, 0.5);
}

TEST(Auc, MonotoneTransformInvariance) {
    Rng rng = derive_rng(2, "label");
    for (int inst = 0; inst < 50; ++inst) {
        const std::size_t k = 3, n = 30;
        std::vector<double> s(n * k), t(n * k);
        std::vector<std::size_t> y(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = i % k;
        for (std::size_t i = 0; i < n * k; ++i) {
            s[i] = std::round(uniform01(rng) * 8.0) / 8.0;  // coarse grid forces ties
            t[i] = std::exp(3.0 * s[i]) - 7.0;
        }
        const auto a = macro_auc(s, y, k), b = macro_auc(t, y, k);
        EXPECT_DOUBLE_EQ(a.macro, b.macro);
        for (std::size_t c = 0; c < k; ++c) EXPECT_DOUBLE_EQ(a.per_class[c], b.per_class[c]);
    }
}

TEST(Auc, SingleClassLabelsAreExcluded) {
    const auto r = macro_auc({0.2, 0.8, 0.4, 0.6}, {1, 1}, 2);
    EXPECT_EQ(r.excluded, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(r.macro, 0.0);
}

TEST(Scores, ArgmaxTiesGoToLowestClass) {
    const auto m = evaluate_scores({0.5, 0.5, 0.0, 0.1, 0.7, 0.7}, {0, 1}, 3);
    EXPECT_EQ(m.recall[0], 1.0);
    EXPECT_EQ(m.recall[1], 1.0);
}

TEST(Finetune, ForeignCheckpointIsSchemaError) {
    data::SynthSpec s;
    s.height = s.width = 16;
    s.num_clients = 2;
    s.samples_per_client = 20;
    const auto part = data::generate(s, 3);
    Encoder enc;
    enc.cnn.in_channels = 3;
    ParamSet bogus;
    bogus.add("encoder.conv1.weight", Tensor::zeros({2, 2}, true));
    FinetuneConfig cfg;
    cfg.rounds = 1;
    EXPECT_THROW(finetune(bogus, enc, cfg, part, 3), SchemaError);
}

TEST(Finetune, SmallFederatedRunProducesValidMetrics) {
    data::SynthSpec s;
    s.height = s.width = 16;
    s.num_clients = 3;
    s.samples_per_client = 30;
    const auto part = data::generate(s, 4);
    Encoder enc;
    enc.cnn.conv1_channels = 4;
    enc.cnn.conv2_channels = 8;
    Rng rng = derive_rng(4, "init");
    const ParamSet ckpt = enc.init(rng);
    FinetuneConfig cfg;
    cfg.rounds = 2;
    cfg.label_fraction = 0.5;
    const auto a = finetune(ckpt, enc, cfg, part, 4);
    const auto b = finetune(ckpt, enc, cfg, part, 4, 3);
    EXPECT_EQ(a.metrics.macro_recall, b.metrics.macro_recall);
    EXPECT_EQ(a.metrics.macro_auc, b.metrics.macro_auc);
    EXPECT_GE(a.metrics.macro_recall, 0.0);
    EXPECT_LE(a.metrics.macro_recall, 1.0);
    cfg.mode = Mode::local;
    cfg.epochs = 2;
    const auto l = finetune(ckpt, enc, cfg, part, 4);
    EXPECT_EQ(l.models.size(), 3u);
}

TEST(Csv, HeaderAndRowHaveMatchingColumns) {
    MetricsRow r;
    r.run_id = "x";
    r.stage = "finetune";
    r.mode = "federated";
    r.label_fraction = 0.1;
    r.seed = 7;
    r.metrics.macro_recall = 0.5;
    const auto row = csv_row(r);
    auto cols = [](const std::string& s) { return std::count(s.begin(), s.end(), ',') + 1; };
    EXPECT_EQ(cols(row), cols(csv_header()));
    EXPECT_EQ(row.rfind("x,finetune,federated,0.1,7,0.500000", 0), 0u);
    EXPECT_NE(jsonl_row(r).find("\"macro_recall\""), std::string::npos);
}
