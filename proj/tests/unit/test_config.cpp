#include <gtest/gtest.h>

#include <fstream>

#include "fedssl/config.hpp"
#include "fedssl/errors.hpp"

using namespace fedssl;

namespace {

std::string error_of(const std::string& text) {
    try {
        config::parse(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, EmptyTextGivesDefaults) {
    const auto c = config::parse("");
    EXPECT_EQ(c.protocol, fed::Protocol::fedclf);
    EXPECT_EQ(c.data.num_clients, 10u);
    EXPECT_EQ(c.fedclf.cl.mode, contrastive::BankMode::remote_only);
}


TEST(Config, KeysAreApplied) {
    const auto c = config::parse(
        "[experiment]\nprotocol = fedmae\nseed = 9\n; comment\n[data]\nheight = 16\nwidth = 16\n"
        "[fedmae]\nsync_set = wo_decoder\nmask_ratio = 0.5\npatch = 4\n[finetune]\nlabel_fraction = 0.2\n");
    EXPECT_EQ(c.protocol, fed::Protocol::fedmae);
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(c.fedmae.sync, fed::SyncSet::wo_decoder);
    EXPECT_EQ(c.fedmae.mae.mask_ratio, 0.5);
    EXPECT_EQ(c.fedmae.mae.vit.height, 16u);
    EXPECT_EQ(c.finetune.label_fraction, 0.2);
    EXPECT_EQ(c.encoder().backbone, eval::Backbone::vit);
}

TEST(Config, ErrorsNameTheKey) {
    EXPECT_NE(error_of("[fedclf]\ntemperature = 0.1\n").find("fedclf.temperature"), std::string::npos);
    EXPECT_NE(error_of("[fedclf]\ntau = 0\n").find("fedclf.tau"), std::string::npos);
    EXPECT_NE(error_of("[fedclf]\nmomentum = 1.5\n").find("fedclf.momentum"), std::string::npos);
    EXPECT_NE(error_of("[fedclf]\nbank_mode = everything\n").find("fedclf.bank_mode"), std::string::npos);
    EXPECT_NE(error_of("[fedclf]\nrounds = 2\nrounds = 3\n").find("fedclf.rounds"), std::string::npos);
    EXPECT_NE(error_of("[finetune]\nlabel_fraction = 0\n").find("finetune.label_fraction"), std::string::npos);
    EXPECT_NE(error_of("[bogus]\n").find("bogus"), std::string::npos);
    EXPECT_NE(error_of("[data]\nclasses\n").find("line 2"), std::string::npos);
    EXPECT_FALSE(error_of("[data]\nheight = 30\n[fedmae]\npatch = 4\n[experiment]\nprotocol = fedmae\n").empty());
}

TEST(Config, DumpRoundTrips) {
    auto c = config::parse("[fedclf]\ntau = 0.2\nsync_momentum = keep\n[finetune]\nlr = 0.0003\n");
    const std::string text = config::dump(c);
    EXPECT_EQ(config::dump(config::parse(text)), text);
    EXPECT_NE(text.find("tau = 0.2"), std::string::npos);
}

TEST(Config, LoadMissingFileIsConfigError) {
    EXPECT_THROW(config::load("/nonexistent/dir/x.ini"), ConfigError);
}
