#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "fedssl/data.hpp"
#include "fedssl/eval.hpp"
#include "fedssl/federation.hpp"

// Experiment configuration file.
//
// Grammar, one item per line:
//   # comment        (also ';')
//   [section]
//   key = value
// Leading and trailing blanks are ignored. Keys are only valid inside their
// section; an unknown section or key, a repeated key, or an out-of-range
// value is a ConfigError naming "section.key". Keys left out keep their
// defaults. Booleans are true/false; enums take the names printed by
// dump().
namespace fedssl::config {

struct ExperimentConfig {
    fed::Protocol protocol = fed::Protocol::fedclf;
    std::uint64_t seed = 1;
    data::SynthSpec data;
    fed::FedClfConfig fedclf;
    fed::FedMaeConfig fedmae;
    eval::FinetuneConfig finetune;

    // Copies the image geometry from `data` into the model configs and
    // checks cross-field constraints. ConfigError.
    void resolve();
    // Encoder description matching the protocol's pretraining model.
    eval::Encoder encoder() const;
};

ExperimentConfig parse(const std::string& text);
ExperimentConfig load(const std::filesystem::path& path);
// Every key with its current value, grouped by section, with a short
// comment per key. parse(dump(c)) reproduces c.
std::string dump(const ExperimentConfig& cfg);

}  // namespace fedssl::config
