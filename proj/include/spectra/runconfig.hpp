#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "spectra/model.hpp"
#include "spectra/train.hpp"

namespace spectra {

/// Bad arguments or configuration; maps to exit code 2 at the CLI.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat key-value run configuration. Every field has a default except the
// data path; values loaded from a file are overridden by command-line flags.
struct RunConfig {
    std::string data;        // dataset manifest path
    std::string out = "out"; // artifact directory
    std::uint64_t seed = 7;
    int ablation_case = 5;

    // training
    int epochs = 100;
    int batch = 100;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int repeats = 1;  // run count for the repeated-run protocol
    double fraction = 0.005;

    // model
    int patch = 13;
    int ssfe3d_filters = 8;
    int ssfe3d_kd = 7;
    int ssfe3d_kh = 3;
    int ssfe3d_kw = 3;
    int embed_dim = 64;
    int heads = 4;
    int layers = 1;
    int mlp_hidden = 128;

    bool operator==(const RunConfig&) const = default;

    /// Applies one key; throws ConfigError on unknown keys or bad values.
    void set(const std::string& key, const std::string& value);

    /// Sorted "key = value" lines; parsing the dump reproduces the config.
    std::string dump() const;

    static RunConfig from_file(const std::string& path);
    static RunConfig parse(const std::string& text);

    ModelConfig model_config(int bands, int classes) const;
    TrainConfig train_config() const;
};

}  // namespace spectra
