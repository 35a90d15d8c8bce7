#pragma once

#include <cstdint>
#include <cstdio>
#include <string>

#include "spectra/runconfig.hpp"

namespace spectra::cli {

// exit-code contract: 1 = runtime failure, 2 = bad arguments or config,
// 3 = verification failure (gradcheck)
constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitBadArgs = 2;
constexpr int kExitVerification = 3;

struct SynthOptions {
    int height = 32;
    int width = 32;
    int bands = 20;
    int classes = 4;
    double sigma = 0.02;
    std::uint64_t seed = 7;
    std::string out = "out";
};

struct GradcheckOptions {
    int bands = 10;
    int patch = 7;
    int classes = 3;
    int batch = 2;
    double h = 1e-3;
    int samples = 6;
    double tolerance = 1e-5;
};

/// Writes manifest/data/gt under opts.out and prints class pixel counts.
int cmd_synth(const SynthOptions& opts);

/// Trains (repeat-running when cfg.repeats > 1) and writes checkpoint.bin,
/// train_log.txt, train_timing.txt and config.txt under cfg.out.
int cmd_train(const RunConfig& cfg);

/// Evaluates a checkpoint on cfg.data's test split; prints the metrics table
/// and writes metrics.txt plus map.ppm.
int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path);

/// Renders the prediction map at every labeled pixel.
int cmd_predict_map(const RunConfig& cfg, const std::string& checkpoint_path);

/// Finite-difference verification of the full training loss; exit 3 when any
/// parameter group exceeds the tolerance.
int cmd_gradcheck(const RunConfig& cfg, const GradcheckOptions& opts);

/// Trains ablation cases 1..5 on one shared split and tabulates test OA.
int cmd_ablate(const RunConfig& cfg);

/// Wraps a command body with the exit-code contract.
template <typename Fn>
int guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitBadArgs;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
}

}  // namespace spectra::cli
