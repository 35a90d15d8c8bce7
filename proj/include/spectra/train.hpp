#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spectra/data.hpp"
#include "spectra/metrics.hpp"
#include "spectra/model.hpp"

namespace spectra {

struct TrainConfig {
    int epochs = 100;
    int batch_size = 100;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 7;
    int repeats = 10;
    int ablation_case = 5;

    void validate() const;
};

struct AdamState {
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };
    std::map<std::string, Moments> moments;
    std::int64_t step = 0;
};

/// Standard bias-corrected Adam over the trainable parameters, visited in
/// name order. Every trainable parameter must hold a gradient.
void adam_step(ModelParams& params, AdamState& state, double lr, double beta1, double beta2,
               double eps);

struct EpochRecord {
    int epoch = 0;        // 1-based
    double loss = 0.0;    // sample-weighted epoch mean
    double train_acc = 0.0;
    double seconds = 0.0; // wall time, kept out of the deterministic log file
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
};

/// Line-delimited "epoch loss train_acc" records; byte-identical for
/// identical runs. Wall times go to timing_path, a separate artifact.
void write_train_log(const TrainLog& log, const std::string& log_path,
                     const std::string& timing_path);

// Full schedule: per epoch, seeded shuffle, forward in train mode, combined
// loss, backward, Adam. Deterministic given cfg.seed. A non-finite value
// aborts with the offending op named in the diagnostic.
TrainLog train(ModelParams& params, const ModelConfig& model_cfg, const TrainConfig& cfg,
               const HsiCube& cube, const GroundTruth& gt, const SampleSplit& split);

struct RepeatSummary {
    struct Stat {
        double mean = 0.0;
        double stddev = 0.0;  // population
    };
    Stat oa, aa, kappa;
    std::vector<MetricsReport> runs;
};

// k independent runs with seeds cfg.seed + 0 .. cfg.seed + k-1; each run
// redraws its split, reinitializes, trains, and evaluates. Runs may execute
// on parallel threads; aggregation order is fixed by run index.
RepeatSummary repeat_runs(const ModelConfig& model_cfg, const TrainConfig& cfg,
                          const HsiCube& cube, const GroundTruth& gt, double fraction, int k,
                          int threads = 1);

/// SPECTRA_THREADS, defaulting to 1 (determinism first).
int thread_budget();

}  // namespace spectra
