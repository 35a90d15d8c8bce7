#include "spectra/train.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "spectra/rng.hpp"

namespace spectra {

void TrainConfig::validate() const {
    if (epochs < 1) {
        throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    }
    if (batch_size < 1) {
        throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
        throw std::invalid_argument("TrainConfig: lr must be finite and non-negative");
    }
    if (repeats < 1) {
        throw std::invalid_argument("TrainConfig: repeats must be >= 1");
    }
    if (adam_eps <= 0.0) {
        throw std::invalid_argument("TrainConfig: adam eps must be positive");
    }
}

void adam_step(ModelParams& params, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (auto& [name, tensor] : params.named) {
        if (!tensor.requires_grad()) {
            continue;
        }
        if (!tensor.has_grad()) {
            throw std::logic_error("adam_step: missing gradient for " + name);
        }
        auto& mo = state.moments[name];
        if (mo.m.empty()) {
            mo.m.assign(tensor.data().size(), 0.0);
            mo.v.assign(tensor.data().size(), 0.0);
        }
        const auto& g = tensor.grad();
        auto& p = tensor.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g[i];
            mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g[i] * g[i];
            const double m_hat = mo.m[i] / bc1;
            const double v_hat = mo.v[i] / bc2;
            p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
    }
}

void write_train_log(const TrainLog& log, const std::string& log_path,
                     const std::string& timing_path) {
    std::ofstream out(log_path);
    if (!out) {
        throw std::runtime_error("write_train_log: cannot open " + log_path);
    }
    char buf[96];
    for (const EpochRecord& e : log.epochs) {
        std::snprintf(buf, sizeof(buf), "%d %.17g %.17g\n", e.epoch, e.loss, e.train_acc);
        out << buf;
    }
    if (!out) {
        throw std::runtime_error("write_train_log: failed writing " + log_path);
    }
    std::ofstream timing(timing_path);
    for (const EpochRecord& e : log.epochs) {
        std::snprintf(buf, sizeof(buf), "%d %.3f\n", e.epoch, e.seconds);
        timing << buf;
    }
}

TrainLog train(ModelParams& params, const ModelConfig& model_cfg, const TrainConfig& cfg,
               const HsiCube& cube, const GroundTruth& gt, const SampleSplit& split) {
    cfg.validate();
    model_cfg.validate();
    if (cfg.ablation_case != model_cfg.ablation_case) {
        throw std::invalid_argument("train: TrainConfig and ModelConfig disagree on the ablation case");
    }

    TrainLog log;
    AdamState adam;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        BatchIter batches(split, cube, gt, model_cfg.patch_size, cfg.batch_size,
                          mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
        Tensor patches;
        std::vector<int> labels;
        double loss_sum = 0.0;
        std::int64_t seen = 0;
        std::int64_t correct = 0;
        int batch_index = 0;
        while (batches.next(patches, labels)) {
            ++batch_index;
            try {
                Tape tape;
                ModelOutput out = forward(tape, patches, params, model_cfg, Mode::train);
                Tensor loss = combined_loss(tape, out, labels);
                params.zero_grad();
                tape.backward(loss);
                adam_step(params, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

                const int n = patches.extent(0);
                loss_sum += loss.value() * n;
                seen += n;
                const std::vector<int> pred = predict(out);
                for (int i = 0; i < n; ++i) {
                    if (pred[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)]) {
                        ++correct;
                    }
                }
            } catch (const std::runtime_error& e) {
                throw std::runtime_error(std::string(e.what()) + " (epoch " +
                                         std::to_string(epoch) + ", batch " +
                                         std::to_string(batch_index) + ")");
            }
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = seen > 0 ? loss_sum / static_cast<double>(seen) : 0.0;
        rec.train_acc = seen > 0 ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        log.epochs.push_back(rec);
    }
    return log;
}

RepeatSummary repeat_runs(const ModelConfig& model_cfg, const TrainConfig& cfg,
                          const HsiCube& cube, const GroundTruth& gt, double fraction, int k,
                          int threads) {
    if (k < 1) {
        throw std::invalid_argument("repeat_runs: k must be >= 1");
    }
    RepeatSummary summary;
    summary.runs.resize(static_cast<std::size_t>(k));

    auto one_run = [&](int run) {
        TrainConfig run_cfg = cfg;
        run_cfg.seed = cfg.seed + static_cast<std::uint64_t>(run);
        const SampleSplit split = stratified_split(gt, fraction, run_cfg.seed);
        ModelParams params = init_params(model_cfg, run_cfg.seed);
        train(params, model_cfg, run_cfg, cube, gt, split);
        summary.runs[static_cast<std::size_t>(run)] =
            evaluate(params, model_cfg, cube, gt, split, cfg.batch_size).report;
    };

    if (threads <= 1 || k == 1) {
        for (int run = 0; run < k; ++run) {
            one_run(run);
        }
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        const int workers = std::min(threads, k);
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&]() {
                for (int run = next.fetch_add(1); run < k; run = next.fetch_add(1)) {
                    one_run(run);
                }
            });
        }
        for (auto& t : pool) {
            t.join();
        }
    }

    auto stat_of = [&](auto pick) {
        RepeatSummary::Stat s;
        for (const MetricsReport& r : summary.runs) {
            s.mean += pick(r);
        }
        s.mean /= k;
        for (const MetricsReport& r : summary.runs) {
            const double d = pick(r) - s.mean;
            s.stddev += d * d;
        }
        s.stddev = std::sqrt(s.stddev / k);
        return s;
    };
    summary.oa = stat_of([](const MetricsReport& r) { return r.oa; });
    summary.aa = stat_of([](const MetricsReport& r) { return r.aa; });
    summary.kappa = stat_of([](const MetricsReport& r) { return r.kappa; });
    return summary;
}

int thread_budget() {
    const char* env = std::getenv("SPECTRA_THREADS");
    if (!env || !*env) {
        return 1;
    }
    const int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

}  // namespace spectra
