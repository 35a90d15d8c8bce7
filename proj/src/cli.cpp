#include "spectra/cli.hpp"

#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>
#include <vector>

#include "spectra/checkpoint.hpp"
#include "spectra/data.hpp"
#include "spectra/gradcheck.hpp"
#include "spectra/metrics.hpp"
#include "spectra/rng.hpp"
#include "spectra/train.hpp"

namespace spectra::cli {

namespace fs = std::filesystem;

namespace {

struct LoadedScene {
    HsiCube cube;  // normalized
    GroundTruth gt;
};

LoadedScene load_normalized(const RunConfig& cfg) {
    if (cfg.data.empty()) {
        throw ConfigError("a dataset manifest is required (set --data or the 'data' key)");
    }
    auto [cube, gt] = load_cube(cfg.data);
    return {normalize(cube), std::move(gt)};
}

void ensure_out(const std::string& out) {
    if (out.empty()) {
        throw ConfigError("output directory must not be empty");
    }
    fs::create_directories(out);
}

}  // namespace

int cmd_synth(const SynthOptions& opts) {
    return guarded([&]() {
        if (opts.height < 1 || opts.width < 1 || opts.bands < 1 || opts.classes < 1) {
            throw ConfigError("synth: dimensions must be positive");
        }
        if (static_cast<std::int64_t>(opts.classes) >
            static_cast<std::int64_t>(opts.height) * opts.width) {
            throw ConfigError("synth: more classes than pixels");
        }
        if (opts.sigma < 0.0) {
            throw ConfigError("synth: noise sigma must be non-negative");
        }
        ensure_out(opts.out);
        auto [cube, gt] = synth_scene(opts.height, opts.width, opts.bands, opts.classes,
                                      opts.sigma, opts.seed);
        const std::string manifest = (fs::path(opts.out) / "manifest.txt").string();
        write_scene(manifest, cube, gt);
        std::vector<std::int64_t> counts(static_cast<std::size_t>(opts.classes), 0);
        for (auto label : gt.labels) {
            ++counts[static_cast<std::size_t>(label - 1)];
        }
        std::printf("wrote %s (%dx%d, %d bands, %d classes)\n", manifest.c_str(), opts.height,
                    opts.width, opts.bands, opts.classes);
        for (int c = 0; c < opts.classes; ++c) {
            std::printf("  %-10s %8" PRId64 " px\n", gt.class_names[static_cast<std::size_t>(c)].c_str(),
                        counts[static_cast<std::size_t>(c)]);
        }
        return kExitOk;
    });
}

int cmd_train(const RunConfig& cfg) {
    return guarded([&]() {
        LoadedScene scene = load_normalized(cfg);
        const ModelConfig mc = cfg.model_config(scene.cube.bands, scene.gt.num_classes);
        mc.validate();
        TrainConfig tc = cfg.train_config();
        tc.validate();
        ensure_out(cfg.out);
        {
            std::ofstream out(fs::path(cfg.out) / "config.txt");
            out << cfg.dump();
        }

        const SampleSplit split = stratified_split(scene.gt, cfg.fraction, tc.seed);
        std::printf("training case %d on %s: %" PRId64 " train / %" PRId64 " test pixels\n",
                    cfg.ablation_case, cfg.data.c_str(), split.train_total(), split.test_total());

        ModelParams params = init_params(mc, tc.seed);
        const TrainLog log = train(params, mc, tc, scene.cube, scene.gt, split);
        save_checkpoint((fs::path(cfg.out) / "checkpoint.bin").string(), mc, params);
        write_train_log(log, (fs::path(cfg.out) / "train_log.txt").string(),
                        (fs::path(cfg.out) / "train_timing.txt").string());
        if (!log.epochs.empty()) {
            std::printf("final epoch: loss %.6f, train acc %.4f\n", log.epochs.back().loss,
                        log.epochs.back().train_acc);
        }

        if (cfg.repeats > 1) {
            const RepeatSummary summary = repeat_runs(mc, tc, scene.cube, scene.gt, cfg.fraction,
                                                      cfg.repeats, thread_budget());
            std::ofstream out(fs::path(cfg.out) / "repeats.txt");
            char buf[160];
            std::snprintf(buf, sizeof(buf), "runs = %d\noa = %.17g +- %.17g\naa = %.17g +- %.17g\n"
                                            "kappa = %.17g +- %.17g\n",
                          cfg.repeats, summary.oa.mean, summary.oa.stddev, summary.aa.mean,
                          summary.aa.stddev, summary.kappa.mean, summary.kappa.stddev);
            out << buf;
            std::printf("%d repeats: OA %.2f%% +- %.2f, AA %.2f%% +- %.2f, kappa %.4f +- %.4f\n",
                        cfg.repeats, 100 * summary.oa.mean, 100 * summary.oa.stddev,
                        100 * summary.aa.mean, 100 * summary.aa.stddev, summary.kappa.mean,
                        summary.kappa.stddev);
        }
        return kExitOk;
    });
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path) {
    return guarded([&]() {
        auto [mc, params] = load_checkpoint(checkpoint_path);
        LoadedScene scene = load_normalized(cfg);
        if (mc.bands != scene.cube.bands || mc.classes != scene.gt.num_classes) {
            throw ConfigError("eval: checkpoint was trained for " + std::to_string(mc.bands) +
                              " bands / " + std::to_string(mc.classes) + " classes, data has " +
                              std::to_string(scene.cube.bands) + " / " +
                              std::to_string(scene.gt.num_classes));
        }
        ensure_out(cfg.out);
        const SampleSplit split = stratified_split(scene.gt, cfg.fraction, cfg.seed);
        const Evaluation ev = evaluate(params, mc, scene.cube, scene.gt, split, cfg.batch);
        std::fputs(metrics_table(ev.report, scene.gt.class_names).c_str(), stdout);
        write_metrics_kv(ev.report, (fs::path(cfg.out) / "metrics.txt").string());
        render_map(ev.raster, scene.gt.height, scene.gt.width, scene.gt.palette,
                   (fs::path(cfg.out) / "map.ppm").string());
        return kExitOk;
    });
}

int cmd_predict_map(const RunConfig& cfg, const std::string& checkpoint_path) {
    return guarded([&]() {
        auto [mc, params] = load_checkpoint(checkpoint_path);
        LoadedScene scene = load_normalized(cfg);
        if (mc.bands != scene.cube.bands || mc.classes != scene.gt.num_classes) {
            throw ConfigError("predict-map: checkpoint does not match the dataset");
        }
        ensure_out(cfg.out);
        const auto raster = predict_raster(params, mc, scene.cube, scene.gt, cfg.batch);
        const std::string path = (fs::path(cfg.out) / "map.ppm").string();
        render_map(raster, scene.gt.height, scene.gt.width, scene.gt.palette, path);
        std::printf("wrote %s\n", path.c_str());
        return kExitOk;
    });
}

int cmd_gradcheck(const RunConfig& cfg, const GradcheckOptions& opts) {
    return guarded([&]() {
        if (opts.batch < 1 || opts.bands < 1 || opts.classes < 2) {
            throw ConfigError("gradcheck: bad probe dimensions");
        }
        ModelConfig mc = cfg.model_config(opts.bands, opts.classes);
        mc.patch_size = opts.patch;
        mc.validate();

        ModelParams params = init_params(mc, cfg.seed);
        Rng rng(mix_seed(cfg.seed, 0xfdc8ecu));
        Tensor patches({opts.batch, mc.bands, mc.patch_size, mc.patch_size});
        for (double& v : patches.data()) {
            v = rng.uniform(0.0, 1.0);
        }
        std::vector<int> labels;
        for (int i = 0; i < opts.batch; ++i) {
            labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(mc.classes))));
        }

        auto program = [&](Tape& tape) {
            const auto snap = snapshot_running_stats(params);
            ModelOutput out = forward(tape, patches, params, mc, Mode::train);
            Tensor loss = combined_loss(tape, out, labels);
            restore_running_stats(params, snap);
            return loss;
        };
        const GradCheckResult result =
            finite_difference_check(program, params.trainable(), opts.h, opts.samples, cfg.seed);
        for (const auto& [name, err] : result.per_param) {
            std::printf("  %-24s %.3e\n", name.c_str(), err);
        }
        const bool pass = result.max_rel_err <= opts.tolerance;
        std::printf("max rel err %.3e (%s) %s %.0e: %s\n", result.max_rel_err,
                    result.worst_param.c_str(), pass ? "<=" : ">", opts.tolerance,
                    pass ? "PASS" : "FAIL");
        return pass ? kExitOk : kExitVerification;
    });
}

int cmd_ablate(const RunConfig& cfg) {
    return guarded([&]() {
        LoadedScene scene = load_normalized(cfg);
        ensure_out(cfg.out);
        // one split shared by every case
        const SampleSplit split = stratified_split(scene.gt, cfg.fraction, cfg.seed);
        std::printf("ablation on %s: %" PRId64 " train / %" PRId64 " test pixels, %d epochs\n",
                    cfg.data.c_str(), split.train_total(), split.test_total(), cfg.epochs);

        std::vector<double> oa(5, 0.0);
        auto run_case = [&](int case_id) {
            RunConfig case_cfg = cfg;
            case_cfg.ablation_case = case_id;
            const ModelConfig mc = case_cfg.model_config(scene.cube.bands, scene.gt.num_classes);
            TrainConfig tc = case_cfg.train_config();
            ModelParams params = init_params(mc, tc.seed);
            train(params, mc, tc, scene.cube, scene.gt, split);
            oa[static_cast<std::size_t>(case_id - 1)] =
                evaluate(params, mc, scene.cube, scene.gt, split, cfg.batch).report.oa;
        };

        const int threads = std::min(thread_budget(), 5);
        if (threads <= 1) {
            for (int c = 1; c <= 5; ++c) {
                run_case(c);
            }
        } else {
            std::atomic<int> next{1};
            std::vector<std::thread> pool;
            for (int w = 0; w < threads; ++w) {
                pool.emplace_back([&]() {
                    for (int c = next.fetch_add(1); c <= 5; c = next.fetch_add(1)) {
                        run_case(c);
                    }
                });
            }
            for (auto& t : pool) {
                t.join();
            }
        }

        std::ofstream out(fs::path(cfg.out) / "ablate.txt");
        std::printf("case   OA(%%)\n");
        for (int c = 1; c <= 5; ++c) {
            std::printf("%4d  %6.2f\n", c, 100.0 * oa[static_cast<std::size_t>(c - 1)]);
            char buf[64];
            std::snprintf(buf, sizeof(buf), "case_%d_oa = %.17g\n", c,
                          oa[static_cast<std::size_t>(c - 1)]);
            out << buf;
        }
        return kExitOk;
    });
}

}  // namespace spectra::cli
