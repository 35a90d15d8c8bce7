#include <CLI11.hpp>
#include <cstdio>
#include <string>

#include "spectra/cli.hpp"
#include "spectra/runconfig.hpp"

namespace {

using spectra::RunConfig;

// shared --config/--seed/--out/... handling; flags override file values
struct CommonFlags {
    std::string config_path;
    CLI::App* app = nullptr;

    void attach(CLI::App& cmd) {
        app = &cmd;
        cmd.add_option("--config", config_path, "key-value run configuration file");
        cmd.add_option("--seed", "random seed");
        cmd.add_option("--out", "artifact directory");
        cmd.add_option("--case", "ablation case 1..5")->check(CLI::Range(1, 5));
        cmd.add_option("--data", "dataset manifest path");
        cmd.add_option("--epochs", "training epochs");
        cmd.add_option("--batch", "batch size");
        cmd.add_option("--lr", "learning rate");
        cmd.add_option("--repeats", "independent repeat runs");
        cmd.add_option("--fraction", "per-class training fraction");
        cmd.add_option("--patch", "input patch size (odd)");
    }

    RunConfig resolve() const {
        RunConfig cfg;
        if (!config_path.empty()) {
            cfg = RunConfig::from_file(config_path);
        }
        auto override_str = [&](const char* flag, const char* key) {
            const CLI::Option* opt = app->get_option(flag);
            if (opt->count() > 0) {
                cfg.set(key, opt->as<std::string>());
            }
        };
        override_str("--seed", "seed");
        override_str("--out", "out");
        override_str("--case", "case");
        override_str("--data", "data");
        override_str("--epochs", "epochs");
        override_str("--batch", "batch");
        override_str("--lr", "lr");
        override_str("--repeats", "repeats");
        override_str("--fraction", "fraction");
        override_str("--patch", "patch");
        return cfg;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hyperspectral dual-branch classifier toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic labeled scene");
    spectra::cli::SynthOptions synth_opts;
    synth->add_option("--height", synth_opts.height);
    synth->add_option("--width", synth_opts.width);
    synth->add_option("--bands", synth_opts.bands);
    synth->add_option("--classes", synth_opts.classes);
    synth->add_option("--sigma", synth_opts.sigma, "per-band noise level");
    synth->add_option("--seed", synth_opts.seed);
    synth->add_option("--out", synth_opts.out, "output directory");

    // train
    auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
    CommonFlags train_flags;
    train_flags.attach(*train);

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    CommonFlags eval_flags;
    eval_flags.attach(*eval);
    std::string eval_checkpoint;
    eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();

    // predict-map
    auto* pmap = app.add_subcommand("predict-map", "render the prediction map");
    CommonFlags pmap_flags;
    pmap_flags.attach(*pmap);
    std::string pmap_checkpoint;
    pmap->add_option("--checkpoint", pmap_checkpoint, "checkpoint file")->required();

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    CommonFlags gc_flags;
    gc_flags.attach(*gradcheck);
    spectra::cli::GradcheckOptions gc_opts;
    gradcheck->add_option("--bands", gc_opts.bands, "probe band count");
    gradcheck->add_option("--gc-patch", gc_opts.patch, "probe patch size");
    gradcheck->add_option("--classes", gc_opts.classes, "probe class count");
    gradcheck->add_option("--gc-batch", gc_opts.batch, "probe batch size");
    gradcheck->add_option("--step", gc_opts.h, "central-difference step");
    gradcheck->add_option("--samples", gc_opts.samples, "coordinates probed per group");
    gradcheck->add_option("--tolerance", gc_opts.tolerance, "max relative error allowed");

    // ablate
    auto* ablate = app.add_subcommand("ablate", "train ablation cases 1..5 on one split");
    CommonFlags ablate_flags;
    ablate_flags.attach(*ablate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return spectra::cli::kExitBadArgs;
    }

    try {
        if (synth->parsed()) {
            return spectra::cli::cmd_synth(synth_opts);
        }
        if (train->parsed()) {
            return spectra::cli::cmd_train(train_flags.resolve());
        }
        if (eval->parsed()) {
            return spectra::cli::cmd_eval(eval_flags.resolve(), eval_checkpoint);
        }
        if (pmap->parsed()) {
            return spectra::cli::cmd_predict_map(pmap_flags.resolve(), pmap_checkpoint);
        }
        if (gradcheck->parsed()) {
            return spectra::cli::cmd_gradcheck(gc_flags.resolve(), gc_opts);
        }
        if (ablate->parsed()) {
            return spectra::cli::cmd_ablate(ablate_flags.resolve());
        }
    } catch (const spectra::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return spectra::cli::kExitBadArgs;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return spectra::cli::kExitRuntime;
    }
    return spectra::cli::kExitBadArgs;
}
