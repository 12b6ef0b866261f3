// Command-line front end over the experiment pipeline. Exit codes: 0 on
// success (including every in-run check), 1 on runtime or stage failure,
// 2 on bad configuration or input, 3 when a sweep trend check fails.
#include <algorithm>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gridvl/errors.hpp"
#include "gridvl/experiments.hpp"

namespace {

gridvl::TempSetting parse_tau_spec(const std::string& spec) {
    size_t colon = spec.find(':');
    if (colon == std::string::npos)
        throw gridvl::ConfigError("bad --taus entry '" + spec +
                                  "'; use tau_r:tau_n, e.g. 0.07:0.07");
    try {
        gridvl::TempSetting setting;
        setting.tau_r = std::stod(spec.substr(0, colon));
        setting.tau_n = std::stod(spec.substr(colon + 1));
        return setting;
    } catch (const std::exception&) {
        throw gridvl::ConfigError("bad --taus entry '" + spec + "'");
    }
}

void print_executed(const std::vector<std::string>& executed) {
    if (executed.empty()) {
        std::printf("all stages up to date\n");
        return;
    }
    std::printf("executed:");
    for (const auto& name : executed) std::printf(" %s", name.c_str());
    std::printf("\n");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"grid-world video-language pipeline"};
    app.fallthrough();
    app.require_subcommand(1);

    std::string config_path;
    uint64_t seed = 0;
    std::string out_dir;
    auto* config_opt = app.add_option(
        "--config", config_path, "experiment config file (defaults apply)");
    config_opt->check(CLI::ExistingFile);
    auto* seed_opt =
        app.add_option("--seed", seed, "override the global seed");
    auto* out_opt =
        app.add_option("--out", out_dir,
                       "override out_dir (relative paths go under "
                       "$GRIDVL_OUT)");

    bool dry_run = false;
    bool force = false;
    CLI::App* sc_run =
        app.add_subcommand("run", "run every pipeline stage in order");
    sc_run->add_flag("--dry-run", dry_run,
                     "validate the config and print the stage plan without "
                     "touching the output directory");
    sc_run->add_flag("--force", force,
                     "re-run stages even when their markers match");

    const std::vector<std::pair<const char*, const char*>> stages = {
        {"gen-world", "generate the synthetic corpus"},
        {"clean", "filter narrations and split train/held"},
        {"chunk-subset", "build the labeled/unlabeled clip lists"},
        {"train-baseline", "contrastive pretraining on ground truth only"},
        {"train-narrator", "train the visually conditioned narrator"},
        {"cache-narrations", "generate and filter pseudo-narrations"},
        {"rephrase", "cache rule-based paraphrases"},
        {"train-lavila", "contrastive pretraining with augmentations"},
        {"eval", "retrieval and classification reports per arm"}};
    for (const auto& [name, help] : stages) app.add_subcommand(name, help);

    std::string finetune_arm = "all";
    CLI::App* sc_finetune = app.add_subcommand(
        "finetune", "max-margin fine-tuning of a trained arm");
    sc_finetune->add_option("--arm", finetune_arm,
                            "arm checkpoint to start from");

    std::vector<int> sweep_fractions = {1, 2};
    std::vector<uint64_t> sweep_seeds = {1, 2, 3};
    std::string sweep_csv;
    CLI::App* sc_sweep = app.add_subcommand(
        "sweep-semisup", "label-efficiency sweep, baseline vs augmented");
    sc_sweep->add_option("--fractions", sweep_fractions,
                         "keep 1/n of the labels; n from {1,2,5,10}")
        ->delimiter(',');
    sc_sweep->add_option("--seeds", sweep_seeds, "seeds to average over")
        ->delimiter(',');
    sc_sweep->add_option("--csv", sweep_csv, "output CSV path");

    std::vector<uint64_t> sampling_seeds = {1, 2, 3};
    CLI::App* sc_sampling = app.add_subcommand(
        "ablate-sampling", "nucleus versus beam pseudo-narrations");
    sc_sampling->add_option("--seeds", sampling_seeds, "seeds to average over")
        ->delimiter(',');

    std::vector<std::string> tau_specs;
    std::vector<uint64_t> temp_seeds = {1};
    CLI::App* sc_temp = app.add_subcommand(
        "ablate-temperature", "contrastive temperature grid");
    sc_temp->add_option("--taus", tau_specs,
                        "settings as tau_r:tau_n (default built-in grid)")
        ->delimiter(',');
    sc_temp->add_option("--seeds", temp_seeds, "seeds to average over")
        ->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        gridvl::ExperimentConfig cfg;
        if (!config_path.empty())
            cfg = gridvl::load_experiment_config(config_path);
        if (seed_opt->count() > 0) cfg.seed = seed;
        if (out_opt->count() > 0) cfg.out_dir = out_dir;

        CLI::App* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();

        if (name == "run") {
            gridvl::Pipeline pipeline(cfg);
            if (dry_run) {
                std::printf("out: %s\n%s", pipeline.root().c_str(),
                            gridvl::format_plan(pipeline.plan()).c_str());
                return 0;
            }
            print_executed(pipeline.run(force));
            std::printf("reports: %s\n",
                        pipeline.artifact("arms.csv").c_str());
            return 0;
        }
        bool is_stage = std::any_of(
            stages.begin(), stages.end(),
            [&](const auto& st) { return name == st.first; });
        if (is_stage) {
            gridvl::Pipeline pipeline(cfg);
            pipeline.run_stage(name);
            std::printf("stage %s done under %s\n", name.c_str(),
                        pipeline.root().c_str());
            return 0;
        }
        if (name == "finetune") {
            gridvl::FinetuneOutcome outcome =
                gridvl::run_finetune(cfg, finetune_arm);
            std::printf("held mAP before %.6f after %.6f\n",
                        outcome.map_before, outcome.map_after);
            std::printf("checkpoint: %s\nreport: %s\n",
                        outcome.checkpoint_path.c_str(),
                        outcome.csv_path.c_str());
            return 0;
        }
        if (name == "sweep-semisup") {
            gridvl::SweepOptions opt;
            opt.fractions = sweep_fractions;
            opt.seeds = sweep_seeds;
            opt.csv_path = sweep_csv;
            gridvl::SweepOutcome outcome =
                gridvl::run_semi_sup_sweep(cfg, opt);
            for (const auto& summary : outcome.summaries)
                std::printf("fraction 1/%d: baseline %.6f augmented %.6f\n",
                            summary.fraction_denominator,
                            summary.baseline_mean, summary.lavila_mean);
            bool has_half =
                std::find(opt.fractions.begin(), opt.fractions.end(), 2) !=
                opt.fractions.end();
            bool ok = outcome.lavila_never_worse &&
                      (!has_half || outcome.strict_gain_at_half);
            std::printf("augmented never worse: %s\n",
                        outcome.lavila_never_worse ? "yes" : "NO");
            if (has_half)
                std::printf("strict gain at half labels: %s\n",
                            outcome.strict_gain_at_half ? "yes" : "NO");
            std::printf("csv: %s\n", outcome.csv_path.c_str());
            return ok ? 0 : 3;
        }
        if (name == "ablate-sampling") {
            gridvl::SamplingOutcome outcome =
                gridvl::run_sampling_ablation(cfg, sampling_seeds);
            std::printf("mean held mAP: nucleus %.6f, beam %.6f\n",
                        outcome.nucleus_map_mean, outcome.beam_map_mean);
            if (outcome.nucleus_at_least_beam)
                std::printf("nucleus matches or beats beam on this run\n");
            else
                std::printf("NOT reproduced on this run: beam beat nucleus "
                            "by %.6f\n",
                            outcome.beam_map_mean - outcome.nucleus_map_mean);
            std::printf("csv: %s\n", outcome.csv_path.c_str());
            return 0;
        }
        if (name == "ablate-temperature") {
            std::vector<gridvl::TempSetting> grid;
            for (const auto& spec : tau_specs)
                grid.push_back(parse_tau_spec(spec));
            if (grid.empty()) grid = gridvl::default_temperature_grid();
            gridvl::TemperatureOutcome outcome =
                gridvl::run_temperature_ablation(cfg, grid, temp_seeds);
            std::printf("best setting tau_r %.4f tau_n %.4f (mAP %.6f)\n",
                        outcome.best.tau_r, outcome.best.tau_n,
                        outcome.best_map);
            std::printf("csv: %s\n", outcome.csv_path.c_str());
            return 0;
        }
        std::fprintf(stderr, "unhandled subcommand %s\n", name.c_str());
        return 1;
    } catch (const gridvl::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const gridvl::ParseError& e) {
        std::fprintf(stderr, "parse error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
