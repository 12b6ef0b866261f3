#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gridvl/corpus.hpp"
#include "gridvl/decoding.hpp"
#include "gridvl/encoder.hpp"
#include "gridvl/evaluation.hpp"
#include "gridvl/narrator.hpp"
#include "gridvl/training.hpp"
#include "gridvl/worlds.hpp"

namespace gridvl {

// Whole-experiment description. The text format is INI-like: "[section]"
// headers, "key: value" lines, full-line "#" comments. Every field has a
// default, unknown sections or keys are rejected, and canonical_text()
// serializes back so configs round-trip.
struct ExperimentConfig {
    uint64_t seed = 0;
    // Relative paths land under $GRIDVL_OUT when that variable is set.
    std::string out_dir = "out";

    // [world]; its seed field is derived from the global seed, not parsed.
    WorldConfig world;

    // [corpus]
    int chunk_len = 15;  // frames per semi-supervised chunk
    int keep_every = 1;  // keep annotations in every n-th chunk
    double held_out_fraction = 0.25;

    // [model]
    struct ModelSection {
        int patch = 2;
        int frames_per_clip = 4;
        int d_v = 32;
        int d_t = 32;
        int d = 32;
        int video_layers = 2;
        int text_layers = 2;
        int heads = 4;
        int ff_mult = 2;
        int max_text_len = 16;
    } model;

    // [narrator]
    struct NarratorSection {
        int d_t = 32;
        int lm_layers = 4;
        int heads = 4;
        int ff_mult = 2;
        int num_queries = 8;
        int pool_heads = 2;
        int pool_dim = 8;
        int insertion_period = 2;
        int lm_epochs = 18;
        int adapter_epochs = 6;
        double lm_lr = 3e-3;
        double adapter_lr = 3e-3;
        double held_out_fraction = 0.2;
        double filter_threshold = 0.5;
    } narrator;

    // [rephraser]
    int rephrase_max_candidates = 3;

    // [decoding]
    DecodingConfig decoding;

    // [training]
    struct TrainingSection {
        int batch_labeled = 16;
        int batch_unlabeled = 16;
        int epochs = 12;
        double lr = 3e-3;
        double tau_r = 0.07;
        double tau_n = 0.07;
        double rephrase_prob = 0.5;
        int finetune_epochs = 4;
        int finetune_batch = 16;
        double finetune_lr = 1e-3;
        double margin = 0.2;
        // Which variants train-lavila/eval cover. "baseline" is ground
        // truth only, "rephraser" adds paraphrases, "recaption" adds
        // narrator captions on labeled clips, "all" adds both plus
        // pseudo-captions on unlabeled clips.
        std::vector<std::string> arms = {"baseline", "rephraser", "recaption",
                                         "all"};
    } training;

    // [evaluation]
    struct EvalSection {
        bool probe = true;
        bool mcq = true;
        bool zero_shot = true;
    } evaluation;

    void validate() const; // throws ConfigError
    std::string canonical_text() const;

    // Concrete module configs bound to the world's grammar.
    WorldConfig world_config() const;
    DualEncoderConfig encoder_config(const Grammar& grammar) const;
    NarratorConfig narrator_config(const Grammar& grammar) const;
    TrainConfig train_config() const; // shared knobs; caller sets seed/paths
    NarratorTrainConfig narrator_train_config() const;
    FinetuneConfig finetune_config() const;
};

ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);

// Relative directories are joined onto $GRIDVL_OUT when it is set and
// non-empty; absolute ones pass through.
std::string resolve_out_dir(const std::string& out_dir);

// Named scalar results. Rows keep insertion order and values print as %.6f,
// so equal configs produce byte-identical files.
struct MetricRow {
    std::string metric;
    std::string split;
    double value = 0.0;
    uint64_t seed = 0;
};

struct MetricReport {
    std::vector<MetricRow> rows;

    void add(const std::string& metric, const std::string& split,
             double value, uint64_t seed);
    double get(const std::string& metric) const; // throws DataError
    bool has(const std::string& metric) const;
};

void save_metric_csv(const std::string& path, const MetricReport& report);
void save_metric_json(const std::string& path, const MetricReport& report);
MetricReport load_metric_csv(const std::string& path);

struct StageStatus {
    std::string name;
    bool will_skip = false;
    std::vector<std::string> outputs; // paths under the run directory
};

std::string format_plan(const std::vector<StageStatus>& plan);

// Staged run against one output directory:
//   gen-world -> clean -> chunk-subset -> train-baseline -> train-narrator
//   -> cache-narrations -> rephrase -> train-lavila -> eval
// Each completed stage leaves a marker holding a checksum of the config
// slice it depends on (chained through its upstream stages), so re-running
// skips finished work until a relevant knob changes. Stage bodies read
// their inputs from disk, which is what makes resume and the single-stage
// subcommands equivalent to a straight-through run.
class Pipeline {
public:
    explicit Pipeline(const ExperimentConfig& cfg); // validates

    const ExperimentConfig& config() const { return cfg_; }
    const std::string& root() const { return root_; }
    std::string artifact(const std::string& name) const;
    std::string arm_checkpoint(const std::string& arm) const;

    static const std::vector<std::string>& stage_names();

    std::vector<StageStatus> plan() const; // no side effects
    // Runs every pending stage in order; returns the names that executed.
    // force ignores the markers. Failures surface as StageError.
    std::vector<std::string> run(bool force = false);
    // Runs one stage unconditionally; upstream artifacts must exist.
    void run_stage(const std::string& name);

private:
    void execute(const std::string& name);
    void stage_gen_world();
    void stage_clean();
    void stage_chunk_subset();
    void stage_train_baseline();
    void stage_train_narrator();
    void stage_cache_narrations();
    void stage_rephrase();
    void stage_train_lavila();
    void stage_eval();

    std::vector<std::string> stage_outputs(const std::string& name) const;
    uint64_t stage_checksum(const std::string& name) const;
    std::string marker_path(const std::string& name) const;
    bool stage_complete(const std::string& name) const;

    DualEncoder load_encoder(const std::string& ckpt) const;

    ExperimentConfig cfg_;
    std::string root_;
};

// Convenience wrapper: construct, run, hand back the executed stage names.
std::vector<std::string> run_pipeline(const ExperimentConfig& cfg,
                                      bool force = false);

// Retrieval, multiple choice, zero-shot classification, and linear probe
// numbers for one encoder, gated by cfg.evaluation. mcq_items must be built
// once per run so every arm answers the same questions.
MetricReport evaluate_encoder(const DualEncoder& encoder,
                              const std::vector<VideoRecord>& videos,
                              const std::vector<ClipAnnotation>& train_split,
                              const std::vector<ClipAnnotation>& held_split,
                              const Grammar& grammar,
                              const ExperimentConfig& cfg,
                              const std::vector<MCQItem>& mcq_items);

std::vector<MCQItem> build_mcq_items(
    const std::vector<VideoRecord>& videos,
    const std::vector<ClipAnnotation>& held_split, const Grammar& grammar,
    int frames_per_clip, Rng rng);

// Encoder embeddings for a list of clips, computed in small batches.
Mat embed_clips(const DualEncoder& encoder,
                const std::vector<VideoRecord>& videos,
                const std::vector<ClipAnnotation>& clips,
                int frames_per_clip);

struct SweepOptions {
    std::vector<int> fractions = {1, 2}; // keep 1/n of the labels
    std::vector<uint64_t> seeds = {1, 2, 3};
    std::string csv_path; // default <root>/sweep.csv
};

struct SweepFractionSummary {
    int fraction_denominator = 1;
    double baseline_mean = 0.0;
    double lavila_mean = 0.0;
};

struct SweepOutcome {
    std::string csv_path;
    std::vector<SweepFractionSummary> summaries;
    bool lavila_never_worse = false;  // mean holds at every fraction
    bool strict_gain_at_half = false; // strict improvement at 1/2 labels
};

// Label-efficiency sweep. For each fraction and seed the full pipeline runs
// twice over in effect: a ground-truth-only arm and the augmented arm, both
// trained on the kept labels. CSV rows are (fraction, arm, seed, map), one
// per fraction x seed x arm.
SweepOutcome run_semi_sup_sweep(const ExperimentConfig& cfg,
                                const SweepOptions& opt);

struct FinetuneOutcome {
    double map_before = 0.0;
    double map_after = 0.0;
    std::string checkpoint_path;
    std::string csv_path;
};

// Max-margin fine-tuning of one trained arm on the labeled clips, with
// held-out retrieval mAP measured before and after.
FinetuneOutcome run_finetune(const ExperimentConfig& cfg,
                             const std::string& arm = "all");

struct SamplingOutcome {
    std::string csv_path;
    double nucleus_map_mean = 0.0;
    double beam_map_mean = 0.0;
    bool nucleus_at_least_beam = false;
};

// Caption sampling ablation: the augmented arm trained on nucleus-sampled
// captions versus beam-searched ones, plus caption quality of the kept
// captions against the grammar's references. CSV rows are
// (mode, seed, metric, value).
SamplingOutcome run_sampling_ablation(const ExperimentConfig& cfg,
                                      const std::vector<uint64_t>& seeds);

struct TempSetting {
    double tau_r = 0.07;
    double tau_n = 0.07;
};

struct TemperatureOutcome {
    std::string csv_path;
    TempSetting best;
    double best_map = 0.0;
};

std::vector<TempSetting> default_temperature_grid();

// Contrastive temperature ablation over the augmented arm. CSV rows are
// (tau_r, tau_n, seed, map).
TemperatureOutcome run_temperature_ablation(
    const ExperimentConfig& cfg, const std::vector<TempSetting>& grid,
    const std::vector<uint64_t>& seeds);

} // namespace gridvl
