#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "gridvl/corpus.hpp"
#include "gridvl/encoder.hpp"
#include "gridvl/narrator.hpp"
#include "gridvl/nn.hpp"
#include "gridvl/rng.hpp"
#include "gridvl/worlds.hpp"

namespace gridvl {

// Byte frames for [t, e) sampled at the same indices as the matrix variant
// in worlds.hpp: frame k sits at t + floor(k * (e - t) / T).
ClipFrames clip_byte_frames(const VideoRecord& video, int t, int e,
                            int frames_per_clip);

// One supervision pair inside a training batch. tokens are content ids
// without sentence delimiters; tau is the contrastive temperature assigned
// by provenance.
struct TrainPair {
    std::string video_id;
    int t = 0;
    int e = 0;
    std::vector<int> tokens;
    double tau = 0.0;
    Provenance provenance = Provenance::GroundTruth;
};

struct TrainBatch {
    std::vector<TrainPair> pairs; // labeled block first, then unlabeled
    int labeled = 0;
    int unlabeled = 0;
};

// Supplies candidate narrations for a clip. Implementations may serve a
// prebuilt cache or generate on demand; batch assembly only ever sees the
// returned list, so the two behave identically given equal candidates.
class CandidateSource {
public:
    virtual ~CandidateSource() = default;
    // All candidates for the clip in a fixed order; empty when unknown.
    virtual std::vector<std::vector<int>> candidates(
        const ClipAnnotation& clip) const = 0;
};

class CachedCandidates final : public CandidateSource {
public:
    void put(const std::string& video_id, int t, int e,
             std::vector<std::vector<int>> cands);
    std::vector<std::vector<int>> candidates(
        const ClipAnnotation& clip) const override;
    size_t size() const { return map_.size(); }

private:
    std::map<std::tuple<std::string, int, int>, std::vector<std::vector<int>>>
        map_;
};

class FunctionCandidates final : public CandidateSource {
public:
    using Fn =
        std::function<std::vector<std::vector<int>>(const ClipAnnotation&)>;
    explicit FunctionCandidates(Fn fn) : fn_(std::move(fn)) {}
    std::vector<std::vector<int>> candidates(
        const ClipAnnotation& clip) const override {
        return fn_(clip);
    }

private:
    Fn fn_;
};

// Source that answers every clip with its own ground-truth narration. The
// grammar must outlive the returned object.
FunctionCandidates ground_truth_source(const Grammar& grammar);

struct AssembleConfig {
    double tau_r = 0.07;
    double tau_n = 0.07;
    double rephrase_prob = 0.5;
};

// Augmented batch assembly: each labeled clip flips a coin between a
// rephrased candidate (tau_r) and a narrated candidate (tau_n); every
// unlabeled clip takes a narrated candidate at tau_n. One candidate is drawn
// uniformly from the clip's list. A clip absent from the required source is
// a data error naming the clip.
TrainBatch assemble_batch(const std::vector<ClipAnnotation>& labeled,
                          const std::vector<ClipAnnotation>& unlabeled,
                          const CandidateSource& rephrased,
                          const CandidateSource& narrated,
                          const AssembleConfig& acfg, Rng& rng);

struct TrainConfig {
    int batch_labeled = 16;
    int batch_unlabeled = 16; // ignored when no unlabeled clips are given
    int epochs = 8;
    double lr = 3e-3;
    double tau_r = 0.07;
    double tau_n = 0.07;
    double rephrase_prob = 0.5;
    int frames_per_clip = 4;
    uint64_t seed = 0;
    std::string checkpoint_dir; // per-epoch checkpoints when non-empty
    std::string log_path;       // JSONL {step, loss, lr} when non-empty

    void validate() const; // throws ConfigError
};

// Contrastive pretraining over assembled batches. Mutates the encoder and
// returns the per-step loss history. A non-finite loss aborts with the step
// index in the message.
std::vector<double> pretrain_dual_encoder(
    DualEncoder& encoder, const std::vector<VideoRecord>& videos,
    const std::vector<ClipAnnotation>& labeled,
    const std::vector<ClipAnnotation>& unlabeled,
    const CandidateSource& rephrased, const CandidateSource& narrated,
    const TrainConfig& cfg);

struct NarratorTrainConfig {
    int lm_epochs = 24;
    int adapter_epochs = 8;
    double lm_lr = 3e-3;
    double adapter_lr = 3e-3;
    double held_out_fraction = 0.2;
    int frames_per_clip = 4;
    uint64_t seed = 0;

    void validate() const;
};

struct NarratorTrainResult {
    std::vector<double> lm_losses;          // per-epoch mean token nll
    std::vector<double> held_out_perplexity; // per adapter epoch
    std::vector<double> held_out_accuracy;   // per adapter epoch
    int selected_epoch = -1;
    double unconditional_perplexity = 0.0; // language model alone, gates shut
};

// Two-phase narrator training: the language model first learns the narration
// text alone and is frozen; then only the visual adapter trains, with the
// video tower held fixed as a feature extractor. The adapter snapshot with
// the best held-out next-token accuracy (ties: lower perplexity, then
// earlier epoch) is restored before returning.
NarratorTrainResult train_narrator(Narrator& narrator,
                                   const DualEncoder& encoder,
                                   const std::vector<VideoRecord>& videos,
                                   const std::vector<ClipAnnotation>& clips,
                                   const Grammar& grammar,
                                   const NarratorTrainConfig& cfg);

// Binary relevance by narration meaning: R(i, j) = 1 iff the two narrations
// describe the same event class.
Eigen::MatrixXi narration_relevance(const std::vector<std::string>& queries,
                                    const std::vector<std::string>& candidates,
                                    const Grammar& grammar);

// Fraction of rows whose diagonal entry is the strict row maximum (ties
// resolve to the lowest index, so a tied diagonal off position 0 misses).
double diagonal_top1_accuracy(const Mat& s);

struct FinetuneConfig {
    int epochs = 4;
    int batch = 16;
    double lr = 1e-3;
    double margin = 0.2;
    int frames_per_clip = 4;
    uint64_t seed = 0;

    void validate() const;
};

// Max-margin retrieval fine-tuning against event-class relevance. Mutates
// the encoder; zero epochs leave it untouched. Returns per-step losses.
std::vector<double> finetune_retrieval(DualEncoder& encoder,
                                       const std::vector<VideoRecord>& videos,
                                       const std::vector<ClipAnnotation>& clips,
                                       const Grammar& grammar,
                                       const FinetuneConfig& cfg);

// Deterministic split: shuffles a copy under the rng and cuts the first
// round(fraction * n) into the held-out part.
std::pair<std::vector<ClipAnnotation>, std::vector<ClipAnnotation>>
split_annotations(const std::vector<ClipAnnotation>& annotations,
                  double held_out_fraction, Rng rng);

// Flat little-endian checkpoint: magic, manifest length, JSON manifest with
// named shapes and offsets, then the raw parameter blobs in order.
void save_checkpoint(const std::string& path, const ParamList& params,
                     const std::string& kind, uint64_t seed);

// Loads values into an existing parameter list; names and shapes must match
// the manifest exactly.
void load_checkpoint(const std::string& path, const ParamList& params,
                     const std::string& kind);

} // namespace gridvl
