#include "gridvl/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "gridvl/errors.hpp"

namespace gridvl {

namespace {

std::string clip_name(const ClipAnnotation& clip) {
    return clip.video_id + "[" + std::to_string(clip.t) + "," +
           std::to_string(clip.e) + ")";
}

std::unordered_map<std::string, const VideoRecord*> index_videos(
    const std::vector<VideoRecord>& videos) {
    std::unordered_map<std::string, const VideoRecord*> idx;
    for (const auto& v : videos) {
        idx[v.id] = &v;
    }
    return idx;
}

const VideoRecord* find_video(
    const std::unordered_map<std::string, const VideoRecord*>& idx,
    const std::string& id) {
    auto it = idx.find(id);
    if (it == idx.end()) {
        throw DataError("unknown video id: " + id);
    }
    return it->second;
}

} // namespace

ClipFrames clip_byte_frames(const VideoRecord& video, int t, int e,
                            int frames_per_clip) {
    if (frames_per_clip < 1) {
        throw DomainError("frames_per_clip must be positive");
    }
    if (t < 0 || e <= t || e > video.length) {
        throw DomainError("clip interval out of bounds");
    }
    ClipFrames frames(frames_per_clip);
    for (int k = 0; k < frames_per_clip; ++k) {
        int src = t + k * (e - t) / frames_per_clip;
        frames[k] = video.frames[src];
    }
    return frames;
}

void CachedCandidates::put(const std::string& video_id, int t, int e,
                           std::vector<std::vector<int>> cands) {
    map_[{video_id, t, e}] = std::move(cands);
}

std::vector<std::vector<int>> CachedCandidates::candidates(
    const ClipAnnotation& clip) const {
    auto it = map_.find({clip.video_id, clip.t, clip.e});
    if (it == map_.end()) {
        return {};
    }
    return it->second;
}

FunctionCandidates ground_truth_source(const Grammar& grammar) {
    return FunctionCandidates([&grammar](const ClipAnnotation& clip) {
        return std::vector<std::vector<int>>{
            grammar.encode(Grammar::split_tokens(clip.narration))};
    });
}

namespace {

TrainPair draw_pair(const ClipAnnotation& clip, const CandidateSource& source,
                    double tau, Provenance provenance, Rng& rng) {
    std::vector<std::vector<int>> cands = source.candidates(clip);
    if (cands.empty()) {
        throw DataError("no cached candidates for clip " + clip_name(clip));
    }
    int pick = rng.uniform_int(0, static_cast<int>(cands.size()));
    TrainPair pair;
    pair.video_id = clip.video_id;
    pair.t = clip.t;
    pair.e = clip.e;
    pair.tokens = cands[pick];
    pair.tau = tau;
    pair.provenance = provenance;
    return pair;
}

} // namespace

TrainBatch assemble_batch(const std::vector<ClipAnnotation>& labeled,
                          const std::vector<ClipAnnotation>& unlabeled,
                          const CandidateSource& rephrased,
                          const CandidateSource& narrated,
                          const AssembleConfig& acfg, Rng& rng) {
    if (acfg.tau_r <= 0.0 || acfg.tau_n <= 0.0) {
        throw ConfigError("temperatures must be positive");
    }
    TrainBatch batch;
    batch.labeled = static_cast<int>(labeled.size());
    batch.unlabeled = static_cast<int>(unlabeled.size());
    for (const auto& clip : labeled) {
        if (rng.uniform() < acfg.rephrase_prob) {
            batch.pairs.push_back(draw_pair(clip, rephrased, acfg.tau_r,
                                            Provenance::Rephrased, rng));
        } else {
            batch.pairs.push_back(draw_pair(clip, narrated, acfg.tau_n,
                                            Provenance::Narrated, rng));
        }
    }
    for (const auto& clip : unlabeled) {
        batch.pairs.push_back(
            draw_pair(clip, narrated, acfg.tau_n, Provenance::Narrated, rng));
    }
    return batch;
}

void TrainConfig::validate() const {
    if (batch_labeled < 1 || batch_unlabeled < 0 || epochs < 0 ||
        frames_per_clip < 1) {
        throw ConfigError("train sizes must be positive");
    }
    if (lr <= 0.0 || tau_r <= 0.0 || tau_n <= 0.0) {
        throw ConfigError("rates and temperatures must be positive");
    }
    if (rephrase_prob < 0.0 || rephrase_prob > 1.0) {
        throw ConfigError("rephrase_prob must lie in [0, 1]");
    }
}

std::vector<double> pretrain_dual_encoder(
    DualEncoder& encoder, const std::vector<VideoRecord>& videos,
    const std::vector<ClipAnnotation>& labeled,
    const std::vector<ClipAnnotation>& unlabeled,
    const CandidateSource& rephrased, const CandidateSource& narrated,
    const TrainConfig& cfg) {
    cfg.validate();
    if (labeled.empty()) {
        throw DataError("no labeled clips to train on");
    }
    auto idx = index_videos(videos);
    Rng root(cfg.seed);
    Rng shuffle_rng = root.fork("shuffle");
    Rng assemble_rng = root.fork("assemble");
    AssembleConfig acfg{cfg.tau_r, cfg.tau_n, cfg.rephrase_prob};
    Adam opt(encoder.params(), cfg.lr);

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path, std::ios::binary);
        if (!log) {
            throw DataError("cannot open training log " + cfg.log_path);
        }
    }
    if (!cfg.checkpoint_dir.empty()) {
        std::filesystem::create_directories(cfg.checkpoint_dir);
    }

    std::vector<size_t> lab_order(labeled.size());
    std::iota(lab_order.begin(), lab_order.end(), 0);
    std::vector<size_t> unlab_order(unlabeled.size());
    std::iota(unlab_order.begin(), unlab_order.end(), 0);
    size_t unlab_cursor = 0;

    std::vector<double> losses;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(lab_order);
        shuffle_rng.shuffle(unlab_order);
        for (size_t start = 0; start < lab_order.size();
             start += cfg.batch_labeled) {
            size_t stop =
                std::min(start + cfg.batch_labeled, lab_order.size());
            std::vector<ClipAnnotation> lab_slice;
            for (size_t i = start; i < stop; ++i) {
                lab_slice.push_back(labeled[lab_order[i]]);
            }
            std::vector<ClipAnnotation> unlab_slice;
            if (!unlabeled.empty()) {
                for (int i = 0; i < cfg.batch_unlabeled; ++i) {
                    unlab_slice.push_back(
                        unlabeled[unlab_order[unlab_cursor]]);
                    unlab_cursor = (unlab_cursor + 1) % unlab_order.size();
                }
            }
            TrainBatch batch = assemble_batch(lab_slice, unlab_slice,
                                              rephrased, narrated, acfg,
                                              assemble_rng);
            std::vector<ClipFrames> clips;
            std::vector<std::vector<int>> texts;
            Vec tau(batch.pairs.size());
            for (size_t i = 0; i < batch.pairs.size(); ++i) {
                const TrainPair& p = batch.pairs[i];
                const VideoRecord* video = find_video(idx, p.video_id);
                clips.push_back(
                    clip_byte_frames(*video, p.t, p.e, cfg.frames_per_clip));
                texts.push_back(p.tokens);
                tau(i) = p.tau;
            }
            Var v = encoder.encode_video_batch(clips);
            Var u = encoder.encode_text_batch(texts);
            Var loss = dual_temperature_loss(v, u, tau);
            double value = loss->value(0, 0);
            if (!std::isfinite(value)) {
                throw DomainError("non-finite loss at step " +
                                  std::to_string(step));
            }
            opt.zero_grad();
            backward(loss);
            opt.step();
            losses.push_back(value);
            if (log.is_open()) {
                nlohmann::json j;
                j["step"] = step;
                j["loss"] = value;
                j["lr"] = cfg.lr;
                log << j.dump() << "\n";
            }
            ++step;
        }
        if (!cfg.checkpoint_dir.empty()) {
            save_checkpoint(cfg.checkpoint_dir + "/epoch_" +
                                std::to_string(epoch) + ".ckpt",
                            encoder.params(), "dual_encoder", cfg.seed);
        }
    }
    return losses;
}

void NarratorTrainConfig::validate() const {
    if (lm_epochs < 0 || adapter_epochs < 0 || frames_per_clip < 1) {
        throw ConfigError("epoch counts must be non-negative");
    }
    if (lm_lr <= 0.0 || adapter_lr <= 0.0) {
        throw ConfigError("learning rates must be positive");
    }
    if (held_out_fraction <= 0.0 || held_out_fraction >= 1.0) {
        throw ConfigError("held_out_fraction must lie in (0, 1)");
    }
}

namespace {

struct TokenizedClip {
    std::vector<int> tokens; // content ids
    Mat feats;               // frozen visual tokens
};

// Sum of next-token nll and argmax hits over the target positions of one
// sequence, given logits rows aligned with the prediction positions.
void score_logits(const Mat& logits, const std::vector<int>& targets,
                  double* nll, int* hits) {
    for (size_t i = 0; i < targets.size(); ++i) {
        Vec row = logits.row(static_cast<int>(i));
        double mx = row.maxCoeff();
        double lse = mx + std::log((row.array() - mx).exp().sum());
        *nll += lse - row(targets[i]);
        int best = 0;
        for (int j = 1; j < row.size(); ++j) {
            if (row(j) > row(best)) {
                best = j;
            }
        }
        *hits += best == targets[i];
    }
}

std::vector<int> with_bos(int bos, const std::vector<int>& tokens) {
    std::vector<int> seq;
    seq.push_back(bos);
    seq.insert(seq.end(), tokens.begin(), tokens.end());
    return seq;
}

std::vector<int> with_eos(const std::vector<int>& tokens, int eos) {
    std::vector<int> seq = tokens;
    seq.push_back(eos);
    return seq;
}

} // namespace

NarratorTrainResult train_narrator(Narrator& narrator,
                                   const DualEncoder& encoder,
                                   const std::vector<VideoRecord>& videos,
                                   const std::vector<ClipAnnotation>& clips,
                                   const Grammar& grammar,
                                   const NarratorTrainConfig& cfg) {
    cfg.validate();
    auto idx = index_videos(videos);
    Rng root(cfg.seed);
    auto [train_clips, held_clips] =
        split_annotations(clips, cfg.held_out_fraction, root.fork("split"));
    if (train_clips.empty() || held_clips.empty()) {
        throw DataError("narrator training needs both splits non-empty");
    }

    auto tokenize = [&](const std::vector<ClipAnnotation>& src) {
        std::vector<TokenizedClip> out;
        for (const auto& clip : src) {
            TokenizedClip tc;
            tc.tokens = grammar.encode(Grammar::split_tokens(clip.narration));
            const VideoRecord* video = find_video(idx, clip.video_id);
            tc.feats = encoder
                           .encode_video(clip_byte_frames(
                               *video, clip.t, clip.e, cfg.frames_per_clip))
                           .pre_pool->value;
            out.push_back(std::move(tc));
        }
        return out;
    };
    std::vector<TokenizedClip> train = tokenize(train_clips);
    std::vector<TokenizedClip> held = tokenize(held_clips);
    const int bos = narrator.config().bos_id;
    const int eos = narrator.config().eos_id;

    NarratorTrainResult result;

    // Phase one: the language model learns the text alone.
    {
        Adam opt(narrator.lm_params(), cfg.lm_lr);
        Rng order_rng = root.fork("lm_order");
        std::vector<size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        for (int epoch = 0; epoch < cfg.lm_epochs; ++epoch) {
            order_rng.shuffle(order);
            double total = 0.0;
            long count = 0;
            for (size_t i : order) {
                std::vector<int> input = with_bos(bos, train[i].tokens);
                std::vector<int> targets = with_eos(train[i].tokens, eos);
                Var logits = narrator.lm_logits(input);
                Var loss = cross_entropy_sum(logits, targets);
                double value = loss->value(0, 0);
                if (!std::isfinite(value)) {
                    throw DomainError("non-finite language model loss");
                }
                opt.zero_grad();
                backward(loss);
                opt.step();
                total += value;
                count += static_cast<long>(targets.size());
            }
            result.lm_losses.push_back(total / count);
        }
    }
    narrator.freeze_lm();

    // Gates start shut, so the conditional path equals the bare language
    // model; this is the reference the adapter must beat.
    auto held_metrics = [&](double* ppl, double* acc) {
        double nll = 0.0;
        int hits = 0;
        long count = 0;
        for (const auto& tc : held) {
            std::vector<int> prefix = with_bos(bos, tc.tokens);
            std::vector<int> targets = with_eos(tc.tokens, eos);
            Var pooled = narrator.attention_pool(make_constant(tc.feats));
            Mat logits = narrator.conditioned_logits(pooled, prefix)->value;
            score_logits(logits, targets, &nll, &hits);
            count += static_cast<long>(targets.size());
        }
        *ppl = std::exp(nll / count);
        *acc = static_cast<double>(hits) / count;
    };
    double base_acc = 0.0;
    held_metrics(&result.unconditional_perplexity, &base_acc);

    // Phase two: only the adapter trains against the frozen model.
    {
        Adam opt(narrator.adapter_params(), cfg.adapter_lr);
        Rng order_rng = root.fork("adapter_order");
        std::vector<size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        std::vector<Mat> best;
        double best_acc = -1.0, best_ppl = 0.0;
        for (int epoch = 0; epoch < cfg.adapter_epochs; ++epoch) {
            order_rng.shuffle(order);
            for (size_t i : order) {
                Var loss = narrator.captioning_loss(
                    train[i].feats, with_eos(train[i].tokens, eos));
                double value = loss->value(0, 0);
                if (!std::isfinite(value)) {
                    throw DomainError("non-finite captioning loss at epoch " +
                                      std::to_string(epoch));
                }
                opt.zero_grad();
                backward(loss);
                opt.step();
            }
            double ppl = 0.0, acc = 0.0;
            held_metrics(&ppl, &acc);
            result.held_out_perplexity.push_back(ppl);
            result.held_out_accuracy.push_back(acc);
            if (acc > best_acc || (acc == best_acc && ppl < best_ppl)) {
                best_acc = acc;
                best_ppl = ppl;
                result.selected_epoch = epoch;
                best.clear();
                for (const auto& p : narrator.adapter_params()) {
                    best.push_back(p.var->value);
                }
            }
        }
        if (!best.empty()) {
            ParamList params = narrator.adapter_params();
            for (size_t i = 0; i < params.size(); ++i) {
                params[i].var->value = best[i];
            }
        }
    }
    return result;
}

Eigen::MatrixXi narration_relevance(const std::vector<std::string>& queries,
                                    const std::vector<std::string>& candidates,
                                    const Grammar& grammar) {
    auto classes = [&](const std::vector<std::string>& texts) {
        std::vector<int> out;
        for (const auto& text : texts) {
            out.push_back(grammar.event_class(
                grammar.parse(Grammar::split_tokens(text))));
        }
        return out;
    };
    std::vector<int> q = classes(queries);
    std::vector<int> c = classes(candidates);
    Eigen::MatrixXi r(q.size(), c.size());
    for (size_t i = 0; i < q.size(); ++i) {
        for (size_t j = 0; j < c.size(); ++j) {
            r(i, j) = q[i] == c[j] ? 1 : 0;
        }
    }
    return r;
}

double diagonal_top1_accuracy(const Mat& s) {
    if (s.rows() != s.cols()) {
        throw ShapeError("diagonal accuracy needs a square score matrix");
    }
    int hits = 0;
    for (int i = 0; i < s.rows(); ++i) {
        int best = 0;
        for (int j = 1; j < s.cols(); ++j) {
            if (s(i, j) > s(i, best)) {
                best = j;
            }
        }
        hits += best == i;
    }
    return s.rows() > 0 ? static_cast<double>(hits) / s.rows() : 0.0;
}

void FinetuneConfig::validate() const {
    if (epochs < 0 || batch < 1 || frames_per_clip < 1) {
        throw ConfigError("finetune sizes must be positive");
    }
    if (lr <= 0.0 || margin < 0.0) {
        throw ConfigError("rate must be positive and margin non-negative");
    }
}

std::vector<double> finetune_retrieval(DualEncoder& encoder,
                                       const std::vector<VideoRecord>& videos,
                                       const std::vector<ClipAnnotation>& clips,
                                       const Grammar& grammar,
                                       const FinetuneConfig& cfg) {
    cfg.validate();
    if (clips.empty()) {
        throw DataError("no clips to fine-tune on");
    }
    auto idx = index_videos(videos);
    Rng root(cfg.seed);
    Rng shuffle_rng = root.fork("shuffle");
    Adam opt(encoder.params(), cfg.lr);
    std::vector<size_t> order(clips.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> losses;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += cfg.batch) {
            size_t stop = std::min(start + cfg.batch, order.size());
            std::vector<ClipFrames> frames;
            std::vector<std::vector<int>> texts;
            std::vector<std::string> narrations;
            for (size_t i = start; i < stop; ++i) {
                const ClipAnnotation& clip = clips[order[i]];
                const VideoRecord* video = find_video(idx, clip.video_id);
                frames.push_back(clip_byte_frames(*video, clip.t, clip.e,
                                                  cfg.frames_per_clip));
                texts.push_back(
                    grammar.encode(Grammar::split_tokens(clip.narration)));
                narrations.push_back(clip.narration);
            }
            Eigen::MatrixXi rel =
                narration_relevance(narrations, narrations, grammar);
            Var v = encoder.encode_video_batch(frames);
            Var u = encoder.encode_text_batch(texts);
            Var s = similarity_matrix(v, u);
            Var loss = max_margin_loss(s, rel, cfg.margin);
            double value = loss->value(0, 0);
            if (!std::isfinite(value)) {
                throw DomainError("non-finite loss at step " +
                                  std::to_string(step));
            }
            opt.zero_grad();
            backward(loss);
            opt.step();
            losses.push_back(value);
            ++step;
        }
    }
    return losses;
}

std::pair<std::vector<ClipAnnotation>, std::vector<ClipAnnotation>>
split_annotations(const std::vector<ClipAnnotation>& annotations,
                  double held_out_fraction, Rng rng) {
    if (held_out_fraction < 0.0 || held_out_fraction > 1.0) {
        throw DomainError("held-out fraction must lie in [0, 1]");
    }
    std::vector<ClipAnnotation> copy = annotations;
    rng.shuffle(copy);
    size_t held = static_cast<size_t>(
        std::lround(held_out_fraction * static_cast<double>(copy.size())));
    std::vector<ClipAnnotation> held_out(copy.begin(), copy.begin() + held);
    std::vector<ClipAnnotation> train(copy.begin() + held, copy.end());
    return {train, held_out};
}

namespace {

constexpr char kMagic[8] = {'G', 'V', 'C', 'K', 'P', 'T', '1', '\n'};

} // namespace

void save_checkpoint(const std::string& path, const ParamList& params,
                     const std::string& kind, uint64_t seed) {
    nlohmann::json manifest;
    manifest["kind"] = kind;
    manifest["seed"] = seed;
    manifest["params"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& p : params) {
        nlohmann::json entry;
        entry["name"] = p.name;
        entry["rows"] = p.var->value.rows();
        entry["cols"] = p.var->value.cols();
        entry["offset"] = offset;
        manifest["params"].push_back(entry);
        offset += static_cast<uint64_t>(p.var->value.size()) * sizeof(double);
    }
    std::string text = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write checkpoint " + path);
    }
    out.write(kMagic, sizeof(kMagic));
    uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : params) {
        const Mat& m = p.var->value;
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                double x = m(r, c);
                out.write(reinterpret_cast<const char*>(&x), sizeof(x));
            }
        }
    }
    if (!out) {
        throw DataError("short write on checkpoint " + path);
    }
}

void load_checkpoint(const std::string& path, const ParamList& params,
                     const std::string& kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read checkpoint " + path);
    }
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw ParseError("not a checkpoint file: " + path);
    }
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) {
        throw ParseError("truncated checkpoint manifest: " + path);
    }
    nlohmann::json manifest = nlohmann::json::parse(text, nullptr, false);
    if (manifest.is_discarded()) {
        throw ParseError("bad checkpoint manifest: " + path);
    }
    if (manifest.value("kind", "") != kind) {
        throw ParseError("checkpoint kind mismatch: expected " + kind);
    }
    const auto& entries = manifest.at("params");
    if (entries.size() != params.size()) {
        throw ParseError("checkpoint parameter count mismatch");
    }
    std::streampos blob_start = in.tellg();
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& entry = entries[i];
        if (entry.at("name").get<std::string>() != params[i].name) {
            throw ParseError("checkpoint parameter name mismatch at index " +
                             std::to_string(i));
        }
        Mat& m = params[i].var->value;
        if (entry.at("rows").get<Eigen::Index>() != m.rows() ||
            entry.at("cols").get<Eigen::Index>() != m.cols()) {
            throw ShapeError("checkpoint shape mismatch for " +
                             params[i].name);
        }
        in.seekg(blob_start +
                 static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                double x = 0.0;
                in.read(reinterpret_cast<char*>(&x), sizeof(x));
                m(r, c) = x;
            }
        }
        if (!in) {
            throw ParseError("truncated checkpoint blob for " +
                             params[i].name);
        }
    }
}

} // namespace gridvl
