#pragma once

#include <cstdint>
#include <vector>

#include "gridvl/decoding.hpp"
#include "gridvl/encoder.hpp"
#include "gridvl/nn.hpp"

namespace gridvl {

struct NarratorConfig {
    int vocab_size = 34;
    int bos_id = 0;
    int eos_id = 1;
    int d_t = 32;     // language model width
    int lm_layers = 4;
    int heads = 4;
    int ff_mult = 2;
    int max_text_len = 16;
    int d_v = 32;     // visual token width fed to the pool
    int num_queries = 8;
    int pool_heads = 2;
    int pool_dim = 8; // per-head projection width inside the pool
    int insertion_period = 2;

    void validate() const;
    int cross_blocks() const {
        return (lm_layers + insertion_period - 1) / insertion_period;
    }
};

// Learned query bank cross-attending into visual tokens: output always has
// num_queries rows no matter how many tokens come in. Per-head query
// projections share one key and one value projection.
struct AttentionPool {
    int heads = 0;
    int dim0 = 0;
    Var queries;
    LayerNorm ln_q, ln_v;
    std::vector<Var> wq;
    Var wk, wv, wo;

    AttentionPool() = default;
    AttentionPool(int num_queries, int d_t, int d_v, int heads, int dim0,
                  Rng& rng);
    Var forward(const Var& visual,
                std::vector<Var>* attn_probs = nullptr) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// Residual cross-attention plus feed-forward, each branch scaled by
// tanh(gate) with the gate starting at zero so an untrained block is the
// identity map.
struct GatedCrossBlock {
    LayerNorm ln_attn, ln_ffn;
    MultiHeadAttention attn;
    Dense ff_in, ff_out;
    Var gate_attn, gate_ffn;

    GatedCrossBlock() = default;
    GatedCrossBlock(int dim, int heads, int ff_hidden, Rng& rng);
    Var forward(const Var& x, const Var& pooled) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// Decoder-only language model with gated cross-attention inserted before
// every insertion_period-th layer. The language model half is trained on
// text alone, then frozen; only the pool, cross blocks, and gates learn
// from video.
class Narrator {
public:
    Narrator(const NarratorConfig& cfg, Rng& rng);

    // Text-only path used for language model pretraining. seq must be
    // non-empty; returns one logits row per input position.
    Var lm_logits(const std::vector<int>& seq) const;

    Var attention_pool(const Var& visual) const { return pool_.forward(visual); }

    // prefix must start with the begin marker; one logits row per position.
    Var conditioned_logits(const Var& pooled,
                           const std::vector<int>& prefix) const;
    Vec next_token_distribution(const Var& pooled,
                                const std::vector<int>& prefix) const;

    // Teacher-forced negative log-likelihood summed over target positions.
    // target is the exact token list to predict (append the end marker when
    // the caption should terminate).
    Var captioning_loss(const Mat& visual_feats,
                        const std::vector<int>& target) const;

    // Generates candidate token sequences from visual tokens. Nucleus mode
    // draws num_candidates independent samples; beam modes return the top
    // sequences; greedy returns one.
    std::vector<std::vector<int>> narrate(const Mat& visual_feats,
                                          const DecodingConfig& dcfg,
                                          Rng& rng) const;

    ParamList lm_params() const;
    ParamList adapter_params() const;
    ParamList params() const;
    void freeze_lm();
    bool lm_frozen() const { return lm_frozen_; }
    uint64_t lm_hash() const;

    const NarratorConfig& config() const { return cfg_; }
    const AttentionPool& pool() const { return pool_; }
    std::vector<GatedCrossBlock>& cross_blocks() { return cross_; }

private:
    Var run_layers(Var x, const Var* pooled, int len) const;

    NarratorConfig cfg_;
    Var tok_emb_, pos_emb_;
    std::vector<TransformerBlock> lm_blocks_;
    LayerNorm lm_ln_;
    Var out_w_;
    AttentionPool pool_;
    std::vector<GatedCrossBlock> cross_;
    bool lm_frozen_ = false;
};

enum class FilterMode { Threshold, TopK };

struct CandidateFilter {
    FilterMode mode = FilterMode::Threshold;
    double threshold = 0.5;
    int top_k = 10;
};

struct ScoredCandidate {
    std::vector<int> tokens;
    double score = 0.0;
};

// Scores each candidate narration by embedding similarity against the clip
// and keeps the ones the filter accepts: score > threshold, or the top_k
// best. Results are sorted by score descending.
std::vector<ScoredCandidate> filter_candidates(
    const DualEncoder& encoder, const ClipFrames& frames,
    const std::vector<std::vector<int>>& candidates,
    const CandidateFilter& filter);

} // namespace gridvl
