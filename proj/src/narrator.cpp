#include "gridvl/narrator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gridvl/errors.hpp"

namespace gridvl {

void NarratorConfig::validate() const {
    if (vocab_size < 2 || bos_id == eos_id || bos_id < 0 ||
        bos_id >= vocab_size || eos_id < 0 || eos_id >= vocab_size) {
        throw ConfigError("vocab must contain distinct begin and end ids");
    }
    if (d_t < 1 || d_v < 1 || lm_layers < 1 || ff_mult < 1) {
        throw ConfigError("model dimensions must be positive");
    }
    if (heads < 1 || d_t % heads != 0) {
        throw ConfigError("heads must divide d_t");
    }
    if (max_text_len < 1) {
        throw ConfigError("max_text_len must be positive");
    }
    if (num_queries < 1 || pool_heads < 1 || pool_dim < 1) {
        throw ConfigError("pool dimensions must be positive");
    }
    if (insertion_period < 1) {
        throw ConfigError("insertion_period must be positive");
    }
}

AttentionPool::AttentionPool(int num_queries, int d_t, int d_v, int heads,
                             int dim0, Rng& rng)
    : heads(heads), dim0(dim0) {
    queries = make_param(randn_mat(rng, num_queries, d_t, 0.02));
    ln_q = LayerNorm(d_t);
    ln_v = LayerNorm(d_v);
    double sq = 1.0 / std::sqrt(d_t);
    double sv = 1.0 / std::sqrt(d_v);
    for (int h = 0; h < heads; ++h) {
        wq.push_back(make_param(randn_mat(rng, d_t, dim0, sq)));
    }
    wk = make_param(randn_mat(rng, d_v, dim0, sv));
    wv = make_param(randn_mat(rng, d_v, dim0, sv));
    wo = make_param(
        randn_mat(rng, heads * dim0, d_t, 1.0 / std::sqrt(heads * dim0)));
}

Var AttentionPool::forward(const Var& visual,
                           std::vector<Var>* attn_probs) const {
    if (visual->value.cols() != wk->value.rows()) {
        throw ShapeError("visual token width does not match pool");
    }
    Var qn = ln_q.forward(queries);
    Var vn = ln_v.forward(visual);
    Var keys = matmul(vn, wk);
    Var values = matmul(vn, wv);
    double scale_by = 1.0 / std::sqrt(static_cast<double>(dim0));
    std::vector<Var> heads_out;
    for (int h = 0; h < heads; ++h) {
        Var scores = scale(matmul_nt(matmul(qn, wq[h]), keys), scale_by);
        Var probs = softmax_rows(scores);
        if (attn_probs) {
            attn_probs->push_back(probs);
        }
        heads_out.push_back(matmul(probs, values));
    }
    return matmul(hstack(heads_out), wo);
}

void AttentionPool::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".queries", queries});
    ln_q.collect(prefix + ".ln_q", out);
    ln_v.collect(prefix + ".ln_v", out);
    for (size_t h = 0; h < wq.size(); ++h) {
        out.push_back({prefix + ".h" + std::to_string(h) + ".wq", wq[h]});
    }
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".wo", wo});
}

GatedCrossBlock::GatedCrossBlock(int dim, int heads, int ff_hidden, Rng& rng) {
    if (heads < 1 || dim % heads != 0) {
        throw ConfigError("heads must divide block width");
    }
    ln_attn = LayerNorm(dim);
    attn = MultiHeadAttention(dim, dim, dim, heads, dim / heads, rng);
    ln_ffn = LayerNorm(dim);
    ff_in = Dense(dim, ff_hidden, rng);
    ff_out = Dense(ff_hidden, dim, rng);
    gate_attn = make_scalar(0.0, true);
    gate_ffn = make_scalar(0.0, true);
}

Var GatedCrossBlock::forward(const Var& x, const Var& pooled) const {
    Var y = add(x, gate_scale(attn.forward(ln_attn.forward(x), pooled),
                              gate_attn));
    Var f = ff_out.forward(gelu(ff_in.forward(ln_ffn.forward(y))));
    return add(y, gate_scale(f, gate_ffn));
}

void GatedCrossBlock::collect(const std::string& prefix,
                              ParamList& out) const {
    ln_attn.collect(prefix + ".ln_attn", out);
    attn.collect(prefix + ".attn", out);
    ln_ffn.collect(prefix + ".ln_ffn", out);
    ff_in.collect(prefix + ".ff_in", out);
    ff_out.collect(prefix + ".ff_out", out);
    out.push_back({prefix + ".gate_attn", gate_attn});
    out.push_back({prefix + ".gate_ffn", gate_ffn});
}

Narrator::Narrator(const NarratorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    tok_emb_ = make_param(randn_mat(rng, cfg_.vocab_size, cfg_.d_t, 0.02));
    pos_emb_ =
        make_param(randn_mat(rng, cfg_.max_text_len + 2, cfg_.d_t, 0.02));
    for (int i = 0; i < cfg_.lm_layers; ++i) {
        lm_blocks_.emplace_back(cfg_.d_t, cfg_.heads, cfg_.ff_mult * cfg_.d_t,
                                rng);
    }
    lm_ln_ = LayerNorm(cfg_.d_t);
    // zero output head: an untrained model emits exactly uniform logits
    out_w_ = make_param(Mat::Zero(cfg_.d_t, cfg_.vocab_size));
    pool_ = AttentionPool(cfg_.num_queries, cfg_.d_t, cfg_.d_v,
                          cfg_.pool_heads, cfg_.pool_dim, rng);
    for (int i = 0; i < cfg_.cross_blocks(); ++i) {
        cross_.emplace_back(cfg_.d_t, cfg_.heads, cfg_.ff_mult * cfg_.d_t,
                            rng);
    }
}

Var Narrator::run_layers(Var x, const Var* pooled, int len) const {
    Mat mask = causal_mask(len);
    for (int i = 0; i < cfg_.lm_layers; ++i) {
        if (pooled && i % cfg_.insertion_period == 0) {
            x = cross_[i / cfg_.insertion_period].forward(x, *pooled);
        }
        x = lm_blocks_[i].forward(x, &mask);
    }
    return matmul(lm_ln_.forward(x), out_w_);
}

Var Narrator::lm_logits(const std::vector<int>& seq) const {
    if (seq.empty()) {
        throw DomainError("empty token sequence");
    }
    if (static_cast<int>(seq.size()) > cfg_.max_text_len + 2) {
        throw DomainError("sequence exceeds position table");
    }
    for (int id : seq) {
        if (id < 0 || id >= cfg_.vocab_size) {
            throw VocabError("token id out of range: " + std::to_string(id));
        }
    }
    const int n = static_cast<int>(seq.size());
    std::vector<int> pos(n);
    std::iota(pos.begin(), pos.end(), 0);
    Var x = add(embed_rows(tok_emb_, seq), embed_rows(pos_emb_, pos));
    return run_layers(x, nullptr, n);
}

Var Narrator::conditioned_logits(const Var& pooled,
                                 const std::vector<int>& prefix) const {
    if (prefix.empty()) {
        throw DomainError("prefix must not be empty");
    }
    if (prefix[0] != cfg_.bos_id) {
        throw DomainError("prefix must start with the begin marker");
    }
    if (static_cast<int>(prefix.size()) > cfg_.max_text_len + 2) {
        throw DomainError("prefix exceeds position table");
    }
    for (int id : prefix) {
        if (id < 0 || id >= cfg_.vocab_size) {
            throw VocabError("token id out of range: " + std::to_string(id));
        }
    }
    const int n = static_cast<int>(prefix.size());
    std::vector<int> pos(n);
    std::iota(pos.begin(), pos.end(), 0);
    Var x = add(embed_rows(tok_emb_, prefix), embed_rows(pos_emb_, pos));
    return run_layers(x, &pooled, n);
}

Vec Narrator::next_token_distribution(const Var& pooled,
                                      const std::vector<int>& prefix) const {
    Var logits = conditioned_logits(pooled, prefix);
    Vec row = logits->value.row(logits->value.rows() - 1);
    Vec shifted = row.array() - row.maxCoeff();
    Vec ex = shifted.array().exp();
    return ex / ex.sum();
}

Var Narrator::captioning_loss(const Mat& visual_feats,
                              const std::vector<int>& target) const {
    if (target.empty()) {
        throw DomainError("empty caption target");
    }
    if (static_cast<int>(target.size()) > cfg_.max_text_len + 1) {
        throw DomainError("caption target exceeds length bound");
    }
    for (int id : target) {
        if (id < 0 || id >= cfg_.vocab_size) {
            throw VocabError("token id out of range: " + std::to_string(id));
        }
    }
    std::vector<int> prefix = {cfg_.bos_id};
    prefix.insert(prefix.end(), target.begin(), target.end() - 1);
    Var pooled = pool_.forward(make_constant(visual_feats));
    Var logits = conditioned_logits(pooled, prefix);
    return cross_entropy_sum(logits, target);
}

std::vector<std::vector<int>> Narrator::narrate(const Mat& visual_feats,
                                                const DecodingConfig& dcfg,
                                                Rng& rng) const {
    dcfg.validate();
    Var pooled = pool_.forward(make_constant(visual_feats));
    StepFn step = [this, pooled](const std::vector<int>& prefix) {
        return next_token_distribution(pooled, prefix);
    };
    // body length bound: positions hold begin marker + content
    const int max_len = std::min(dcfg.max_len, cfg_.max_text_len + 1);
    std::vector<std::vector<int>> out;
    switch (dcfg.strategy) {
    case DecodeStrategy::Greedy: {
        std::vector<int> prefix = {cfg_.bos_id};
        std::vector<int> body;
        for (int t = 0; t < max_len; ++t) {
            int tok = greedy_step(step(prefix));
            if (tok == cfg_.eos_id) {
                break;
            }
            body.push_back(tok);
            prefix.push_back(tok);
        }
        out.push_back(body);
        break;
    }
    case DecodeStrategy::Nucleus:
        for (int k = 0; k < dcfg.num_candidates; ++k) {
            out.push_back(sample_sequence(step, cfg_.bos_id, cfg_.eos_id,
                                          dcfg.p, max_len, rng));
        }
        break;
    case DecodeStrategy::Beam: {
        auto beams = beam_search(step, cfg_.bos_id, cfg_.eos_id,
                                 dcfg.beam_width, max_len);
        for (const auto& b : beams) {
            if (static_cast<int>(out.size()) >= dcfg.num_candidates) {
                break;
            }
            out.push_back(b.tokens);
        }
        break;
    }
    case DecodeStrategy::DiverseBeam: {
        auto beams =
            diverse_beam_search(step, cfg_.bos_id, cfg_.eos_id,
                                dcfg.beam_width, dcfg.groups,
                                dcfg.diversity_penalty, max_len);
        for (const auto& b : beams) {
            if (static_cast<int>(out.size()) >= dcfg.num_candidates) {
                break;
            }
            out.push_back(b.tokens);
        }
        break;
    }
    }
    return out;
}

ParamList Narrator::lm_params() const {
    ParamList out;
    out.push_back({"lm.tok", tok_emb_});
    out.push_back({"lm.pos", pos_emb_});
    for (size_t i = 0; i < lm_blocks_.size(); ++i) {
        lm_blocks_[i].collect("lm.block" + std::to_string(i), out);
    }
    lm_ln_.collect("lm.ln", out);
    out.push_back({"lm.out", out_w_});
    return out;
}

ParamList Narrator::adapter_params() const {
    ParamList out;
    pool_.collect("pool", out);
    for (size_t i = 0; i < cross_.size(); ++i) {
        cross_[i].collect("cross" + std::to_string(i), out);
    }
    return out;
}

ParamList Narrator::params() const {
    ParamList out = lm_params();
    ParamList adapter = adapter_params();
    out.insert(out.end(), adapter.begin(), adapter.end());
    return out;
}

void Narrator::freeze_lm() {
    for (auto& p : lm_params()) {
        p.var->requires_grad = false;
        p.var->needs_grad = false;
        p.var->grad.resize(0, 0);
    }
    lm_frozen_ = true;
}

uint64_t Narrator::lm_hash() const {
    uint64_t h = 1469598103934665603ULL;
    for (const auto& p : lm_params()) {
        const Mat& m = p.var->value;
        h = fnv1a(p.name.data(), p.name.size(), h);
        h = fnv1a(m.data(), sizeof(double) * m.size(), h);
    }
    return h;
}

std::vector<ScoredCandidate> filter_candidates(
    const DualEncoder& encoder, const ClipFrames& frames,
    const std::vector<std::vector<int>>& candidates,
    const CandidateFilter& filter) {
    Mat v = encoder.encode_video(frames).embedding->value;
    std::vector<ScoredCandidate> scored;
    scored.reserve(candidates.size());
    for (const auto& tokens : candidates) {
        Mat u = encoder.encode_text(tokens)->value;
        scored.push_back({tokens, v.row(0).dot(u.row(0))});
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [](const ScoredCandidate& a, const ScoredCandidate& b) {
                         return a.score > b.score;
                     });
    std::vector<ScoredCandidate> kept;
    if (filter.mode == FilterMode::Threshold) {
        for (const auto& c : scored) {
            if (c.score > filter.threshold) {
                kept.push_back(c);
            }
        }
    } else {
        int k = std::min<int>(filter.top_k, static_cast<int>(scored.size()));
        kept.assign(scored.begin(), scored.begin() + k);
    }
    return kept;
}

} // namespace gridvl
