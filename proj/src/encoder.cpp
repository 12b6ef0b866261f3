#include "gridvl/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gridvl/errors.hpp"

namespace gridvl {

namespace {
constexpr double kMaskOff = -1e9;
}

void DualEncoderConfig::validate() const {
    if (grid_size < 2 || patch < 1 || grid_size % patch != 0) {
        throw ConfigError("grid_size must be a positive multiple of patch");
    }
    if (channels < 1 || frames_per_clip < 1) {
        throw ConfigError("channels and frames_per_clip must be positive");
    }
    if (d_v < 1 || d_t < 1 || d < 1) {
        throw ConfigError("widths must be positive");
    }
    if (heads < 1 || d_v % heads != 0 || d_t % heads != 0) {
        throw ConfigError("heads must divide d_v and d_t");
    }
    if (video_layers < 1 || text_layers < 1 || ff_mult < 1) {
        throw ConfigError("layer counts and ff_mult must be positive");
    }
    if (max_text_len < 1) {
        throw ConfigError("max_text_len must be positive");
    }
    if (vocab_size < 2 || bos_id == eos_id || bos_id < 0 ||
        bos_id >= vocab_size || eos_id < 0 || eos_id >= vocab_size) {
        throw ConfigError("vocab must contain distinct start and end ids");
    }
    if (tau_r <= 0.0 || tau_n <= 0.0) {
        throw ConfigError("temperatures must be positive");
    }
}

Mat patchify_frames(const ClipFrames& frames, const DualEncoderConfig& cfg) {
    const int t_len = cfg.frames_per_clip;
    const int g = cfg.grid_size;
    const int p = cfg.patch;
    const int side = g / p;
    if (static_cast<int>(frames.size()) != t_len) {
        throw ShapeError("clip has " + std::to_string(frames.size()) +
                         " frames, config expects " + std::to_string(t_len));
    }
    const size_t frame_bytes =
        static_cast<size_t>(cfg.channels) * g * g;
    Mat out(t_len * side * side, cfg.patch_dim());
    for (int t = 0; t < t_len; ++t) {
        if (frames[t].size() != frame_bytes) {
            throw ShapeError("frame byte count mismatch");
        }
        for (int pr = 0; pr < side; ++pr) {
            for (int pc = 0; pc < side; ++pc) {
                int row = t * side * side + pr * side + pc;
                for (int c = 0; c < cfg.channels; ++c) {
                    for (int dr = 0; dr < p; ++dr) {
                        for (int dc = 0; dc < p; ++dc) {
                            int col = c * p * p + dr * p + dc;
                            size_t src = static_cast<size_t>(c) * g * g +
                                         (pr * p + dr) * g + (pc * p + dc);
                            out(row, col) =
                                static_cast<double>(frames[t][src]);
                        }
                    }
                }
            }
        }
    }
    return out;
}

Mat spatial_attention_mask(int frames, int patches_per_frame) {
    int n = frames * patches_per_frame;
    Mat m(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            m(i, j) = (i / patches_per_frame == j / patches_per_frame)
                          ? 0.0
                          : kMaskOff;
        }
    }
    return m;
}

Mat temporal_attention_mask(int frames, int patches_per_frame) {
    int n = frames * patches_per_frame;
    Mat m(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            m(i, j) = (i % patches_per_frame == j % patches_per_frame)
                          ? 0.0
                          : kMaskOff;
        }
    }
    return m;
}

DividedBlock::DividedBlock(int dim, int heads, int ff_hidden, Rng& rng) {
    if (heads < 1 || dim % heads != 0) {
        throw ConfigError("heads must divide block width");
    }
    ln_spatial = LayerNorm(dim);
    attn_spatial =
        MultiHeadAttention(dim, dim, dim, heads, dim / heads, rng);
    ln_temporal = LayerNorm(dim);
    attn_temporal =
        MultiHeadAttention(dim, dim, dim, heads, dim / heads, rng);
    ln_ffn = LayerNorm(dim);
    ff_in = Dense(dim, ff_hidden, rng);
    ff_out = Dense(ff_hidden, dim, rng);
}

Var DividedBlock::forward(const Var& x, const Mat& spatial_mask,
                          const Mat& temporal_mask) const {
    Var h = ln_spatial.forward(x);
    Var y = add(x, attn_spatial.forward(h, h, &spatial_mask));
    h = ln_temporal.forward(y);
    y = add(y, attn_temporal.forward(h, h, &temporal_mask));
    return add(y, ff_out.forward(gelu(ff_in.forward(ln_ffn.forward(y)))));
}

void DividedBlock::collect(const std::string& prefix, ParamList& out) const {
    ln_spatial.collect(prefix + ".ln_spatial", out);
    attn_spatial.collect(prefix + ".attn_spatial", out);
    ln_temporal.collect(prefix + ".ln_temporal", out);
    attn_temporal.collect(prefix + ".attn_temporal", out);
    ln_ffn.collect(prefix + ".ln_ffn", out);
    ff_in.collect(prefix + ".ff_in", out);
    ff_out.collect(prefix + ".ff_out", out);
}

DualEncoder::DualEncoder(const DualEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int s = cfg_.patches_per_frame();
    smask_ = spatial_attention_mask(cfg_.frames_per_clip, s);
    tmask_ = temporal_attention_mask(cfg_.frames_per_clip, s);

    patch_proj_ = Dense(cfg_.patch_dim(), cfg_.d_v, rng);
    spatial_pos_ = make_param(randn_mat(rng, s, cfg_.d_v, 0.02));
    temporal_pos_ =
        make_param(randn_mat(rng, cfg_.frames_per_clip, cfg_.d_v, 0.02));
    for (int i = 0; i < cfg_.video_layers; ++i) {
        vblocks_.emplace_back(cfg_.d_v, cfg_.heads, cfg_.ff_mult * cfg_.d_v,
                              rng);
    }
    video_ln_ = LayerNorm(cfg_.d_v);
    video_proj_ = make_param(
        randn_mat(rng, cfg_.d_v, cfg_.d, 1.0 / std::sqrt(cfg_.d_v)));

    token_emb_ = make_param(randn_mat(rng, cfg_.vocab_size, cfg_.d_t, 0.02));
    text_pos_ =
        make_param(randn_mat(rng, cfg_.max_text_len + 2, cfg_.d_t, 0.02));
    for (int i = 0; i < cfg_.text_layers; ++i) {
        tblocks_.emplace_back(cfg_.d_t, cfg_.heads, cfg_.ff_mult * cfg_.d_t,
                              rng);
    }
    text_ln_ = LayerNorm(cfg_.d_t);
    text_proj_ = make_param(
        randn_mat(rng, cfg_.d_t, cfg_.d, 1.0 / std::sqrt(cfg_.d_t)));
}

VideoEncoding DualEncoder::encode_video(const ClipFrames& frames) const {
    const int s = cfg_.patches_per_frame();
    Var x = patch_proj_.forward(make_constant(patchify_frames(frames, cfg_)));
    std::vector<int> sidx, tidx;
    for (int t = 0; t < cfg_.frames_per_clip; ++t) {
        for (int i = 0; i < s; ++i) {
            tidx.push_back(t);
            sidx.push_back(i);
        }
    }
    x = add(x, add(embed_rows(spatial_pos_, sidx),
                   embed_rows(temporal_pos_, tidx)));
    for (const auto& block : vblocks_) {
        x = block.forward(x, smask_, tmask_);
    }
    Var pre_pool = video_ln_.forward(x);
    Var pooled = mean_rows(pre_pool);
    Var v = l2_normalize_rows(matmul(pooled, video_proj_));
    return {pre_pool, v};
}

Var DualEncoder::encode_text(const std::vector<int>& tokens) const {
    const size_t keep =
        std::min(tokens.size(), static_cast<size_t>(cfg_.max_text_len));
    std::vector<int> seq;
    seq.reserve(keep + 2);
    seq.push_back(cfg_.bos_id);
    for (size_t i = 0; i < keep; ++i) {
        if (tokens[i] < 0 || tokens[i] >= cfg_.vocab_size) {
            throw VocabError("token id out of range: " +
                             std::to_string(tokens[i]));
        }
        seq.push_back(tokens[i]);
    }
    seq.push_back(cfg_.eos_id);
    const int n = static_cast<int>(seq.size());
    std::vector<int> pos(n);
    std::iota(pos.begin(), pos.end(), 0);

    Var x = add(embed_rows(token_emb_, seq), embed_rows(text_pos_, pos));
    Mat mask = causal_mask(n);
    for (const auto& block : tblocks_) {
        x = block.forward(x, &mask);
    }
    x = text_ln_.forward(x);
    return l2_normalize_rows(matmul(select_row(x, n - 1), text_proj_));
}

Var DualEncoder::encode_video_batch(
    const std::vector<ClipFrames>& clips) const {
    std::vector<Var> rows;
    rows.reserve(clips.size());
    for (const auto& clip : clips) {
        rows.push_back(encode_video(clip).embedding);
    }
    return vstack(rows);
}

Var DualEncoder::encode_text_batch(
    const std::vector<std::vector<int>>& seqs) const {
    std::vector<Var> rows;
    rows.reserve(seqs.size());
    for (const auto& seq : seqs) {
        rows.push_back(encode_text(seq));
    }
    return vstack(rows);
}

ParamList DualEncoder::params() const {
    ParamList out;
    patch_proj_.collect("video.patch", out);
    out.push_back({"video.pos.spatial", spatial_pos_});
    out.push_back({"video.pos.temporal", temporal_pos_});
    for (size_t i = 0; i < vblocks_.size(); ++i) {
        vblocks_[i].collect("video.block" + std::to_string(i), out);
    }
    video_ln_.collect("video.ln", out);
    out.push_back({"video.proj", video_proj_});
    out.push_back({"text.tok", token_emb_});
    out.push_back({"text.pos", text_pos_});
    for (size_t i = 0; i < tblocks_.size(); ++i) {
        tblocks_[i].collect("text.block" + std::to_string(i), out);
    }
    text_ln_.collect("text.ln", out);
    out.push_back({"text.proj", text_proj_});
    return out;
}

Var similarity_matrix(const Var& v, const Var& u) {
    if (v->value.cols() != u->value.cols()) {
        throw ShapeError("embedding widths differ");
    }
    return matmul_nt(v, u);
}

Mat similarity_matrix(const Mat& v, const Mat& u) {
    if (v.cols() != u.cols()) {
        throw ShapeError("embedding widths differ");
    }
    return v * u.transpose();
}

Var dual_temperature_loss(const Var& v, const Var& u, const Vec& tau) {
    const auto n = v->value.rows();
    if (u->value.rows() != n || v->value.cols() != u->value.cols()) {
        throw ShapeError("embedding batches must match");
    }
    if (tau.size() != n) {
        throw ShapeError("one temperature per sample required");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(tau(i) > 0.0)) {
            throw DomainError("temperatures must be positive");
        }
    }
    Mat scale(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            scale(i, j) = 1.0 / std::sqrt(tau(i) * tau(j));
        }
    }
    return info_nce_diag(hadamard(matmul_nt(v, u), make_constant(scale)));
}

Var max_margin_loss(const Var& s, const Eigen::MatrixXi& relevance,
                    double margin) {
    return max_margin_on_scores(s, relevance, margin);
}

} // namespace gridvl
