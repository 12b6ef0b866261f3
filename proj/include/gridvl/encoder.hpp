#pragma once

#include <cstdint>
#include <vector>

#include "gridvl/nn.hpp"

namespace gridvl {

struct DualEncoderConfig {
    int grid_size = 8;
    int channels = 9;
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
    int vocab_size = 34;
    int bos_id = 0;
    int eos_id = 1;
    double tau_r = 0.07;
    double tau_n = 0.07;

    void validate() const;
    int patches_per_frame() const {
        int side = grid_size / patch;
        return side * side;
    }
    int patch_dim() const { return channels * patch * patch; }
};

using ClipFrames = std::vector<std::vector<uint8_t>>;

// Flattened patch rows in (frame, patch-row, patch-col) order; each row holds
// one patch channel-major.
Mat patchify_frames(const ClipFrames& frames, const DualEncoderConfig& cfg);

// Additive masks over the (frames * patches) x (frames * patches) token grid.
// Spatial attention stays within a frame, temporal within a patch location.
Mat spatial_attention_mask(int frames, int patches_per_frame);
Mat temporal_attention_mask(int frames, int patches_per_frame);

// Residual block with separate spatial and temporal attention sublayers
// followed by a feed-forward sublayer, all pre-norm.
struct DividedBlock {
    LayerNorm ln_spatial, ln_temporal, ln_ffn;
    MultiHeadAttention attn_spatial, attn_temporal;
    Dense ff_in, ff_out;

    DividedBlock() = default;
    DividedBlock(int dim, int heads, int ff_hidden, Rng& rng);
    Var forward(const Var& x, const Mat& spatial_mask,
                const Mat& temporal_mask) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct VideoEncoding {
    Var pre_pool;  // (frames * patches) x d_v token features, post final norm
    Var embedding; // 1 x d unit row
};

class DualEncoder {
public:
    DualEncoder(const DualEncoderConfig& cfg, Rng& rng);

    // Returns token-level features for downstream conditioning plus the
    // pooled, projected, unit-normalized clip embedding.
    VideoEncoding encode_video(const ClipFrames& frames) const;

    // Content tokens only; the tower adds start/end markers, truncates to
    // max_text_len, and pools at the end-of-sequence position.
    Var encode_text(const std::vector<int>& tokens) const;

    Var encode_video_batch(const std::vector<ClipFrames>& clips) const;
    Var encode_text_batch(const std::vector<std::vector<int>>& seqs) const;

    const DualEncoderConfig& config() const { return cfg_; }
    ParamList params() const;

private:
    DualEncoderConfig cfg_;
    Mat smask_, tmask_;

    Dense patch_proj_;
    Var spatial_pos_, temporal_pos_;
    std::vector<DividedBlock> vblocks_;
    LayerNorm video_ln_;
    Var video_proj_;

    Var token_emb_, text_pos_;
    std::vector<TransformerBlock> tblocks_;
    LayerNorm text_ln_;
    Var text_proj_;
};

// S[i][j] = V.row(i) . U.row(j)
Var similarity_matrix(const Var& v, const Var& u);
Mat similarity_matrix(const Mat& v, const Mat& u);

// Symmetric contrastive loss with per-sample temperatures: logits are
// v_i.u_j / sqrt(tau_i tau_j). Equal temperatures recover plain symmetric
// InfoNCE at that temperature.
Var dual_temperature_loss(const Var& v, const Var& u, const Vec& tau);

// Multi-instance hinge on a precomputed score matrix, both directions.
Var max_margin_loss(const Var& s, const Eigen::MatrixXi& relevance,
                    double margin);

} // namespace gridvl
