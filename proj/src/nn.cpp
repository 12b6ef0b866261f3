#include "gridvl/nn.hpp"

#include <cmath>

#include "gridvl/errors.hpp"

namespace gridvl {

Mat randn_mat(Rng& rng, int rows, int cols, double stddev) {
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            m(i, j) = rng.normal() * stddev;
        }
    }
    return m;
}

Mat causal_mask(int n) {
    Mat m = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            m(i, j) = -1e9;
        }
    }
    return m;
}

Dense::Dense(int in, int out, Rng& rng)
    : w(make_param(randn_mat(rng, in, out, 1.0 / std::sqrt(in)))),
      b(make_param(Mat::Zero(1, out))) {}

Var Dense::forward(const Var& x) const {
    return add_rowvec(matmul(x, w), b);
}

void Dense::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
}

LayerNorm::LayerNorm(int dim)
    : gamma(make_param(Mat::Ones(1, dim))), beta(make_param(Mat::Zero(1, dim))) {}

Var LayerNorm::forward(const Var& x) const {
    return layer_norm_rows(x, gamma, beta);
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

MultiHeadAttention::MultiHeadAttention(int query_dim, int kv_dim, int out_dim,
                                       int heads_, int head_dim_, Rng& rng)
    : heads(heads_), head_dim(head_dim_) {
    if (heads <= 0 || head_dim <= 0) {
        throw ConfigError("attention: heads and head_dim must be positive");
    }
    for (int h = 0; h < heads; ++h) {
        wq.push_back(make_param(
            randn_mat(rng, query_dim, head_dim, 1.0 / std::sqrt(query_dim))));
        wk.push_back(make_param(
            randn_mat(rng, kv_dim, head_dim, 1.0 / std::sqrt(kv_dim))));
        wv.push_back(make_param(
            randn_mat(rng, kv_dim, head_dim, 1.0 / std::sqrt(kv_dim))));
    }
    wo = make_param(randn_mat(rng, heads * head_dim, out_dim,
                              1.0 / std::sqrt(heads * head_dim)));
    bo = make_param(Mat::Zero(1, out_dim));
}

Var MultiHeadAttention::forward(const Var& q_in, const Var& kv_in,
                                const Mat* mask,
                                std::vector<Var>* attn_probs) const {
    if (mask && (mask->rows() != q_in->rows() || mask->cols() != kv_in->rows())) {
        throw ShapeError("attention: mask must be n_q x n_kv");
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Var> outs;
    outs.reserve(heads);
    Var mask_node;
    if (mask) {
        mask_node = make_constant(*mask);
    }
    for (int h = 0; h < heads; ++h) {
        Var q = matmul(q_in, wq[h]);
        Var k = matmul(kv_in, wk[h]);
        Var v = matmul(kv_in, wv[h]);
        Var scores = scale(matmul_nt(q, k), inv_sqrt_d);
        if (mask) {
            scores = add(scores, mask_node);
        }
        Var p = softmax_rows(scores);
        if (attn_probs) {
            attn_probs->push_back(p);
        }
        outs.push_back(matmul(p, v));
    }
    return add_rowvec(matmul(hstack(outs), wo), bo);
}

void MultiHeadAttention::collect(const std::string& prefix,
                                 ParamList& out) const {
    for (int h = 0; h < heads; ++h) {
        std::string head = prefix + ".h" + std::to_string(h);
        out.push_back({head + ".wq", wq[h]});
        out.push_back({head + ".wk", wk[h]});
        out.push_back({head + ".wv", wv[h]});
    }
    out.push_back({prefix + ".wo", wo});
    out.push_back({prefix + ".bo", bo});
}

TransformerBlock::TransformerBlock(int dim, int heads, int ff_hidden, Rng& rng)
    : ln_attn(dim),
      ln_ffn(dim),
      attn(dim, dim, dim, heads, dim / heads, rng),
      ff_in(dim, ff_hidden, rng),
      ff_out(ff_hidden, dim, rng) {
    if (dim % heads != 0) {
        throw ConfigError("transformer block: dim must divide by heads");
    }
}

Var TransformerBlock::forward(const Var& x, const Mat* mask,
                              std::vector<Var>* attn_probs) const {
    Var normed = ln_attn.forward(x);
    Var x1 = add(x, attn.forward(normed, normed, mask, attn_probs));
    Var x2 = add(x1, ff_out.forward(gelu(ff_in.forward(ln_ffn.forward(x1)))));
    return x2;
}

void TransformerBlock::collect(const std::string& prefix, ParamList& out) const {
    ln_attn.collect(prefix + ".ln_attn", out);
    attn.collect(prefix + ".attn", out);
    ln_ffn.collect(prefix + ".ln_ffn", out);
    ff_in.collect(prefix + ".ff_in", out);
    ff_out.collect(prefix + ".ff_out", out);
}

Adam::Adam(ParamList params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2),
      eps_(eps) {
    state_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        const auto& v = params_[i].var;
        state_[i].m = Mat::Zero(v->rows(), v->cols());
        state_[i].v = Mat::Zero(v->rows(), v->cols());
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Node& p = *params_[i].var;
        if (p.grad.size() == 0) {
            continue;
        }
        State& s = state_[i];
        s.m = beta1_ * s.m + (1.0 - beta1_) * p.grad;
        s.v = beta2_ * s.v.array() + (1.0 - beta2_) * p.grad.array().square();
        Mat mhat = s.m / bc1;
        Mat vhat = s.v / bc2;
        p.value.array() -= lr_ * mhat.array() / (vhat.array().sqrt() + eps_);
    }
}

void Adam::zero_grad() {
    for (auto& np : params_) {
        np.var->zero_grad();
    }
}

} // namespace gridvl
