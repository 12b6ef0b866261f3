#pragma once

#include <string>
#include <vector>

#include "gridvl/autograd.hpp"
#include "gridvl/rng.hpp"

namespace gridvl {

// Parameters are exposed under stable dotted names ("tower.block0.attn.wo")
// so checkpoints and the optimizer see the same ordering across runs.
struct NamedParam {
    std::string name;
    Var var;
};
using ParamList = std::vector<NamedParam>;

Mat randn_mat(Rng& rng, int rows, int cols, double stddev);

// Additive mask: 0 on allowed pairs, large negative above the diagonal.
Mat causal_mask(int n);

struct Dense {
    Var w, b;

    Dense() = default;
    Dense(int in, int out, Rng& rng);
    Var forward(const Var& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct LayerNorm {
    Var gamma, beta;

    LayerNorm() = default;
    explicit LayerNorm(int dim);
    Var forward(const Var& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// Per-head projection matrices; no query/key/value biases, biased output
// projection. Queries may come from a different space than keys/values so the
// same module serves self-attention and cross-attention.
struct MultiHeadAttention {
    int heads = 0;
    int head_dim = 0;
    std::vector<Var> wq, wk, wv;
    Var wo, bo;

    MultiHeadAttention() = default;
    MultiHeadAttention(int query_dim, int kv_dim, int out_dim, int heads,
                       int head_dim, Rng& rng);

    // mask is additive over scores (n_q x n_kv) or null; attn_probs, when
    // given, receives one row-stochastic matrix per head.
    Var forward(const Var& q_in, const Var& kv_in, const Mat* mask = nullptr,
                std::vector<Var>* attn_probs = nullptr) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

// Pre-norm residual block: x + Attn(LN(x)), then x + FFN(LN(x)).
struct TransformerBlock {
    LayerNorm ln_attn, ln_ffn;
    MultiHeadAttention attn;
    Dense ff_in, ff_out;

    TransformerBlock() = default;
    TransformerBlock(int dim, int heads, int ff_hidden, Rng& rng);
    Var forward(const Var& x, const Mat* mask = nullptr,
                std::vector<Var>* attn_probs = nullptr) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

class Adam {
public:
    Adam(ParamList params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);

    void step();
    void zero_grad();
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    const ParamList& params() const { return params_; }

private:
    struct State {
        Mat m, v;
    };
    ParamList params_;
    std::vector<State> state_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

} // namespace gridvl
