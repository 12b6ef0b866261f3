#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace gridvl {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Matrix-valued reverse-mode autodiff. Each Node holds a value, an optional
// gradient of the final scalar w.r.t. that value, and a closure that pushes
// the node's gradient into its parents. Graphs are built per forward pass and
// freed when the last Var goes out of scope; parents are owned by children so
// there are no reference cycles.
class Node;
using Var = std::shared_ptr<Node>;

class Node {
public:
    Mat value;
    Mat grad; // allocated on first accumulation
    bool requires_grad = false;
    // True when this node or any ancestor leaf requires a gradient; backward
    // skips subtrees where it is false, and frozen leaves never accumulate.
    bool needs_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return parents.empty(); }
    int rows() const { return static_cast<int>(value.rows()); }
    int cols() const { return static_cast<int>(value.cols()); }
    double scalar() const { return value(0, 0); }

    void accumulate(const Mat& delta);
    Mat grad_or_zero() const;
    void zero_grad();
};

// Leaves.
Var make_param(Mat v);           // requires_grad = true
Var make_constant(Mat v);        // requires_grad = false
Var make_scalar(double v, bool requires_grad = false);

// Runs reverse-mode accumulation from a 1x1 scalar node.
void backward(const Var& loss);

// Elementwise / broadcast arithmetic.
Var add(const Var& a, const Var& b);              // same shape
Var add_rowvec(const Var& a, const Var& b);       // b is 1 x n, broadcast over rows
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var hadamard(const Var& a, const Var& b);

// Matrix products.
Var matmul(const Var& a, const Var& b);    // a(m,k) * b(k,n)
Var matmul_nt(const Var& a, const Var& b); // a(m,k) * b(n,k)^T
Var transpose(const Var& a);

// Nonlinearities.
Var relu(const Var& a);
Var gelu(const Var& a);
Var tanh_elem(const Var& a);

// out = x * tanh(g), g a 1x1 gate parameter.
Var gate_scale(const Var& x, const Var& g);

// Row-wise softmax (optionally pre-masked by adding a constant to the input).
Var softmax_rows(const Var& a);

// Per-row layer normalization with learnable 1 x n gamma/beta.
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta,
                    double eps = 1e-5);

// Structure ops.
Var embed_rows(const Var& table, const std::vector<int>& ids);
Var select_row(const Var& a, int i);
Var mean_rows(const Var& a);
Var sum_all(const Var& a);
Var vstack(const std::vector<Var>& parts);
Var hstack(const std::vector<Var>& parts);

// Row-wise L2 normalization: y_r = x_r / ||x_r||.
Var l2_normalize_rows(const Var& a);

// Sum over i of [logsumexp(logits row i) - logits(i, targets[i])].
Var cross_entropy_sum(const Var& logits, const std::vector<int>& targets);

// Symmetric diagonal cross-entropy over a score matrix Z (N x N):
//   (1/2N) sum_i [ LSE(Z row i) - Z_ii + LSE(Z col i) - Z_ii ].
// The dual-temperature contrastive loss is this applied to temperature-scaled
// similarity scores.
Var info_nce_diag(const Var& z);

// Multi-instance max-margin loss on a score matrix (both directions); see
// encoder.hpp for the aggregation contract.
Var max_margin_on_scores(const Var& s, const Eigen::MatrixXi& relevance,
                         double margin);

// Numerically stable log-sum-exp of a row vector.
double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& row);

} // namespace gridvl
