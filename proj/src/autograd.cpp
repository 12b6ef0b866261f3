#include "gridvl/autograd.hpp"

#include <cmath>
#include <unordered_set>

#include "gridvl/errors.hpp"

namespace gridvl {

namespace {

Var make_node(Mat value, std::vector<Var> parents,
              std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
    for (const auto& p : n->parents) {
        if (p->needs_grad) {
            n->needs_grad = true;
            break;
        }
    }
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a->rows() != b->rows() || a->cols() != b->cols()) {
        throw ShapeError(std::string(op) + ": shape mismatch " +
                         std::to_string(a->rows()) + "x" + std::to_string(a->cols()) +
                         " vs " + std::to_string(b->rows()) + "x" +
                         std::to_string(b->cols()));
    }
}

} // namespace

void Node::accumulate(const Mat& delta) {
    if (!needs_grad) {
        return;
    }
    if (grad.size() == 0) {
        grad = delta;
    } else {
        grad += delta;
    }
}

Mat Node::grad_or_zero() const {
    if (grad.size() == 0) {
        return Mat::Zero(value.rows(), value.cols());
    }
    return grad;
}

void Node::zero_grad() {
    grad.resize(0, 0);
}

Var make_param(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->needs_grad = true;
    return n;
}

Var make_constant(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

Var make_scalar(double v, bool requires_grad) {
    Mat m(1, 1);
    m(0, 0) = v;
    return requires_grad ? make_param(m) : make_constant(m);
}

void backward(const Var& loss) {
    if (loss->rows() != 1 || loss->cols() != 1) {
        throw ShapeError("backward: loss must be 1x1");
    }
    // Iterative post-order DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (!visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss->grad = Mat::Ones(1, 1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->needs_grad && n->grad.size() != 0) {
            n->backward_fn(*n);
        }
    }
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    return make_node(a->value + b->value, {a, b}, [a, b](Node& n) {
        a->accumulate(n.grad);
        b->accumulate(n.grad);
    });
}

Var add_rowvec(const Var& a, const Var& b) {
    if (b->rows() != 1 || b->cols() != a->cols()) {
        throw ShapeError("add_rowvec: b must be 1 x cols(a)");
    }
    Mat out = a->value;
    out.rowwise() += b->value.row(0);
    return make_node(std::move(out), {a, b}, [a, b](Node& n) {
        a->accumulate(n.grad);
        b->accumulate(n.grad.colwise().sum());
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    return make_node(a->value - b->value, {a, b}, [a, b](Node& n) {
        a->accumulate(n.grad);
        b->accumulate(-n.grad);
    });
}

Var scale(const Var& a, double c) {
    return make_node(a->value * c, {a}, [a, c](Node& n) {
        a->accumulate(n.grad * c);
    });
}

Var hadamard(const Var& a, const Var& b) {
    check_same_shape(a, b, "hadamard");
    return make_node(a->value.cwiseProduct(b->value), {a, b}, [a, b](Node& n) {
        a->accumulate(n.grad.cwiseProduct(b->value));
        b->accumulate(n.grad.cwiseProduct(a->value));
    });
}

Var matmul(const Var& a, const Var& b) {
    if (a->cols() != b->rows()) {
        throw ShapeError("matmul: inner dimensions disagree");
    }
    return make_node(a->value * b->value, {a, b}, [a, b](Node& n) {
        a->accumulate(n.grad * b->value.transpose());
        b->accumulate(a->value.transpose() * n.grad);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a->cols() != b->cols()) {
        throw ShapeError("matmul_nt: inner dimensions disagree");
    }
    return make_node(a->value * b->value.transpose(), {a, b}, [a, b](Node& n) {
        a->accumulate(n.grad * b->value);
        b->accumulate(n.grad.transpose() * a->value);
    });
}

Var transpose(const Var& a) {
    return make_node(a->value.transpose(), {a}, [a](Node& n) {
        a->accumulate(n.grad.transpose());
    });
}

Var relu(const Var& a) {
    Mat out = a->value.cwiseMax(0.0);
    return make_node(std::move(out), {a}, [a](Node& n) {
        Mat mask = (a->value.array() > 0.0).cast<double>();
        a->accumulate(n.grad.cwiseProduct(mask));
    });
}

Var gelu(const Var& a) {
    Mat out = a->value.unaryExpr([](double x) {
        return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    });
    return make_node(std::move(out), {a}, [a](Node& n) {
        Mat d = a->value.unaryExpr([](double x) {
            double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
            double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
            return cdf + x * pdf;
        });
        a->accumulate(n.grad.cwiseProduct(d));
    });
}

Var tanh_elem(const Var& a) {
    Mat out = a->value.array().tanh();
    return make_node(std::move(out), {a}, [a](Node& n) {
        Mat d = 1.0 - n.value.array().square();
        a->accumulate(n.grad.cwiseProduct(d));
    });
}

Var gate_scale(const Var& x, const Var& g) {
    if (g->rows() != 1 || g->cols() != 1) {
        throw ShapeError("gate_scale: gate must be 1x1");
    }
    double t = std::tanh(g->scalar());
    return make_node(x->value * t, {x, g}, [x, g, t](Node& n) {
        x->accumulate(n.grad * t);
        double dg = n.grad.cwiseProduct(x->value).sum() * (1.0 - t * t);
        Mat m(1, 1);
        m(0, 0) = dg;
        g->accumulate(m);
    });
}

Var softmax_rows(const Var& a) {
    Mat out(a->rows(), a->cols());
    for (int i = 0; i < a->rows(); ++i) {
        double m = a->value.row(i).maxCoeff();
        Eigen::RowVectorXd e = (a->value.row(i).array() - m).exp();
        out.row(i) = e / e.sum();
    }
    return make_node(std::move(out), {a}, [a](Node& n) {
        Mat dx(n.value.rows(), n.value.cols());
        for (int i = 0; i < n.value.rows(); ++i) {
            const auto y = n.value.row(i);
            const auto gy = n.grad.row(i);
            double dot = gy.cwiseProduct(y).sum();
            dx.row(i) = y.array() * (gy.array() - dot);
        }
        a->accumulate(dx);
    });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    if (gamma->rows() != 1 || gamma->cols() != x->cols() ||
        beta->rows() != 1 || beta->cols() != x->cols()) {
        throw ShapeError("layer_norm_rows: gamma/beta must be 1 x cols(x)");
    }
    const int rows = x->rows();
    const int n = x->cols();
    Mat xhat(rows, n);
    Vec inv_sigma(rows);
    for (int i = 0; i < rows; ++i) {
        double mu = x->value.row(i).mean();
        double var = (x->value.row(i).array() - mu).square().mean();
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma(i) = is;
        xhat.row(i) = (x->value.row(i).array() - mu) * is;
    }
    Mat out = xhat;
    out.array().rowwise() *= gamma->value.row(0).array();
    out.rowwise() += beta->value.row(0);
    auto xhat_p = std::make_shared<Mat>(std::move(xhat));
    auto is_p = std::make_shared<Vec>(std::move(inv_sigma));
    return make_node(std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat_p, is_p](Node& nd) {
        const Mat& g = nd.grad;
        beta->accumulate(g.colwise().sum());
        gamma->accumulate(g.cwiseProduct(*xhat_p).colwise().sum());
        Mat dxhat = g;
        dxhat.array().rowwise() *= gamma->value.row(0).array();
        Mat dx(g.rows(), g.cols());
        for (int i = 0; i < g.rows(); ++i) {
            double m1 = dxhat.row(i).mean();
            double m2 = dxhat.row(i).cwiseProduct(xhat_p->row(i)).mean();
            dx.row(i) = ((dxhat.row(i).array() - m1) -
                         xhat_p->row(i).array() * m2) * (*is_p)(i);
        }
        x->accumulate(dx);
    });
}

Var embed_rows(const Var& table, const std::vector<int>& ids) {
    Mat out(static_cast<int>(ids.size()), table->cols());
    for (size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || id >= table->rows()) {
            throw VocabError("embed_rows: id " + std::to_string(id) +
                             " outside table of " + std::to_string(table->rows()));
        }
        out.row(static_cast<int>(i)) = table->value.row(id);
    }
    return make_node(std::move(out), {table}, [table, ids](Node& n) {
        Mat d = Mat::Zero(table->rows(), table->cols());
        for (size_t i = 0; i < ids.size(); ++i) {
            d.row(ids[i]) += n.grad.row(static_cast<int>(i));
        }
        table->accumulate(d);
    });
}

Var select_row(const Var& a, int i) {
    if (i < 0 || i >= a->rows()) {
        throw ShapeError("select_row: index out of range");
    }
    return make_node(a->value.row(i), {a}, [a, i](Node& n) {
        Mat d = Mat::Zero(a->rows(), a->cols());
        d.row(i) = n.grad.row(0);
        a->accumulate(d);
    });
}

Var mean_rows(const Var& a) {
    Mat out = a->value.colwise().mean();
    const double inv = 1.0 / a->rows();
    return make_node(std::move(out), {a}, [a, inv](Node& n) {
        Mat d = (n.grad.row(0) * inv).replicate(a->rows(), 1);
        a->accumulate(d);
    });
}

Var sum_all(const Var& a) {
    Mat out(1, 1);
    out(0, 0) = a->value.sum();
    return make_node(std::move(out), {a}, [a](Node& n) {
        a->accumulate(Mat::Constant(a->rows(), a->cols(), n.grad(0, 0)));
    });
}

Var vstack(const std::vector<Var>& parts) {
    if (parts.empty()) {
        throw ShapeError("vstack: no parts");
    }
    int cols = parts[0]->cols();
    int rows = 0;
    for (const auto& p : parts) {
        if (p->cols() != cols) {
            throw ShapeError("vstack: column mismatch");
        }
        rows += p->rows();
    }
    Mat out(rows, cols);
    int r = 0;
    for (const auto& p : parts) {
        out.middleRows(r, p->rows()) = p->value;
        r += p->rows();
    }
    return make_node(std::move(out), parts, [parts](Node& n) {
        int r = 0;
        for (const auto& p : parts) {
            p->accumulate(n.grad.middleRows(r, p->rows()));
            r += p->rows();
        }
    });
}

Var hstack(const std::vector<Var>& parts) {
    if (parts.empty()) {
        throw ShapeError("hstack: no parts");
    }
    int rows = parts[0]->rows();
    int cols = 0;
    for (const auto& p : parts) {
        if (p->rows() != rows) {
            throw ShapeError("hstack: row mismatch");
        }
        cols += p->cols();
    }
    Mat out(rows, cols);
    int c = 0;
    for (const auto& p : parts) {
        out.middleCols(c, p->cols()) = p->value;
        c += p->cols();
    }
    return make_node(std::move(out), parts, [parts](Node& n) {
        int c = 0;
        for (const auto& p : parts) {
            p->accumulate(n.grad.middleCols(c, p->cols()));
            c += p->cols();
        }
    });
}

Var l2_normalize_rows(const Var& a) {
    Mat out(a->rows(), a->cols());
    Vec norms(a->rows());
    for (int i = 0; i < a->rows(); ++i) {
        double nrm = a->value.row(i).norm();
        norms(i) = nrm;
        out.row(i) = nrm > 1e-30 ? (a->value.row(i) / nrm).eval()
                                 : a->value.row(i);
    }
    auto norms_p = std::make_shared<Vec>(std::move(norms));
    return make_node(std::move(out), {a}, [a, norms_p](Node& n) {
        Mat dx(n.value.rows(), n.value.cols());
        for (int i = 0; i < n.value.rows(); ++i) {
            double nrm = (*norms_p)(i);
            if (nrm <= 1e-30) {
                dx.row(i).setZero();
                continue;
            }
            const auto y = n.value.row(i);
            const auto gy = n.grad.row(i);
            double dot = gy.cwiseProduct(y).sum();
            dx.row(i) = (gy - dot * y) / nrm;
        }
        a->accumulate(dx);
    });
}

double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    double m = row.maxCoeff();
    return m + std::log((row.array() - m).exp().sum());
}

Var cross_entropy_sum(const Var& logits, const std::vector<int>& targets) {
    if (static_cast<int>(targets.size()) != logits->rows()) {
        throw ShapeError("cross_entropy_sum: one target per row required");
    }
    double total = 0.0;
    for (int i = 0; i < logits->rows(); ++i) {
        int t = targets[i];
        if (t < 0 || t >= logits->cols()) {
            throw VocabError("cross_entropy_sum: target id out of range");
        }
        total += log_sum_exp(logits->value.row(i)) - logits->value(i, t);
    }
    Mat out(1, 1);
    out(0, 0) = total;
    return make_node(std::move(out), {logits}, [logits, targets](Node& n) {
        double gs = n.grad(0, 0);
        Mat d(logits->rows(), logits->cols());
        for (int i = 0; i < logits->rows(); ++i) {
            double m = logits->value.row(i).maxCoeff();
            Eigen::RowVectorXd e = (logits->value.row(i).array() - m).exp();
            d.row(i) = e / e.sum();
            d(i, targets[i]) -= 1.0;
        }
        logits->accumulate(d * gs);
    });
}

Var info_nce_diag(const Var& z) {
    if (z->rows() != z->cols()) {
        throw ShapeError("info_nce_diag: score matrix must be square");
    }
    const int n = z->rows();
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        total += log_sum_exp(z->value.row(i)) - z->value(i, i);
        total += log_sum_exp(z->value.col(i).transpose()) - z->value(i, i);
    }
    Mat out(1, 1);
    out(0, 0) = total / (2.0 * n);
    return make_node(std::move(out), {z}, [z, n](Node& nd) {
        double gs = nd.grad(0, 0) / (2.0 * n);
        Mat d = Mat::Zero(n, n);
        for (int i = 0; i < n; ++i) {
            double m = z->value.row(i).maxCoeff();
            Eigen::RowVectorXd e = (z->value.row(i).array() - m).exp();
            d.row(i) += e / e.sum();
            double mc = z->value.col(i).maxCoeff();
            Vec ec = (z->value.col(i).array() - mc).exp();
            d.col(i) += ec / ec.sum();
            d(i, i) -= 2.0;
        }
        z->accumulate(d * gs);
    });
}

Var max_margin_on_scores(const Var& s, const Eigen::MatrixXi& relevance,
                         double margin) {
    if (s->rows() != relevance.rows() || s->cols() != relevance.cols()) {
        throw ShapeError("max_margin_on_scores: relevance shape mismatch");
    }
    if (margin <= 0.0) {
        throw DomainError("max_margin_on_scores: margin must be positive");
    }
    // One retrieval direction; S is queries x candidates.
    auto direction_value = [margin](const Mat& sm, const Eigen::MatrixXi& r) {
        double total = 0.0;
        int included = 0;
        for (int q = 0; q < sm.rows(); ++q) {
            std::vector<int> pos, neg;
            for (int j = 0; j < sm.cols(); ++j) {
                (r(q, j) != 0 ? pos : neg).push_back(j);
            }
            if (pos.empty() || neg.empty()) {
                continue;
            }
            double qsum = 0.0;
            for (int p : pos) {
                for (int ng : neg) {
                    qsum += std::max(0.0, margin - sm(q, p) + sm(q, ng));
                }
            }
            total += qsum / (static_cast<double>(pos.size()) * neg.size());
            ++included;
        }
        return included > 0 ? total / included : 0.0;
    };
    Mat st = s->value.transpose();
    Eigen::MatrixXi rt = relevance.transpose();
    Mat out(1, 1);
    out(0, 0) = 0.5 * (direction_value(s->value, relevance) +
                       direction_value(st, rt));
    return make_node(std::move(out), {s}, [s, relevance, margin](Node& nd) {
        double gs = nd.grad(0, 0) * 0.5;
        Mat d = Mat::Zero(s->rows(), s->cols());
        auto direction_grad = [margin, gs](const Mat& sm, const Eigen::MatrixXi& r,
                                           auto&& write) {
            struct QueryPairs {
                int q;
                std::vector<int> pos, neg;
            };
            std::vector<QueryPairs> qs;
            for (int q = 0; q < sm.rows(); ++q) {
                QueryPairs item;
                item.q = q;
                for (int j = 0; j < sm.cols(); ++j) {
                    (r(q, j) != 0 ? item.pos : item.neg).push_back(j);
                }
                if (!item.pos.empty() && !item.neg.empty()) {
                    qs.push_back(std::move(item));
                }
            }
            if (qs.empty()) {
                return;
            }
            double inv_q = 1.0 / qs.size();
            for (const auto& item : qs) {
                double w = gs * inv_q /
                           (static_cast<double>(item.pos.size()) * item.neg.size());
                for (int p : item.pos) {
                    for (int ng : item.neg) {
                        if (margin - sm(item.q, p) + sm(item.q, ng) > 0.0) {
                            write(item.q, p, -w);
                            write(item.q, ng, w);
                        }
                    }
                }
            }
        };
        direction_grad(s->value, relevance,
                       [&d](int q, int j, double w) { d(q, j) += w; });
        Mat st = s->value.transpose();
        Eigen::MatrixXi rt = relevance.transpose();
        direction_grad(st, rt,
                       [&d](int q, int j, double w) { d(j, q) += w; });
        s->accumulate(d);
    });
}

} // namespace gridvl
