#include "gridvl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "gridvl/errors.hpp"

namespace gridvl {

std::vector<int> ranked_indices(const Vec& scores) {
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return scores(a) > scores(b); });
    return idx;
}

namespace {

// AP for one query; returns false when the row has no positive.
bool average_precision(const Vec& scores, const Eigen::VectorXi& rel,
                       double* out) {
    int total_rel = 0;
    for (int i = 0; i < rel.size(); ++i) {
        if (rel(i) > 0) {
            ++total_rel;
        }
    }
    if (total_rel == 0) {
        return false;
    }
    auto order = ranked_indices(scores);
    int hits = 0;
    double ap = 0.0;
    for (size_t k = 0; k < order.size(); ++k) {
        if (rel(order[k]) > 0) {
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(k + 1);
        }
    }
    *out = ap / total_rel;
    return true;
}

double direction_map(const Mat& s, const Eigen::MatrixXi& rel, int* excluded) {
    double sum = 0.0;
    int used = 0;
    *excluded = 0;
    for (int q = 0; q < s.rows(); ++q) {
        double ap;
        if (average_precision(s.row(q), rel.row(q), &ap)) {
            sum += ap;
            ++used;
        } else {
            ++*excluded;
        }
    }
    return used > 0 ? sum / used : 0.0;
}

double dcg_at_ranking(const Vec& rel_in_rank_order) {
    double dcg = 0.0;
    for (int i = 0; i < rel_in_rank_order.size(); ++i) {
        dcg += rel_in_rank_order(i) / std::log2(static_cast<double>(i) + 2.0);
    }
    return dcg;
}

double direction_ndcg(const Mat& s, const Mat& rel) {
    double sum = 0.0;
    for (int q = 0; q < s.rows(); ++q) {
        Vec row = rel.row(q);
        if (row.maxCoeff() <= 0.0) {
            continue; // contributes 0
        }
        auto order = ranked_indices(s.row(q));
        Vec ranked(row.size());
        for (size_t k = 0; k < order.size(); ++k) {
            ranked(k) = row(order[k]);
        }
        Vec ideal = row;
        std::sort(ideal.data(), ideal.data() + ideal.size(),
                  std::greater<double>());
        sum += dcg_at_ranking(ranked) / dcg_at_ranking(ideal);
    }
    return s.rows() > 0 ? sum / s.rows() : 0.0;
}

} // namespace

DirectionalMetric retrieval_map(const Mat& s,
                                const Eigen::MatrixXi& relevance) {
    if (s.rows() != relevance.rows() || s.cols() != relevance.cols()) {
        throw ShapeError("scores and relevance must align");
    }
    DirectionalMetric m;
    m.v2t = direction_map(s, relevance, &m.excluded_v2t);
    Mat st = s.transpose();
    Eigen::MatrixXi rt = relevance.transpose();
    m.t2v = direction_map(st, rt, &m.excluded_t2v);
    m.average = 0.5 * (m.v2t + m.t2v);
    return m;
}

DirectionalMetric retrieval_ndcg(const Mat& s, const Mat& relevance) {
    if (s.rows() != relevance.rows() || s.cols() != relevance.cols()) {
        throw ShapeError("scores and relevance must align");
    }
    if (relevance.minCoeff() < 0.0) {
        throw DomainError("relevance must be non-negative");
    }
    DirectionalMetric m;
    m.v2t = direction_ndcg(s, relevance);
    m.t2v = direction_ndcg(s.transpose(), relevance.transpose());
    m.average = 0.5 * (m.v2t + m.t2v);
    return m;
}

MCQResult mcq_accuracy(const DualEncoder& encoder,
                       const std::vector<MCQItem>& items) {
    MCQResult r;
    int inter_hit = 0, intra_hit = 0;
    for (const auto& item : items) {
        if (item.candidates.size() != 5) {
            throw DataError("multiple choice item needs exactly 5 candidates");
        }
        if (item.correct < 0 || item.correct >= 5) {
            throw DataError("correct index out of range");
        }
        Mat v = encoder.encode_video(item.frames).embedding->value;
        int best = 0;
        double best_score = 0.0;
        for (int c = 0; c < 5; ++c) {
            Mat u = encoder.encode_text(item.candidates[c])->value;
            double score = v.row(0).dot(u.row(0));
            if (c == 0 || score > best_score) {
                best = c;
                best_score = score;
            }
        }
        bool hit = best == item.correct;
        if (item.intra_video) {
            ++r.intra_count;
            intra_hit += hit;
        } else {
            ++r.inter_count;
            inter_hit += hit;
        }
    }
    r.inter_accuracy =
        r.inter_count > 0 ? static_cast<double>(inter_hit) / r.inter_count : 0.0;
    r.intra_accuracy =
        r.intra_count > 0 ? static_cast<double>(intra_hit) / r.intra_count : 0.0;
    return r;
}

int zero_shot_classify(const DualEncoder& encoder, const ClipFrames& frames,
                       const std::vector<std::vector<int>>& class_prompts) {
    if (class_prompts.empty()) {
        throw DataError("no class prompts");
    }
    Mat v = encoder.encode_video(frames).embedding->value;
    int best = 0;
    double best_score = 0.0;
    for (size_t c = 0; c < class_prompts.size(); ++c) {
        Mat u = encoder.encode_text(class_prompts[c])->value;
        double score = v.row(0).dot(u.row(0));
        if (c == 0 || score > best_score) {
            best = static_cast<int>(c);
            best_score = score;
        }
    }
    return best;
}

std::vector<double> probe_c_sweep() {
    std::vector<double> out;
    for (int e = -5; e <= 4; ++e) {
        out.push_back(std::pow(10.0, e));
    }
    return out;
}

namespace {

// Full-batch training of one binary squared-hinge SVM; returns w with the
// bias as a trailing element. Adam keeps the step size usable across the
// whole C sweep.
Vec train_binary_svm(const Mat& x, const std::vector<int>& sign, double c) {
    const int n = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    Vec w = Vec::Zero(d + 1);
    Vec m = Vec::Zero(d + 1), v = Vec::Zero(d + 1);
    const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int it = 1; it <= 400; ++it) {
        Vec g = Vec::Zero(d + 1);
        g.head(d) = w.head(d);
        for (int i = 0; i < n; ++i) {
            double f = x.row(i).dot(w.head(d)) + w(d);
            double margin = 1.0 - sign[i] * f;
            if (margin > 0.0) {
                double coef = -2.0 * c * sign[i] * margin;
                g.head(d) += coef * x.row(i).transpose();
                g(d) += coef;
            }
        }
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
        double mc = 1.0 - std::pow(b1, it);
        double vc = 1.0 - std::pow(b2, it);
        for (int j = 0; j <= d; ++j) {
            w(j) -= lr * (m(j) / mc) / (std::sqrt(v(j) / vc) + eps);
        }
    }
    return w;
}

} // namespace

ProbeResult linear_probe(const Mat& train_x, const std::vector<int>& train_y,
                         const Mat& test_x, const std::vector<int>& test_y,
                         const std::vector<double>& c_values) {
    if (train_x.rows() != static_cast<Eigen::Index>(train_y.size()) ||
        test_x.rows() != static_cast<Eigen::Index>(test_y.size())) {
        throw ShapeError("feature and label counts must match");
    }
    if (train_x.cols() != test_x.cols()) {
        throw ShapeError("train and test feature widths differ");
    }
    std::set<int> class_set(train_y.begin(), train_y.end());
    if (class_set.size() < 2) {
        throw DomainError("linear probe needs at least two classes");
    }
    std::vector<int> classes(class_set.begin(), class_set.end());

    ProbeResult result;
    for (double c : c_values) {
        Mat weights(classes.size(), train_x.cols() + 1);
        for (size_t k = 0; k < classes.size(); ++k) {
            std::vector<int> sign(train_y.size());
            for (size_t i = 0; i < train_y.size(); ++i) {
                sign[i] = train_y[i] == classes[k] ? 1 : -1;
            }
            weights.row(k) = train_binary_svm(train_x, sign, c).transpose();
        }
        int hits = 0;
        for (Eigen::Index i = 0; i < test_x.rows(); ++i) {
            int best = 0;
            double best_score = 0.0;
            for (size_t k = 0; k < classes.size(); ++k) {
                double score =
                    test_x.row(i).dot(weights.row(k).head(test_x.cols())) +
                    weights(k, test_x.cols());
                if (k == 0 || score > best_score) {
                    best = static_cast<int>(k);
                    best_score = score;
                }
            }
            hits += classes[best] == test_y[i];
        }
        double acc = test_y.empty()
                         ? 0.0
                         : static_cast<double>(hits) / test_y.size();
        result.sweep.push_back({c, acc});
        if (result.sweep.size() == 1 || acc > result.best_accuracy) {
            result.best_accuracy = acc;
            result.best_c = c;
        }
    }
    return result;
}

namespace {

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, int>;

NgramCounts count_ngrams(const std::vector<std::string>& tokens, int n) {
    NgramCounts counts;
    if (static_cast<int>(tokens.size()) < n) {
        return counts;
    }
    for (size_t i = 0; i + n <= tokens.size(); ++i) {
        ++counts[Ngram(tokens.begin() + i, tokens.begin() + i + n)];
    }
    return counts;
}

int lcs_length(const std::vector<std::string>& a,
               const std::vector<std::string>& b) {
    std::vector<std::vector<int>> dp(a.size() + 1,
                                     std::vector<int>(b.size() + 1, 0));
    for (size_t i = 1; i <= a.size(); ++i) {
        for (size_t j = 1; j <= b.size(); ++j) {
            dp[i][j] = a[i - 1] == b[j - 1]
                           ? dp[i - 1][j - 1] + 1
                           : std::max(dp[i - 1][j], dp[i][j - 1]);
        }
    }
    return dp[a.size()][b.size()];
}

} // namespace

CaptionScores caption_metrics(
    const std::vector<std::vector<std::string>>& candidates,
    const std::vector<std::vector<std::vector<std::string>>>& references) {
    if (candidates.size() != references.size()) {
        throw ShapeError("one reference set per candidate required");
    }
    if (candidates.empty()) {
        throw DataError("empty caption corpus");
    }
    for (const auto& refs : references) {
        if (refs.empty()) {
            throw DataError("candidate without references");
        }
    }
    const int max_n = 4;
    const size_t m = candidates.size();

    // BLEU
    std::vector<long> match(max_n + 1, 0), total(max_n + 1, 0);
    long cand_len = 0, eff_ref_len = 0;
    for (size_t i = 0; i < m; ++i) {
        const auto& cand = candidates[i];
        cand_len += static_cast<long>(cand.size());
        long best_diff = -1, best_len = 0;
        for (const auto& r : references[i]) {
            long diff = std::labs(static_cast<long>(r.size()) -
                                  static_cast<long>(cand.size()));
            if (best_diff < 0 || diff < best_diff ||
                (diff == best_diff &&
                 static_cast<long>(r.size()) < best_len)) {
                best_diff = diff;
                best_len = static_cast<long>(r.size());
            }
        }
        eff_ref_len += best_len;
        for (int n = 1; n <= max_n; ++n) {
            NgramCounts cn = count_ngrams(cand, n);
            NgramCounts clip;
            for (const auto& r : references[i]) {
                for (const auto& [g, c] : count_ngrams(r, n)) {
                    clip[g] = std::max(clip[g], c);
                }
            }
            for (const auto& [g, c] : cn) {
                auto it = clip.find(g);
                match[n] += std::min(c, it == clip.end() ? 0 : it->second);
                total[n] += c;
            }
        }
    }
    CaptionScores out;
    if (cand_len > 0) {
        double bp = cand_len > eff_ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(eff_ref_len) /
                                             cand_len);
        double logsum = 0.0;
        bool dead = false;
        double* slots[4] = {&out.bleu1, &out.bleu2, &out.bleu3, &out.bleu4};
        for (int n = 1; n <= max_n; ++n) {
            double p = total[n] > 0
                           ? static_cast<double>(match[n]) / total[n]
                           : 0.0;
            if (p == 0.0) {
                dead = true;
            } else {
                logsum += std::log(p);
            }
            *slots[n - 1] = dead ? 0.0 : bp * std::exp(logsum / n);
        }
    }

    // ROUGE-L
    const double beta2 = 1.2 * 1.2;
    double rouge_sum = 0.0;
    for (size_t i = 0; i < m; ++i) {
        double best = 0.0;
        for (const auto& r : references[i]) {
            if (candidates[i].empty() || r.empty()) {
                continue;
            }
            int l = lcs_length(candidates[i], r);
            if (l == 0) {
                continue;
            }
            double p = static_cast<double>(l) / candidates[i].size();
            double rec = static_cast<double>(l) / r.size();
            best = std::max(best,
                            (1.0 + beta2) * p * rec / (rec + beta2 * p));
        }
        rouge_sum += best;
    }
    out.rouge_l = rouge_sum / m;

    // CIDEr: document frequency over reference sets
    std::vector<std::map<Ngram, int>> df(max_n + 1);
    for (const auto& refs : references) {
        for (int n = 1; n <= max_n; ++n) {
            std::set<Ngram> seen;
            for (const auto& r : refs) {
                for (const auto& kv : count_ngrams(r, n)) {
                    seen.insert(kv.first);
                }
            }
            for (const auto& g : seen) {
                ++df[n][g];
            }
        }
    }
    auto tfidf = [&](const std::vector<std::string>& tokens, int n) {
        std::map<Ngram, double> vec;
        for (const auto& [g, c] : count_ngrams(tokens, n)) {
            auto it = df[n].find(g);
            double denom = it == df[n].end() ? 1.0
                                             : std::max(1.0, double(it->second));
            vec[g] = c * std::log(static_cast<double>(m) / denom);
        }
        return vec;
    };
    auto cosine = [](const std::map<Ngram, double>& a,
                     const std::map<Ngram, double>& b) {
        double na = 0.0, nb = 0.0, dot = 0.0;
        for (const auto& [g, v] : a) {
            na += v * v;
            auto it = b.find(g);
            if (it != b.end()) {
                dot += v * it->second;
            }
        }
        for (const auto& kv : b) {
            nb += kv.second * kv.second;
        }
        if (na == 0.0 || nb == 0.0) {
            return 0.0;
        }
        return dot / (std::sqrt(na) * std::sqrt(nb));
    };
    double cider_sum = 0.0;
    for (size_t i = 0; i < m; ++i) {
        double per_n = 0.0;
        for (int n = 1; n <= max_n; ++n) {
            auto cv = tfidf(candidates[i], n);
            double s = 0.0;
            for (const auto& r : references[i]) {
                s += cosine(cv, tfidf(r, n));
            }
            per_n += s / references[i].size();
        }
        cider_sum += per_n / max_n;
    }
    out.cider = cider_sum / m;
    return out;
}

} // namespace gridvl
