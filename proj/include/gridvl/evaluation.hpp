#pragma once

#include <string>
#include <utility>
#include <vector>

#include "gridvl/encoder.hpp"

namespace gridvl {

// Ranking with deterministic ties: descending score, ascending index.
std::vector<int> ranked_indices(const Vec& scores);

struct DirectionalMetric {
    double v2t = 0.0;
    double t2v = 0.0;
    double average = 0.0;
    int excluded_v2t = 0; // queries without any positive
    int excluded_t2v = 0;
};

// Mean average precision over both retrieval directions. Queries with no
// positive are excluded from the mean and counted.
DirectionalMetric retrieval_map(const Mat& s, const Eigen::MatrixXi& relevance);

// nDCG with log2(rank + 1) discount over both directions. Graded relevance;
// an all-zero query row scores 0 and stays in the mean.
DirectionalMetric retrieval_ndcg(const Mat& s, const Mat& relevance);

struct MCQItem {
    ClipFrames frames;
    std::vector<std::vector<int>> candidates; // exactly five
    int correct = 0;
    bool intra_video = false;
};

struct MCQResult {
    double inter_accuracy = 0.0;
    double intra_accuracy = 0.0;
    int inter_count = 0;
    int intra_count = 0;
};

// Five-way multiple choice by similarity argmax, ties to the lowest index.
MCQResult mcq_accuracy(const DualEncoder& encoder,
                       const std::vector<MCQItem>& items);

// Argmax over class prompt similarities, ties to the lowest index.
int zero_shot_classify(const DualEncoder& encoder, const ClipFrames& frames,
                       const std::vector<std::vector<int>>& class_prompts);

struct ProbeResult {
    double best_accuracy = 0.0;
    double best_c = 0.0;
    std::vector<std::pair<double, double>> sweep; // (C, accuracy)
};

// Decade grid 1e-5 .. 1e4.
std::vector<double> probe_c_sweep();

// One-vs-rest linear SVM (squared hinge) per regularization value; reports
// the best held-out top-1 accuracy. Deterministic: zero init, full-batch.
ProbeResult linear_probe(const Mat& train_x, const std::vector<int>& train_y,
                         const Mat& test_x, const std::vector<int>& test_y,
                         const std::vector<double>& c_values = probe_c_sweep());

struct CaptionScores {
    double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
    double rouge_l = 0.0;
    double cider = 0.0;
};

// Corpus-level BLEU with brevity penalty, ROUGE-L (LCS F, beta 1.2, max over
// references), and plain-cosine CIDEr with corpus IDF over n = 1..4.
CaptionScores caption_metrics(
    const std::vector<std::vector<std::string>>& candidates,
    const std::vector<std::vector<std::vector<std::string>>>& references);

} // namespace gridvl
