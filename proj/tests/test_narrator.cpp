#include <doctest.h>

#include <cmath>
#include <vector>

#include "gridvl/errors.hpp"
#include "gridvl/narrator.hpp"
#include "gridvl/rng.hpp"
#include "testutil.hpp"

using namespace gridvl;

namespace {

NarratorConfig tiny_config() {
    NarratorConfig cfg;
    cfg.vocab_size = 11;
    cfg.d_t = 8;
    cfg.lm_layers = 4;
    cfg.heads = 2;
    cfg.ff_mult = 1;
    cfg.max_text_len = 8;
    cfg.d_v = 6;
    cfg.num_queries = 3;
    cfg.pool_heads = 2;
    cfg.pool_dim = 4;
    return cfg;
}

Mat random_mat(Rng& rng, int r, int c) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
            m(i, j) = rng.normal();
        }
    }
    return m;
}

Mat manual_layer_norm(const Mat& x, double eps = 1e-5) {
    Mat out(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
        double mu = x.row(i).mean();
        double var = (x.row(i).array() - mu).square().mean();
        out.row(i) = (x.row(i).array() - mu) / std::sqrt(var + eps);
    }
    return out;
}

// Makes untrained logits non-uniform so greedy paths are well defined.
void randomize_output_head(Narrator& n, Rng& rng) {
    for (auto& p : n.params()) {
        if (p.name == "lm.out") {
            p.var->value = random_mat(rng, p.var->value.rows(),
                                      p.var->value.cols());
        }
    }
}

} // namespace

TEST_CASE("pool output row count is fixed regardless of token count") {
    Rng rng(201);
    AttentionPool pool(8, 32, 16, 2, 8, rng);
    Rng data(202);
    Var small = make_constant(random_mat(data, 64, 16));
    Var large = make_constant(random_mat(data, 256, 16));
    Mat a = pool.forward(small)->value;
    Mat b = pool.forward(large)->value;
    CHECK(a.rows() == 8);
    CHECK(a.cols() == 32);
    CHECK(b.rows() == 8);
    CHECK(b.cols() == 32);
    CHECK_THROWS_AS(pool.forward(make_constant(random_mat(data, 10, 7))),
                    ShapeError);
}

TEST_CASE("pool attention rows are stochastic") {
    Rng rng(203);
    AttentionPool pool(4, 12, 10, 3, 4, rng);
    Rng data(204);
    Var visual = make_constant(random_mat(data, 20, 10));
    std::vector<Var> probs;
    pool.forward(visual, &probs);
    REQUIRE(probs.size() == 3);
    for (const auto& p : probs) {
        REQUIRE(p->value.rows() == 4);
        REQUIRE(p->value.cols() == 20);
        for (int i = 0; i < 4; ++i) {
            CHECK(p->value.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(p->value.row(i).minCoeff() >= 0.0);
        }
    }
}

TEST_CASE("single-head pool matches a hand-unrolled computation") {
    Rng rng(205);
    AttentionPool pool(2, 4, 3, 1, 2, rng);
    Rng data(206);
    Mat visual = random_mat(data, 3, 3);
    Mat got = pool.forward(make_constant(visual))->value;

    Mat qn = manual_layer_norm(pool.queries->value);
    Mat vn = manual_layer_norm(visual);
    Mat q = qn * pool.wq[0]->value;    // 2x2
    Mat k = vn * pool.wk->value;       // 3x2
    Mat v = vn * pool.wv->value;       // 3x2
    Mat s = (q * k.transpose()) / std::sqrt(2.0);
    Mat p(2, 3);
    for (int i = 0; i < 2; ++i) {
        Vec row = s.row(i);
        Vec ex = (row.array() - row.maxCoeff()).exp();
        p.row(i) = ex.transpose() / ex.sum();
    }
    Mat expect = (p * v) * pool.wo->value;
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("fd: pool gradients") {
    Rng rng(207);
    AttentionPool pool(2, 4, 3, 2, 2, rng);
    Rng data(208);
    Var visual = make_param(random_mat(data, 4, 3));
    Var w = make_constant(random_mat(data, 2, 4));
    std::vector<Var> leaves = {visual, pool.queries, pool.wq[0], pool.wk,
                               pool.wv, pool.wo};
    double err = testutil::max_fd_rel_err(leaves, [&] {
        return sum_all(hadamard(pool.forward(visual), w));
    });
    CHECK(err < 1e-6);
}

TEST_CASE("zero gates make the conditioned model the frozen model exactly") {
    NarratorConfig cfg = tiny_config();
    Rng rng(211);
    Narrator n(cfg, rng);
    randomize_output_head(n, rng);
    Rng data(212);
    std::vector<int> prefix = {cfg.bos_id, 3, 5, 7};
    Mat base = n.lm_logits(prefix)->value;
    for (int trial = 0; trial < 3; ++trial) {
        Var pooled =
            n.attention_pool(make_constant(random_mat(data, 10, cfg.d_v)));
        Mat cond = n.conditioned_logits(pooled, prefix)->value;
        CHECK((cond - base).cwiseAbs().maxCoeff() < 1e-5);
        CHECK(cond == base); // gate at zero contributes exact zeros
    }
}

TEST_CASE("next token distribution is proper and validates the prefix") {
    NarratorConfig cfg = tiny_config();
    Rng rng(213);
    Narrator n(cfg, rng);
    Rng data(214);
    Var pooled = n.attention_pool(make_constant(random_mat(data, 6, cfg.d_v)));
    Vec dist = n.next_token_distribution(pooled, {cfg.bos_id, 4});
    CHECK(dist.size() == cfg.vocab_size);
    CHECK(dist.minCoeff() >= 0.0);
    CHECK(dist.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(n.next_token_distribution(pooled, {}), DomainError);
    CHECK_THROWS_AS(n.next_token_distribution(pooled, {4, 5}), DomainError);
    CHECK_THROWS_AS(n.next_token_distribution(pooled, {cfg.bos_id, 99}),
                    VocabError);
}

TEST_CASE("future tokens do not reach earlier logits") {
    NarratorConfig cfg = tiny_config();
    Rng rng(215);
    Narrator n(cfg, rng);
    randomize_output_head(n, rng);
    Rng data(216);
    Var pooled = n.attention_pool(make_constant(random_mat(data, 8, cfg.d_v)));
    std::vector<int> a = {cfg.bos_id, 3, 4, 5};
    std::vector<int> b = {cfg.bos_id, 3, 4, 9};
    Mat la = n.conditioned_logits(pooled, a)->value;
    Mat lb = n.conditioned_logits(pooled, b)->value;
    CHECK(la.topRows(3) == lb.topRows(3));
    CHECK((la.row(3) - lb.row(3)).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("untrained captioning loss is exactly uniform cross entropy") {
    NarratorConfig cfg = tiny_config();
    Rng rng(217);
    Narrator n(cfg, rng);
    Rng data(218);
    Mat feats = random_mat(data, 12, cfg.d_v);
    std::vector<int> target = {3, 4, 5, 6, 2, cfg.eos_id};
    double loss = n.captioning_loss(feats, target)->value(0, 0);
    CHECK(std::abs(loss - 6.0 * std::log(11.0)) < 1e-10);
    CHECK_THROWS_AS(n.captioning_loss(feats, {}), DomainError);
    CHECK_THROWS_AS(n.captioning_loss(feats, {3, 99}), VocabError);
    CHECK_THROWS_AS(
        n.captioning_loss(feats, std::vector<int>(cfg.max_text_len + 2, 3)),
        DomainError);
}

TEST_CASE("frozen language model receives no gradient") {
    NarratorConfig cfg = tiny_config();
    Rng rng(219);
    Narrator n(cfg, rng);
    randomize_output_head(n, rng); // zero head would block all gradient
    n.freeze_lm();
    CHECK(n.lm_frozen());
    Rng data(220);
    Mat feats = random_mat(data, 10, cfg.d_v);
    Var loss = n.captioning_loss(feats, {3, 4, cfg.eos_id});
    for (auto& p : n.params()) {
        p.var->zero_grad();
    }
    backward(loss);
    for (const auto& p : n.lm_params()) {
        CHECK(p.var->grad.size() == 0);
    }
    // with gates at zero only the gates themselves see gradient
    double gate_norm = 0.0;
    for (const auto& p : n.adapter_params()) {
        if (p.name.find("gate") != std::string::npos) {
            gate_norm += p.var->grad_or_zero().norm();
        }
    }
    CHECK(gate_norm > 1e-10);
}

TEST_CASE("opened gates let gradient reach the pool") {
    NarratorConfig cfg = tiny_config();
    Rng rng(221);
    Narrator n(cfg, rng);
    randomize_output_head(n, rng);
    n.freeze_lm();
    for (auto& block : n.cross_blocks()) {
        block.gate_attn->value(0, 0) = 0.5;
        block.gate_ffn->value(0, 0) = 0.25;
    }
    Rng data(222);
    Mat feats = random_mat(data, 10, cfg.d_v);
    Var loss = n.captioning_loss(feats, {3, 4, cfg.eos_id});
    for (auto& p : n.params()) {
        p.var->zero_grad();
    }
    backward(loss);
    double pool_norm = 0.0;
    for (const auto& p : n.adapter_params()) {
        if (p.name.rfind("pool.", 0) == 0) {
            pool_norm += p.var->grad_or_zero().norm();
        }
    }
    CHECK(pool_norm > 1e-10);
    for (const auto& p : n.lm_params()) {
        CHECK(p.var->grad.size() == 0);
    }
}

TEST_CASE("fd: gate scalars and pool weights under the captioning loss") {
    NarratorConfig cfg = tiny_config();
    cfg.lm_layers = 2;
    cfg.d_t = 6;
    cfg.heads = 2;
    Rng rng(223);
    Narrator n(cfg, rng);
    randomize_output_head(n, rng);
    n.freeze_lm();
    for (auto& block : n.cross_blocks()) {
        block.gate_attn->value(0, 0) = 0.3;
        block.gate_ffn->value(0, 0) = -0.2;
    }
    Rng data(224);
    Mat feats = random_mat(data, 5, cfg.d_v);
    std::vector<int> target = {3, 4, cfg.eos_id};
    std::vector<Var> leaves;
    for (const auto& p : n.adapter_params()) {
        if (p.name.find("gate") != std::string::npos ||
            p.name == "pool.queries" || p.name == "pool.wk") {
            leaves.push_back(p.var);
        }
    }
    REQUIRE(leaves.size() == 4); // one cross block: 2 gates + 2 pool mats
    double err = testutil::max_fd_rel_err(
        leaves, [&] { return n.captioning_loss(feats, target); });
    CHECK(err < 1e-5);
}

TEST_CASE("narration is reproducible and respects decoding strategy") {
    NarratorConfig cfg = tiny_config();
    Rng rng(225);
    Narrator n(cfg, rng);
    randomize_output_head(n, rng);
    Rng data(226);
    Mat feats = random_mat(data, 8, cfg.d_v);

    DecodingConfig dcfg;
    dcfg.strategy = DecodeStrategy::Nucleus;
    dcfg.p = 0.9;
    dcfg.num_candidates = 10;
    dcfg.max_len = 6;
    Rng s1(77), s2(77), s3(78);
    auto a = n.narrate(feats, dcfg, s1);
    auto b = n.narrate(feats, dcfg, s2);
    auto c = n.narrate(feats, dcfg, s3);
    CHECK(a.size() == 10);
    CHECK(a == b);
    CHECK(a != c);
    for (const auto& seq : a) {
        CHECK(seq.size() <= 6);
        for (int tok : seq) {
            CHECK(tok != cfg.eos_id);
        }
    }

    // vanishing p keeps only the argmax: every sample is the greedy body
    DecodingConfig greedy;
    greedy.strategy = DecodeStrategy::Greedy;
    greedy.max_len = 6;
    Rng g(1);
    auto greedy_out = n.narrate(feats, greedy, g);
    REQUIRE(greedy_out.size() == 1);
    DecodingConfig low = dcfg;
    low.p = 1e-9;
    Rng s4(79);
    for (const auto& seq : n.narrate(feats, low, s4)) {
        CHECK(seq == greedy_out[0]);
    }

    DecodingConfig beam;
    beam.strategy = DecodeStrategy::Beam;
    beam.beam_width = 8;
    beam.num_candidates = 5;
    beam.max_len = 5;
    Rng bs(2);
    auto beam_out = n.narrate(feats, beam, bs);
    CHECK(beam_out.size() == 5);

    // a single-beam search walks the greedy path
    DecodingConfig beam1 = beam;
    beam1.beam_width = 1;
    beam1.num_candidates = 1;
    beam1.max_len = 6;
    Rng bs1(4);
    auto one = n.narrate(feats, beam1, bs1);
    REQUIRE(one.size() == 1);
    CHECK(one[0] == greedy_out[0]);

    DecodingConfig dbs;
    dbs.strategy = DecodeStrategy::DiverseBeam;
    dbs.beam_width = 6;
    dbs.groups = 6;
    dbs.diversity_penalty = 0.7;
    dbs.num_candidates = 4;
    dbs.max_len = 5;
    Rng ds(3);
    auto dbs_out = n.narrate(feats, dbs, ds);
    CHECK(dbs_out.size() == 4);
}

TEST_CASE("visual conditioning reaches the distribution once gates open") {
    NarratorConfig cfg = tiny_config();
    Rng rng(227);
    Narrator n(cfg, rng);
    randomize_output_head(n, rng);
    for (auto& block : n.cross_blocks()) {
        block.gate_attn->value(0, 0) = 1.0;
    }
    Rng data(228);
    Var pa = n.attention_pool(make_constant(random_mat(data, 8, cfg.d_v)));
    Var pb = n.attention_pool(make_constant(random_mat(data, 8, cfg.d_v)));
    Vec da = n.next_token_distribution(pa, {cfg.bos_id, 3});
    Vec db = n.next_token_distribution(pb, {cfg.bos_id, 3});
    CHECK(0.5 * (da - db).cwiseAbs().sum() > 1e-8);
}

TEST_CASE("frozen hash tracks only language model parameters") {
    NarratorConfig cfg = tiny_config();
    Rng rng(229);
    Narrator n(cfg, rng);
    randomize_output_head(n, rng);
    n.freeze_lm();
    uint64_t before = n.lm_hash();

    Rng data(230);
    Mat feats = random_mat(data, 10, cfg.d_v);
    Adam opt(n.adapter_params(), 1e-2);
    for (int step = 0; step < 5; ++step) {
        opt.zero_grad();
        Var loss = n.captioning_loss(feats, {3, 4, 5, cfg.eos_id});
        backward(loss);
        opt.step();
    }
    CHECK(n.lm_hash() == before);

    for (auto& p : n.params()) {
        if (p.name == "lm.block0.ff_in.w") {
            p.var->value(0, 0) += 1.0;
        }
    }
    CHECK(n.lm_hash() != before);
}

TEST_CASE("candidate filtering keeps thresholded or top scoring narrations") {
    DualEncoderConfig ecfg;
    ecfg.grid_size = 4;
    ecfg.channels = 7;
    ecfg.frames_per_clip = 2;
    ecfg.d_v = 8;
    ecfg.d_t = 8;
    ecfg.d = 4;
    ecfg.video_layers = 1;
    ecfg.text_layers = 1;
    ecfg.heads = 2;
    ecfg.ff_mult = 1;
    ecfg.max_text_len = 6;
    ecfg.vocab_size = 12;
    Rng rng(231);
    DualEncoder enc(ecfg, rng);
    Rng data(232);
    ClipFrames frames(2);
    for (auto& f : frames) {
        f.resize(7 * 4 * 4);
        for (auto& b : f) {
            b = data.uniform() < 0.3 ? 1 : 0;
        }
    }
    std::vector<std::vector<int>> cands = {{3, 4, 5}, {6, 7}, {8, 9, 10, 3}};

    Mat v = enc.encode_video(frames).embedding->value;
    std::vector<double> expect;
    for (const auto& c : cands) {
        Mat u = enc.encode_text(c)->value;
        expect.push_back(v.row(0).dot(u.row(0)));
    }

    CandidateFilter all_k{FilterMode::TopK, 0.5, 10};
    auto kept = filter_candidates(enc, frames, cands, all_k);
    REQUIRE(kept.size() == 3);
    CHECK(kept[0].score >= kept[1].score);
    CHECK(kept[1].score >= kept[2].score);

    CandidateFilter top1{FilterMode::TopK, 0.5, 1};
    auto best = filter_candidates(enc, frames, cands, top1);
    REQUIRE(best.size() == 1);
    CHECK(best[0].score ==
          doctest::Approx(*std::max_element(expect.begin(), expect.end()))
              .epsilon(1e-12));

    CandidateFilter impossible{FilterMode::Threshold, 2.0, 10};
    CHECK(filter_candidates(enc, frames, cands, impossible).empty());

    CandidateFilter permissive{FilterMode::Threshold, -2.0, 10};
    CHECK(filter_candidates(enc, frames, cands, permissive).size() == 3);
}

TEST_CASE("narrator config validation") {
    NarratorConfig cfg = tiny_config();
    cfg.heads = 3; // does not divide d_t = 8
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.insertion_period = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.vocab_size = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    CHECK(cfg.cross_blocks() == 2);
    cfg.lm_layers = 5;
    CHECK(cfg.cross_blocks() == 3);
}
