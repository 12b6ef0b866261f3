#include <doctest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <vector>

#include "gridvl/decoding.hpp"
#include "gridvl/errors.hpp"
#include "gridvl/rng.hpp"

using namespace gridvl;

namespace {

Vec dist3(double a, double b, double c) {
    Vec v(3);
    v << a, b, c;
    return v;
}

// Deterministic pseudo-random distribution per prefix: every entry positive.
StepFn random_table(int vocab, uint64_t salt) {
    return [vocab, salt](const std::vector<int>& prefix) {
        uint64_t h = fnv1a(&salt, sizeof(salt), 1469598103934665603ULL);
        for (int t : prefix) {
            h = fnv1a(&t, sizeof(t), h);
        }
        Rng r(h);
        Vec v(vocab);
        for (int i = 0; i < vocab; ++i) {
            v(i) = 0.05 + r.uniform();
        }
        return Vec(v / v.sum());
    };
}

StepFn constant_table(const Vec& dist) {
    return [dist](const std::vector<int>&) { return dist; };
}

// Exhaustive enumeration of every complete sequence: EOS-terminated bodies of
// length < max_len (EOS log-prob counted) plus all bodies of exactly max_len.
void enumerate_all(const StepFn& step, int bos, int eos, int max_len,
                   std::vector<int>& body, double logp,
                   std::vector<ScoredSequence>& out) {
    if (static_cast<int>(body.size()) == max_len) {
        out.push_back({body, logp, 0});
        return;
    }
    std::vector<int> prefix = {bos};
    prefix.insert(prefix.end(), body.begin(), body.end());
    Vec dist = step(prefix);
    for (int v = 0; v < dist.size(); ++v) {
        if (dist(v) <= 0.0) {
            continue;
        }
        if (v == eos) {
            out.push_back({body, logp + std::log(dist(v)), 0});
        } else {
            body.push_back(v);
            enumerate_all(step, bos, eos, max_len, body,
                          logp + std::log(dist(v)), out);
            body.pop_back();
        }
    }
}

std::vector<ScoredSequence> exhaustive_ranked(const StepFn& step, int bos,
                                              int eos, int max_len) {
    std::vector<ScoredSequence> all;
    std::vector<int> body;
    enumerate_all(step, bos, eos, max_len, body, 0.0, all);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.log_prob != b.log_prob) {
            return a.log_prob > b.log_prob;
        }
        return a.tokens < b.tokens;
    });
    return all;
}

} // namespace

TEST_CASE("nucleus frequencies match the renormalized prefix within 3 sigma") {
    Vec d = dist3(0.5, 0.3, 0.2);
    Rng rng(101);
    const int n = 100000;
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < n; ++i) {
        ++counts[nucleus_step(d, 0.7, rng)];
    }
    CHECK(counts[2] == 0);
    double f0 = static_cast<double>(counts[0]) / n;
    double sigma = std::sqrt(0.625 * 0.375 / n);
    CHECK(std::abs(f0 - 0.625) < 3.0 * sigma);
}

TEST_CASE("nucleus with p=1 samples the full distribution") {
    Vec d = dist3(0.5, 0.3, 0.2);
    Rng rng(103);
    const int n = 60000;
    int counts[3] = {0, 0, 0};
    for (int i = 0; i < n; ++i) {
        ++counts[nucleus_step(d, 1.0, rng)];
    }
    for (int k = 0; k < 3; ++k) {
        double f = static_cast<double>(counts[k]) / n;
        double sigma = std::sqrt(d(k) * (1 - d(k)) / n);
        CHECK(std::abs(f - d(k)) < 3.0 * sigma);
    }
}

TEST_CASE("tiny p degenerates to argmax") {
    Vec d = dist3(0.5, 0.3, 0.2);
    Rng rng(107);
    for (int i = 0; i < 1000; ++i) {
        CHECK(nucleus_step(d, 0.01, rng) == 0);
    }
}

TEST_CASE("nucleus ties break by ascending token id") {
    // Sorted order is token2 (0.4), then token0 before token1 on the 0.3 tie;
    // mass 0.7 is reached after token0, so token1 stays outside.
    Vec d = dist3(0.3, 0.3, 0.4);
    Rng rng(109);
    for (int i = 0; i < 20000; ++i) {
        CHECK(nucleus_step(d, 0.7, rng) != 1);
    }
    // Equal halves with p=0.5: the nucleus is exactly {token0}.
    Vec half(2);
    half << 0.5, 0.5;
    for (int i = 0; i < 1000; ++i) {
        CHECK(nucleus_step(half, 0.5, rng) == 0);
    }
}

TEST_CASE("nucleus input validation") {
    Vec d = dist3(0.5, 0.3, 0.2);
    Rng rng(113);
    CHECK_THROWS_AS(nucleus_step(d, 0.0, rng), DomainError);
    CHECK_THROWS_AS(nucleus_step(d, 1.2, rng), DomainError);
    CHECK_THROWS_AS(nucleus_step(dist3(0.3, 0.1, 0.1), 0.5, rng), DomainError);
    CHECK_THROWS_AS(nucleus_step(dist3(1.2, -0.1, -0.1), 0.5, rng),
                    DomainError);
}

TEST_CASE("greedy step breaks ties low") {
    CHECK(greedy_step(dist3(0.2, 0.4, 0.4)) == 1);
    CHECK(greedy_step(dist3(0.4, 0.4, 0.2)) == 0);
}

TEST_CASE("sampled sequences stop at eos and reproduce under one seed") {
    const int bos = 9, eos = 2;
    auto always_eos = constant_table(dist3(0.0, 0.0, 1.0));
    Rng rng(127);
    CHECK(sample_sequence(always_eos, bos, eos, 0.95, 8, rng).empty());

    auto table = random_table(3, 555);
    Rng a(31), b(31), c(32);
    std::vector<std::vector<int>> sa, sb, sc;
    for (int i = 0; i < 20; ++i) {
        sa.push_back(sample_sequence(table, bos, eos, 0.9, 6, a));
        sb.push_back(sample_sequence(table, bos, eos, 0.9, 6, b));
        sc.push_back(sample_sequence(table, bos, eos, 0.9, 6, c));
    }
    CHECK(sa == sb);
    CHECK(sa != sc);
}

TEST_CASE("sequence sampling matches exhaustive enumeration within 3 sigma") {
    const int bos = 9, eos = 2, max_len = 3;
    auto table = random_table(3, 777);
    auto all = exhaustive_ranked(table, bos, eos, max_len);
    std::map<std::vector<int>, double> exact;
    for (const auto& s : all) {
        exact[s.tokens] += std::exp(s.log_prob);
    }
    double total = 0.0;
    for (const auto& [k, v] : exact) {
        total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));

    const int n = 30000;
    Rng rng(131);
    std::map<std::vector<int>, int> counts;
    for (int i = 0; i < n; ++i) {
        ++counts[sample_sequence(table, bos, eos, 1.0, max_len, rng)];
    }
    for (const auto& [seq, prob] : exact) {
        double f = static_cast<double>(counts[seq]) / n;
        double sigma = std::sqrt(prob * (1 - prob) / n);
        CHECK(std::abs(f - prob) <= 3.0 * sigma + 1e-12);
    }
}

TEST_CASE("beam width 1 follows the greedy path") {
    const int bos = 9, eos = 3;
    auto table = random_table(4, 999);
    std::vector<int> greedy_body;
    std::vector<int> prefix = {bos};
    for (int t = 0; t < 5; ++t) {
        int tok = greedy_step(table(prefix));
        if (tok == eos) {
            break;
        }
        greedy_body.push_back(tok);
        prefix.push_back(tok);
    }
    auto beams = beam_search(table, bos, eos, 1, 5);
    REQUIRE(beams.size() == 1);
    CHECK(beams[0].tokens == greedy_body);
}

TEST_CASE("wide beam equals exhaustive search exactly") {
    const int bos = 9, eos = 3, max_len = 4;
    auto table = random_table(4, 1234);
    auto exact = exhaustive_ranked(table, bos, eos, max_len);
    // 121 complete sequences exist; width 256 forbids any pruning.
    auto beams = beam_search(table, bos, eos, 256, max_len);
    REQUIRE(beams.size() == exact.size());
    for (size_t i = 0; i < exact.size(); ++i) {
        CHECK(beams[i].tokens == exact[i].tokens);
        CHECK(beams[i].log_prob ==
              doctest::Approx(exact[i].log_prob).epsilon(1e-12));
    }
}

TEST_CASE("narrow beam matches exhaustive top-2 on a peaked table") {
    const int bos = 9, eos = 3, max_len = 4;
    Vec d(4);
    d << 0.9, 0.06, 0.02, 0.02;
    auto table = constant_table(d);
    auto exact = exhaustive_ranked(table, bos, eos, max_len);
    auto beams = beam_search(table, bos, eos, 2, max_len);
    REQUIRE(beams.size() == 2);
    CHECK(beams[0].tokens == exact[0].tokens);
    CHECK(beams[1].tokens == exact[1].tokens);
    CHECK(beams[0].tokens == std::vector<int>{0, 0, 0, 0});
    CHECK(beams[1].tokens == std::vector<int>{0, 0, 0, 1});
}

TEST_CASE("diverse beam with one group and zero penalty is beam search") {
    const int bos = 9, eos = 3;
    auto table = random_table(4, 4321);
    auto plain = beam_search(table, bos, eos, 3, 5);
    auto diverse = diverse_beam_search(table, bos, eos, 3, 1, 0.0, 5);
    REQUIRE(plain.size() == diverse.size());
    for (size_t i = 0; i < plain.size(); ++i) {
        CHECK(plain[i].tokens == diverse[i].tokens);
        CHECK(plain[i].log_prob == diverse[i].log_prob);
        CHECK(diverse[i].group == 0);
    }
}

TEST_CASE("diversity penalty pushes later groups off the shared first token") {
    // Peaked two-way split: without the penalty both groups open with token
    // 0; a penalty of 10 exceeds the logit gap, so group 1 must open with 1.
    Vec d = dist3(0.55, 0.43, 0.02);
    auto table = constant_table(d);
    auto out = diverse_beam_search(table, 9, 2, 2, 2, 10.0, 3);
    REQUIRE(out.size() == 2);
    CHECK(out[0].group == 0);
    CHECK(out[1].group == 1);
    REQUIRE(!out[0].tokens.empty());
    REQUIRE(!out[1].tokens.empty());
    CHECK(out[0].tokens[0] == 0);
    CHECK(out[1].tokens[0] == 1);

    // With zero penalty every group collapses onto the same greedy beam.
    auto same = diverse_beam_search(table, 9, 2, 2, 2, 0.0, 3);
    CHECK(same[0].tokens == same[1].tokens);
}

TEST_CASE("three groups with heavy penalty open on three distinct tokens") {
    Vec d(4);
    d << 0.5, 0.3, 0.18, 0.02;
    auto table = constant_table(d);
    auto out = diverse_beam_search(table, 9, 3, 3, 3, 10.0, 4);
    REQUIRE(out.size() == 3);
    CHECK(out[0].tokens[0] == 0);
    CHECK(out[1].tokens[0] == 1);
    CHECK(out[2].tokens[0] == 2);
}

TEST_CASE("decoding config validation") {
    DecodingConfig cfg;
    cfg.validate();
    cfg.p = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DecodingConfig{};
    cfg.strategy = DecodeStrategy::DiverseBeam;
    cfg.groups = 3; // beam_width 20 not divisible
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.strategy = DecodeStrategy::Beam; // groups unused by plain beam
    cfg.validate();
    cfg = DecodingConfig{};
    cfg.diversity_penalty = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS(diverse_beam_search(constant_table(dist3(1, 0, 0)), 9, 2,
                                        4, 3, 0.5, 4),
                    ConfigError);
}

TEST_CASE("strategy names round trip") {
    for (auto s : {DecodeStrategy::Greedy, DecodeStrategy::Nucleus,
                   DecodeStrategy::Beam, DecodeStrategy::DiverseBeam}) {
        CHECK(decode_strategy_from_string(to_string(s)) == s);
    }
    CHECK_THROWS_AS(decode_strategy_from_string("magic"), ConfigError);
}
