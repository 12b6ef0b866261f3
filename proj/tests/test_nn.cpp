#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "gridvl/nn.hpp"
#include "gridvl/rng.hpp"
#include "testutil.hpp"

using namespace gridvl;
using gridvl::testutil::max_fd_rel_err;

TEST_CASE("attention probabilities are row-stochastic and causal under mask") {
    Rng rng(3001);
    const int n = 5, d = 8;
    MultiHeadAttention mha(d, d, d, 2, 4, rng);
    auto x = make_constant(randn_mat(rng, n, d, 1.0));
    Mat mask = causal_mask(n);
    std::vector<Var> probs;
    mha.forward(x, x, &mask, &probs);
    REQUIRE(probs.size() == 2);
    for (const auto& p : probs) {
        for (int i = 0; i < n; ++i) {
            CHECK(std::abs(p->value.row(i).sum() - 1.0) < 1e-12);
            for (int j = i + 1; j < n; ++j) {
                CHECK(p->value(i, j) < 1e-12);
            }
        }
    }
}

TEST_CASE("cross attention accepts a different key/value width") {
    Rng rng(3002);
    MultiHeadAttention mha(6, 10, 6, 2, 3, rng);
    auto q = make_constant(randn_mat(rng, 4, 6, 1.0));
    auto kv = make_constant(randn_mat(rng, 7, 10, 1.0));
    Var out = mha.forward(q, kv);
    CHECK(out->rows() == 4);
    CHECK(out->cols() == 6);
}

TEST_CASE("fd: transformer block end to end") {
    Rng rng(3003);
    const int n = 3, d = 8;
    TransformerBlock block(d, 2, 12, rng);
    auto x = make_param(randn_mat(rng, n, d, 0.8));
    Mat w = randn_mat(rng, n, d, 1.0);
    Mat mask = causal_mask(n);
    ParamList params;
    block.collect("block", params);
    std::vector<Var> vars = {x};
    for (const auto& np : params) {
        vars.push_back(np.var);
    }
    auto loss = [&] {
        return sum_all(hadamard(block.forward(x, &mask), make_constant(w)));
    };
    CHECK(max_fd_rel_err(vars, loss) < 1e-6);
}

TEST_CASE("collected parameter names are unique and stable") {
    Rng rng(3004);
    TransformerBlock block(8, 2, 16, rng);
    ParamList params;
    block.collect("enc.block0", params);
    std::set<std::string> names;
    for (const auto& np : params) {
        CHECK(np.name.rfind("enc.block0.", 0) == 0);
        names.insert(np.name);
    }
    CHECK(names.size() == params.size());
    // ln_attn (2) + attn (2 heads x 3 + wo + bo = 8) + ln_ffn (2) + 2 dense (4)
    CHECK(params.size() == 16);
}

TEST_CASE("adam drives a quadratic to its target deterministically") {
    auto run = [] {
        Rng rng(3005);
        auto w = make_param(randn_mat(rng, 3, 3, 1.0));
        Mat target = randn_mat(rng, 3, 3, 1.0);
        Adam opt({{"w", w}}, 0.05);
        double last = 0.0;
        for (int step = 0; step < 400; ++step) {
            opt.zero_grad();
            Var diff = sub(w, make_constant(target));
            Var loss = sum_all(hadamard(diff, diff));
            backward(loss);
            opt.step();
            last = loss->scalar();
        }
        return std::pair{last, Mat(w->value)};
    };
    auto [loss1, w1] = run();
    auto [loss2, w2] = run();
    CHECK(loss1 < 1e-6);
    CHECK((w1 - w2).norm() == 0.0);
}

TEST_CASE("adam skips parameters absent from the current graph") {
    auto used = make_param(Mat::Constant(1, 1, 1.0));
    auto unused = make_param(Mat::Constant(1, 1, 5.0));
    Adam opt({{"used", used}, {"unused", unused}}, 0.1);
    opt.zero_grad();
    Var loss = sum_all(hadamard(used, used));
    backward(loss);
    opt.step();
    CHECK(used->value(0, 0) != 1.0);
    CHECK(unused->value(0, 0) == 5.0);
}
