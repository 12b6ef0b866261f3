#include <doctest.h>

#include <cmath>
#include <vector>

#include "gridvl/encoder.hpp"
#include "gridvl/errors.hpp"
#include "gridvl/rng.hpp"
#include "gridvl/worlds.hpp"
#include "testutil.hpp"

using namespace gridvl;

namespace {

DualEncoderConfig tiny_config() {
    DualEncoderConfig cfg;
    cfg.grid_size = 4;
    cfg.channels = 7; // one-shape world: 4 colors + 1 shape + 2 agents
    cfg.patch = 2;
    cfg.frames_per_clip = 2;
    cfg.d_v = 8;
    cfg.d_t = 8;
    cfg.d = 4;
    cfg.video_layers = 1;
    cfg.text_layers = 1;
    cfg.heads = 2;
    cfg.ff_mult = 1;
    cfg.max_text_len = 6;
    cfg.vocab_size = 12;
    return cfg;
}

ClipFrames random_clip(Rng& rng, const DualEncoderConfig& cfg) {
    ClipFrames frames(cfg.frames_per_clip);
    size_t bytes = static_cast<size_t>(cfg.channels) * cfg.grid_size *
                   cfg.grid_size;
    for (auto& f : frames) {
        f.resize(bytes);
        for (auto& b : f) {
            b = rng.uniform() < 0.2 ? 1 : 0;
        }
    }
    return frames;
}

// Literal transcription of the loss: logits z_ij = v_i.u_j / sqrt(tau_i
// tau_j), average of per-row and per-column cross entropies at the diagonal.
double scalar_dual_temperature(const Mat& v, const Mat& u, const Vec& tau) {
    const int n = static_cast<int>(v.rows());
    Mat z(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            z(i, j) = v.row(i).dot(u.row(j)) / std::sqrt(tau(i) * tau(j));
        }
    }
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        double row = 0.0, col = 0.0;
        for (int j = 0; j < n; ++j) {
            row += std::exp(z(i, j));
            col += std::exp(z(j, i));
        }
        total += std::log(row) - z(i, i) + std::log(col) - z(i, i);
    }
    return total / (2.0 * n);
}

Mat random_rows(Rng& rng, int n, int d) {
    Mat m(n, d);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            m(i, j) = rng.normal();
        }
    }
    for (int i = 0; i < n; ++i) {
        m.row(i) /= m.row(i).norm();
    }
    return m;
}

} // namespace

TEST_CASE("patchify lays out patches frame-major and channel-major") {
    DualEncoderConfig cfg = tiny_config();
    Rng rng(11);
    ClipFrames frames = random_clip(rng, cfg);
    Mat x = patchify_frames(frames, cfg);
    const int side = cfg.grid_size / cfg.patch;
    REQUIRE(x.rows() == cfg.frames_per_clip * side * side);
    REQUIRE(x.cols() == cfg.patch_dim());
    for (int t = 0; t < cfg.frames_per_clip; ++t) {
        for (int pr = 0; pr < side; ++pr) {
            for (int pc = 0; pc < side; ++pc) {
                for (int c = 0; c < cfg.channels; ++c) {
                    for (int dr = 0; dr < cfg.patch; ++dr) {
                        for (int dc = 0; dc < cfg.patch; ++dc) {
                            int row = t * side * side + pr * side + pc;
                            int col = c * cfg.patch * cfg.patch +
                                      dr * cfg.patch + dc;
                            size_t src =
                                static_cast<size_t>(c) * cfg.grid_size *
                                    cfg.grid_size +
                                (pr * cfg.patch + dr) * cfg.grid_size +
                                (pc * cfg.patch + dc);
                            CHECK(x(row, col) ==
                                  static_cast<double>(frames[t][src]));
                        }
                    }
                }
            }
        }
    }
    frames.pop_back();
    CHECK_THROWS_AS(patchify_frames(frames, cfg), ShapeError);
}

TEST_CASE("attention masks partition by frame and by patch location") {
    const int t_len = 2, s = 4;
    Mat sm = spatial_attention_mask(t_len, s);
    Mat tm = temporal_attention_mask(t_len, s);
    for (int i = 0; i < t_len * s; ++i) {
        for (int j = 0; j < t_len * s; ++j) {
            CHECK(sm(i, j) == (i / s == j / s ? 0.0 : -1e9));
            CHECK(tm(i, j) == (i % s == j % s ? 0.0 : -1e9));
        }
    }
}

TEST_CASE("video encoding yields unit embeddings and the documented token grid") {
    DualEncoderConfig cfg;
    cfg.channels = 9;
    cfg.vocab_size = 34;
    Rng rng(21);
    DualEncoder enc(cfg, rng);
    Rng data(22);
    ClipFrames clip = random_clip(data, cfg);
    VideoEncoding out = enc.encode_video(clip);
    // grid 8, patch 2, 4 frames: 4 * 4 * 4 rows of width d_v
    CHECK(out.pre_pool->value.rows() == 64);
    CHECK(out.pre_pool->value.cols() == cfg.d_v);
    CHECK(out.embedding->value.rows() == 1);
    CHECK(out.embedding->value.cols() == cfg.d);
    CHECK(out.embedding->value.row(0).norm() == doctest::Approx(1.0).epsilon(1e-6));

    VideoEncoding again = enc.encode_video(clip);
    CHECK(out.embedding->value == again.embedding->value);
}

TEST_CASE("video batch stacks per-clip embeddings in order") {
    DualEncoderConfig cfg = tiny_config();
    Rng rng(31);
    DualEncoder enc(cfg, rng);
    Rng data(32);
    std::vector<ClipFrames> clips;
    for (int i = 0; i < 3; ++i) {
        clips.push_back(random_clip(data, cfg));
    }
    Mat batch = enc.encode_video_batch(clips)->value;
    REQUIRE(batch.rows() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(batch.row(i) == enc.encode_video(clips[i]).embedding->value.row(0));
    }
    std::swap(clips[0], clips[2]);
    Mat swapped = enc.encode_video_batch(clips)->value;
    CHECK(swapped.row(0) == batch.row(2));
    CHECK(swapped.row(2) == batch.row(0));
}

TEST_CASE("text encoding pools at the end marker and truncates long input") {
    DualEncoderConfig cfg = tiny_config();
    Rng rng(41);
    DualEncoder enc(cfg, rng);

    std::vector<int> tokens = {3, 4, 5, 6};
    Mat u = enc.encode_text(tokens)->value;
    CHECK(u.rows() == 1);
    CHECK(u.cols() == cfg.d);
    CHECK(u.row(0).norm() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(enc.encode_text(tokens)->value == u);

    // 100 tokens reduce to the first max_text_len of them
    std::vector<int> longseq(100);
    for (size_t i = 0; i < longseq.size(); ++i) {
        longseq[i] = 2 + static_cast<int>(i % 9);
    }
    std::vector<int> prefix(longseq.begin(),
                            longseq.begin() + cfg.max_text_len);
    CHECK(enc.encode_text(longseq)->value == enc.encode_text(prefix)->value);

    CHECK(enc.encode_text({})->value.row(0).norm() ==
          doctest::Approx(1.0).epsilon(1e-6));
    CHECK_THROWS_AS(enc.encode_text({3, 99}), VocabError);
    CHECK_THROWS_AS(enc.encode_text({-1}), VocabError);
}

TEST_CASE("text embedding depends on token order and content") {
    DualEncoderConfig cfg = tiny_config();
    Rng rng(43);
    DualEncoder enc(cfg, rng);
    Mat a = enc.encode_text({3, 4, 5})->value;
    Mat b = enc.encode_text({5, 4, 3})->value;
    Mat c = enc.encode_text({3, 4, 6})->value;
    CHECK((a - b).norm() > 1e-8);
    CHECK((a - c).norm() > 1e-8);
}

TEST_CASE("similarity matrix matches double-loop dot products") {
    Rng rng(51);
    Mat v = random_rows(rng, 5, 8);
    Mat u = random_rows(rng, 5, 8);
    Mat s = similarity_matrix(v, u);
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 5; ++j) {
            double dot = 0.0;
            for (int k = 0; k < 8; ++k) {
                dot += v(i, k) * u(j, k);
            }
            CHECK(std::abs(s(i, j) - dot) < 1e-12);
            CHECK(s(i, j) >= -1.0 - 1e-12);
            CHECK(s(i, j) <= 1.0 + 1e-12);
        }
    }
    Mat id = similarity_matrix(Mat::Identity(3, 3), Mat::Identity(3, 3));
    CHECK(id == Mat::Identity(3, 3));
    Mat neg = similarity_matrix(v, Mat(-v));
    for (int i = 0; i < 5; ++i) {
        CHECK(neg(i, i) == doctest::Approx(-1.0).epsilon(1e-12));
    }
    CHECK_THROWS_AS(similarity_matrix(Mat::Zero(2, 3), Mat::Zero(2, 4)),
                    ShapeError);
}

TEST_CASE("dual temperature loss identities") {
    Rng rng(61);

    // lone pair: softmax over one entry is certain
    Var v1 = make_constant(random_rows(rng, 1, 4));
    Var u1 = make_constant(random_rows(rng, 1, 4));
    Vec tau1 = Vec::Constant(1, 0.07);
    CHECK(dual_temperature_loss(v1, u1, tau1)->value(0, 0) == 0.0);

    // identical rows: uniform softmax in both directions
    Mat row = random_rows(rng, 1, 6);
    Mat rep(9, 6);
    for (int i = 0; i < 9; ++i) {
        rep.row(i) = row.row(0);
    }
    Vec tau9 = Vec::Constant(9, 0.07);
    double loss =
        dual_temperature_loss(make_constant(rep), make_constant(rep), tau9)
            ->value(0, 0);
    CHECK(loss == doctest::Approx(std::log(9.0)).epsilon(1e-12));
}

TEST_CASE("dual temperature loss matches the scalar reference") {
    Rng rng(63);
    Mat v = random_rows(rng, 4, 6);
    Mat u = random_rows(rng, 4, 6);
    Vec tau(4);
    tau << 0.07, 0.1, 0.07, 0.1;
    double got =
        dual_temperature_loss(make_constant(v), make_constant(u), tau)
            ->value(0, 0);
    CHECK(std::abs(got - scalar_dual_temperature(v, u, tau)) < 1e-10);
}

TEST_CASE("equal temperatures collapse to symmetric InfoNCE") {
    Rng rng(65);
    Mat v = random_rows(rng, 6, 5);
    Mat u = random_rows(rng, 6, 5);
    for (double c : {0.07, 0.5, 1.0}) {
        Vec tau = Vec::Constant(6, c);
        double got =
            dual_temperature_loss(make_constant(v), make_constant(u), tau)
                ->value(0, 0);
        // plain InfoNCE both ways at temperature c
        Mat z = (v * u.transpose()) / c;
        double ref = 0.0;
        for (int i = 0; i < 6; ++i) {
            double row = 0.0, col = 0.0;
            for (int j = 0; j < 6; ++j) {
                row += std::exp(z(i, j));
                col += std::exp(z(j, i));
            }
            ref += std::log(row) + std::log(col) - 2.0 * z(i, i);
        }
        ref /= 12.0;
        CHECK(std::abs(got - ref) < 1e-10);
    }
}

TEST_CASE("dual temperature loss is permutation invariant") {
    Rng rng(67);
    Mat v = random_rows(rng, 5, 4);
    Mat u = random_rows(rng, 5, 4);
    Vec tau(5);
    tau << 0.07, 0.1, 0.2, 0.07, 0.15;
    double base =
        dual_temperature_loss(make_constant(v), make_constant(u), tau)
            ->value(0, 0);
    std::vector<int> perm = {3, 0, 4, 1, 2};
    Mat vp(5, 4), up(5, 4);
    Vec taup(5);
    for (int i = 0; i < 5; ++i) {
        vp.row(i) = v.row(perm[i]);
        up.row(i) = u.row(perm[i]);
        taup(i) = tau(perm[i]);
    }
    double permuted =
        dual_temperature_loss(make_constant(vp), make_constant(up), taup)
            ->value(0, 0);
    CHECK(std::abs(base - permuted) < 1e-12);
}

TEST_CASE("dual temperature loss rejects bad input") {
    Rng rng(69);
    Var v = make_constant(random_rows(rng, 3, 4));
    Var u = make_constant(random_rows(rng, 3, 4));
    Vec bad(3);
    bad << 0.07, 0.0, 0.07;
    CHECK_THROWS_AS(dual_temperature_loss(v, u, bad), DomainError);
    CHECK_THROWS_AS(dual_temperature_loss(v, u, Vec::Constant(2, 0.07)),
                    ShapeError);
    Var wide = make_constant(random_rows(rng, 3, 5));
    CHECK_THROWS_AS(dual_temperature_loss(v, wide, Vec::Constant(3, 0.07)),
                    ShapeError);
}

TEST_CASE("fd: dual temperature loss gradients over V and U") {
    Rng rng(71);
    Var v = make_param(random_rows(rng, 4, 5));
    Var u = make_param(random_rows(rng, 4, 5));
    Vec tau(4);
    tau << 0.07, 0.1, 0.07, 0.1;
    std::vector<Var> params = {v, u};
    double err = testutil::max_fd_rel_err(
        params, [&] { return dual_temperature_loss(v, u, tau); });
    CHECK(err < 1e-6);
}

TEST_CASE("fd: contrastive loss through both towers end to end") {
    DualEncoderConfig cfg = tiny_config();
    Rng rng(73);
    DualEncoder enc(cfg, rng);
    Rng data(74);
    std::vector<ClipFrames> clips = {random_clip(data, cfg),
                                     random_clip(data, cfg)};
    std::vector<std::vector<int>> texts = {{2, 3, 4}, {5, 6, 7, 8}};
    Vec tau = Vec::Constant(2, 0.07);
    auto loss_fn = [&] {
        return dual_temperature_loss(enc.encode_video_batch(clips),
                                     enc.encode_text_batch(texts), tau);
    };
    // spot check a spread of parameters across both towers
    ParamList all = enc.params();
    std::vector<Var> subset;
    for (const auto& p : all) {
        if (p.name == "video.patch.b" || p.name == "video.pos.spatial" ||
            p.name == "video.block0.attn_temporal.h0.wq" ||
            p.name == "video.proj" || p.name == "text.tok" ||
            p.name == "text.block0.ln_ffn.gamma" || p.name == "text.proj") {
            subset.push_back(p.var);
        }
    }
    REQUIRE(subset.size() == 7);
    CHECK(testutil::max_fd_rel_err(subset, loss_fn) < 1e-5);
}

TEST_CASE("encoder parameter names are unique and complete") {
    DualEncoderConfig cfg = tiny_config();
    Rng rng(75);
    DualEncoder enc(cfg, rng);
    ParamList params = enc.params();
    std::vector<std::string> names;
    for (const auto& p : params) {
        names.push_back(p.name);
    }
    std::sort(names.begin(), names.end());
    CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
    // divided block: 3 LN pairs + 2 attention stacks of 3h+2 + 2 dense pairs
    int h = cfg.heads;
    int divided = 6 + 2 * (3 * h + 2) + 4;
    int text_block = 4 + (3 * h + 2) + 4;
    int expect = (2 + 2 + divided + 2 + 1) + (2 + text_block + 2 + 1);
    CHECK(static_cast<int>(params.size()) == expect);
}

TEST_CASE("config validation rejects inconsistent settings") {
    DualEncoderConfig cfg;
    cfg.grid_size = 7; // patch 2 does not divide it
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DualEncoderConfig{};
    cfg.heads = 5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DualEncoderConfig{};
    cfg.vocab_size = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DualEncoderConfig{};
    cfg.tau_n = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
