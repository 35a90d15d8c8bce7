#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "spectra/gradcheck.hpp"
#include "spectra/model.hpp"
#include "spectra/ops.hpp"
#include "spectra/rng.hpp"
#include "support.hpp"

using namespace spectra;

namespace {

ModelConfig tiny_config(int case_id) {
    ModelConfig cfg;
    cfg.patch_size = 5;
    cfg.bands = 6;
    cfg.classes = 3;
    cfg.ssfe_3d_filters = 2;
    cfg.ssfe_3d_kd = 3;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.mlp_hidden = 16;
    cfg.ablation_case = case_id;
    return cfg;
}

Tensor random_patches(Rng& rng, int b, const ModelConfig& cfg) {
    return Tensor({b, cfg.bands, cfg.patch_size, cfg.patch_size},
                  oracle::random_vec(rng, static_cast<std::size_t>(b) * cfg.bands *
                                              cfg.patch_size * cfg.patch_size, 0.0, 1.0));
}

using oracle::naive_layernorm;
using oracle::naive_linear;
using oracle::naive_mhsa;

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

}  // namespace

TEST_CASE("ablation cases enable modules cumulatively") {
    CHECK_THROWS(ablation_config(0));
    CHECK_THROWS(ablation_config(6));
    const auto c1 = ablation_config(1);
    CHECK_FALSE(c1.cnn_branch);
    CHECK_FALSE(c1.ssfe_3d);
    CHECK_FALSE(c1.ssfe_2d);
    CHECK_FALSE(c1.multi_output);
    const auto c5 = ablation_config(5);
    CHECK(c5.cnn_branch);
    CHECK(c5.ssfe_3d);
    CHECK(c5.ssfe_2d);
    CHECK(c5.multi_output);
    // cases 4 and 5 differ only in which heads carry losses
    const auto c4 = ablation_config(4);
    CHECK(c4.cnn_branch == c5.cnn_branch);
    CHECK(c4.ssfe_3d == c5.ssfe_3d);
    CHECK(c4.ssfe_2d == c5.ssfe_2d);
    CHECK_FALSE(c4.multi_output);
}

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config(5);
    CHECK_NOTHROW(cfg.validate());
    ModelConfig bad = cfg;
    bad.patch_size = 4;
    CHECK_THROWS(bad.validate());
    bad = cfg;
    bad.embed_dim = 9;  // not divisible by heads=2
    CHECK_THROWS(bad.validate());
    bad = cfg;
    bad.bands = 3;  // equals the spectral kernel extent
    CHECK_THROWS(bad.validate());
    bad.ablation_case = 1;  // no 3-D stage, so small band counts are fine
    CHECK_NOTHROW(bad.validate());
}

TEST_CASE("parameter inventory follows the ablation case") {
    ModelConfig cfg = tiny_config(5);
    ModelParams p5 = init_params(cfg, 1);
    CHECK(p5.has("ssfe3.conv.weight"));
    CHECK(p5.has("ssfe2.conv.weight"));
    CHECK(p5.has("cnn.conv1.weight"));
    CHECK(p5.has("head_t.weight"));
    CHECK(p5.has("head_c.weight"));
    CHECK(p5.has("head_f.weight"));
    CHECK_FALSE(p5.has("cnn.shortcut.weight"));  // branch input is already z wide
    CHECK(p5.at("token.pos").shape() == Shape{25, 8});
    CHECK(p5.at("head_f.weight").shape() == Shape{3, 16});

    cfg.ablation_case = 1;
    ModelParams p1 = init_params(cfg, 1);
    CHECK(p1.has("head_t.weight"));
    CHECK_FALSE(p1.has("head_f.weight"));
    CHECK_FALSE(p1.has("cnn.conv1.weight"));
    CHECK_FALSE(p1.has("ssfe3.conv.weight"));
    CHECK(p1.at("token.proj.weight").shape() == Shape{8, 6});  // raw spectra projection

    cfg.ablation_case = 2;
    ModelParams p2 = init_params(cfg, 1);
    CHECK(p2.has("cnn.shortcut.weight"));  // d != z needs the projection shortcut
    CHECK(p2.has("head_f.weight"));
    CHECK_FALSE(p2.has("head_t.weight"));

    cfg.ablation_case = 3;
    ModelParams p3 = init_params(cfg, 1);
    // 2 filters x (6-3+1) spectral positions
    CHECK(p3.at("token.proj.weight").shape() == Shape{8, 8});
}

TEST_CASE("ssfe zero patch with zero biases stays zero") {
    ModelConfig cfg = tiny_config(5);
    ModelParams params = init_params(cfg, 3);
    Tensor patches({2, cfg.bands, 5, 5}, 0.0);
    Tape tape;
    Tensor y = ssfe_forward(tape, patches, params, cfg, Mode::train);
    CHECK(y.shape() == Shape{2, 8, 5, 5});
    for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("ssfe output shape for the paper-scale defaults") {
    ModelConfig cfg;  // defaults: 8 filters, 7x3x3 kernel, 64 channels out
    cfg.bands = 30;
    cfg.classes = 4;
    ModelParams params = init_params(cfg, 3);
    Rng rng(7);
    Tensor patches = random_patches(rng, 1, cfg);
    Tape tape(false);
    Tensor y = ssfe_forward(tape, patches, params, cfg, Mode::train);
    CHECK(y.shape() == Shape{1, 64, 13, 13});
}

TEST_CASE("ssfe matches the unrolled conv/bn/relu composition") {
    ModelConfig cfg = tiny_config(5);
    cfg.bands = 7;
    cfg.patch_size = 3;
    ModelParams params = init_params(cfg, 11);
    Rng rng(13);
    const int b = 2;
    Tensor patches = random_patches(rng, b, cfg);

    Tape tape(false);
    Tensor got = ssfe_forward(tape, patches, params, cfg, Mode::eval);

    // eval-mode composition with fresh stats (mean 0, var 1)
    const int s = cfg.patch_size;
    const int dp = cfg.bands - cfg.ssfe_3d_kd + 1;
    const int f3 = cfg.ssfe_3d_filters;
    std::vector<double> stage(static_cast<std::size_t>(b * f3 * dp * s * s));
    for (int i = 0; i < b; ++i) {
        std::vector<double> one(patches.data().begin() + i * cfg.bands * s * s,
                                patches.data().begin() + (i + 1) * cfg.bands * s * s);
        auto y3 = oracle::conv3d(one, 1, cfg.bands, s, s, params.at("ssfe3.conv.weight").data(), f3,
                                 cfg.ssfe_3d_kd, 3, 3, params.at("ssfe3.conv.bias").data(), 0, 1, 1);
        std::copy(y3.begin(), y3.end(), stage.begin() + i * f3 * dp * s * s);
    }
    const double istd = 1.0 / std::sqrt(1.0 + 1e-5);
    for (double& v : stage) v = std::max(0.0, v * istd);  // bn eval with unit stats, then relu
    const int c3 = f3 * dp;
    std::vector<double> out;
    for (int i = 0; i < b; ++i) {
        std::vector<double> one(stage.begin() + i * c3 * s * s, stage.begin() + (i + 1) * c3 * s * s);
        auto y2 = oracle::conv2d(one, c3, s, s, params.at("ssfe2.conv.weight").data(), cfg.embed_dim,
                                 3, 3, params.at("ssfe2.conv.bias").data(), 1, 1);
        for (double v : y2) out.push_back(std::max(0.0, v * istd));
    }
    CHECK(max_abs_diff(got.data(), out) <= 1e-12);
}

TEST_CASE("tokenize: zero feature map reproduces the positional embedding") {
    ModelConfig cfg = tiny_config(4);
    ModelParams params = init_params(cfg, 5);
    Tensor fmap({2, cfg.embed_dim, 5, 5}, 0.0);
    Tape tape(false);
    Tensor tokens = tokenize(tape, fmap, params, cfg);
    CHECK(tokens.shape() == Shape{2, 25, 8});
    const auto& pos = params.at("token.pos").data();
    for (int b = 0; b < 2; ++b) {
        for (std::size_t i = 0; i < pos.size(); ++i) {
            CHECK(tokens.data()[b * pos.size() + i] == pos[i]);
        }
    }
}

TEST_CASE("tokenize: patch size 13 yields 169 tokens") {
    ModelConfig cfg;
    cfg.bands = 30;
    cfg.classes = 2;
    CHECK(cfg.tokens() == 169);
    ModelParams params = init_params(cfg, 5);
    Tensor fmap({1, 64, 13, 13}, 0.1);
    Tape tape(false);
    CHECK(tokenize(tape, fmap, params, cfg).shape() == Shape{1, 169, 64});
}

TEST_CASE("tokenize: swapping spatial positions swaps token rows") {
    ModelConfig cfg = tiny_config(4);
    ModelParams params = init_params(cfg, 5);
    params.at("token.pos").data().assign(params.at("token.pos").size(), 0.0);
    Rng rng(19);
    Tensor fmap({1, cfg.embed_dim, 5, 5},
                oracle::random_vec(rng, static_cast<std::size_t>(cfg.embed_dim) * 25));
    Tensor swapped = fmap.clone();
    // swap spatial positions (0,1) and (2,3): row-major tokens 1 and 13
    for (int c = 0; c < cfg.embed_dim; ++c) {
        std::swap(swapped.data()[static_cast<std::size_t>(c * 25 + 1)],
                  swapped.data()[static_cast<std::size_t>(c * 25 + 13)]);
    }
    Tape tape(false);
    Tensor a = tokenize(tape, fmap, params, cfg);
    Tensor b = tokenize(tape, swapped, params, cfg);
    for (int t = 0; t < 25; ++t) {
        const int src = t == 1 ? 13 : (t == 13 ? 1 : t);
        for (int j = 0; j < cfg.embed_dim; ++j) {
            CHECK(b.data()[static_cast<std::size_t>(t * cfg.embed_dim + j)] ==
                  a.data()[static_cast<std::size_t>(src * cfg.embed_dim + j)]);
        }
    }
}

TEST_CASE("mhsa with a single token reduces to the projected value row") {
    ModelConfig cfg = tiny_config(5);
    ModelParams params = init_params(cfg, 23);
    Rng rng(29);
    std::vector<double> row = oracle::random_vec(rng, 8);
    Tape tape(false);
    Tensor tokens({1, 1, 8}, row);
    Tensor got = mhsa_forward(tape, tokens, params, cfg, 0);
    auto v = naive_linear(row, 1, 8, params.at("enc0.attn.v.weight").data(), 8,
                          params.at("enc0.attn.v.bias").data());
    auto expect = naive_linear(v, 1, 8, params.at("enc0.attn.out.weight").data(), 8,
                               params.at("enc0.attn.out.bias").data());
    CHECK(max_abs_diff(got.data(), expect) <= 1e-12);
}

TEST_CASE("mhsa over identical tokens attends uniformly") {
    ModelConfig cfg = tiny_config(5);
    ModelParams params = init_params(cfg, 31);
    Rng rng(37);
    std::vector<double> row = oracle::random_vec(rng, 8);
    std::vector<double> three;
    for (int i = 0; i < 3; ++i) three.insert(three.end(), row.begin(), row.end());
    Tape tape(false);
    Tensor got = mhsa_forward(tape, Tensor({1, 3, 8}, three), params, cfg, 0);
    Tensor single = mhsa_forward(tape, Tensor({1, 1, 8}, row), params, cfg, 0);
    for (int t = 0; t < 3; ++t) {
        for (int j = 0; j < 8; ++j) {
            CHECK(got.data()[static_cast<std::size_t>(t * 8 + j)] ==
                  doctest::Approx(single.data()[static_cast<std::size_t>(j)]).epsilon(1e-12));
        }
    }
}

TEST_CASE("mhsa matches the per-head loop oracle") {
    ModelConfig cfg = tiny_config(5);
    cfg.embed_dim = 4;
    cfg.heads = 2;
    ModelParams params = init_params(cfg, 41);
    Rng rng(43);
    std::vector<double> tokens = oracle::random_vec(rng, 12);  // N=3, z=4
    Tape tape(false);
    Tensor got = mhsa_forward(tape, Tensor({1, 3, 4}, tokens), params, cfg, 0);
    auto expect = naive_mhsa(tokens, 3, 4, 2, params, "enc0.attn");
    CHECK(max_abs_diff(got.data(), expect) <= 1e-12);
}

TEST_CASE("transformer branch with zeroed projections is a token mean") {
    ModelConfig cfg = tiny_config(5);
    ModelParams params = init_params(cfg, 47);
    auto zero = [&](const std::string& name) {
        params.at(name).data().assign(params.at(name).size(), 0.0);
    };
    zero("enc0.attn.out.weight");
    zero("enc0.attn.out.bias");
    zero("enc0.mlp.fc2.weight");
    zero("enc0.mlp.fc2.bias");
    Rng rng(53);
    Tensor tokens({2, 4, 8}, oracle::random_vec(rng, 64));
    Tape tape(false);
    Tensor got = transformer_branch(tape, tokens, params, cfg, Mode::eval);
    for (int b = 0; b < 2; ++b) {
        for (int j = 0; j < 8; ++j) {
            double mean = 0.0;
            for (int t = 0; t < 4; ++t) mean += tokens.data()[static_cast<std::size_t>((b * 4 + t) * 8 + j)];
            mean /= 4.0;
            CHECK(got.data()[static_cast<std::size_t>(b * 8 + j)] ==
                  doctest::Approx(mean).epsilon(1e-12));
        }
    }
}

TEST_CASE("transformer branch matches a step-by-step trace") {
    ModelConfig cfg = tiny_config(5);
    ModelParams params = init_params(cfg, 59);
    Rng rng(61);
    const int n = 4, z = 8;
    std::vector<double> tokens = oracle::random_vec(rng, static_cast<std::size_t>(n) * z);
    Tape tape(false);
    Tensor got = transformer_branch(tape, Tensor({1, n, z}, tokens), params, cfg, Mode::eval);

    auto normed = naive_layernorm(tokens, n, z, params.at("enc0.ln1.gamma").data(),
                                  params.at("enc0.ln1.beta").data(), 1e-5);
    auto attn = naive_mhsa(normed, n, z, cfg.heads, params, "enc0.attn");
    std::vector<double> x(tokens);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += attn[i];
    auto normed2 = naive_layernorm(x, n, z, params.at("enc0.ln2.gamma").data(),
                                   params.at("enc0.ln2.beta").data(), 1e-5);
    auto hidden = naive_linear(normed2, n, z, params.at("enc0.mlp.fc1.weight").data(),
                               cfg.mlp_hidden, params.at("enc0.mlp.fc1.bias").data());
    for (double& v : hidden) v = std::max(0.0, v);
    auto mlp = naive_linear(hidden, n, cfg.mlp_hidden, params.at("enc0.mlp.fc2.weight").data(), z,
                            params.at("enc0.mlp.fc2.bias").data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += mlp[i];
    std::vector<double> pooled(static_cast<std::size_t>(z), 0.0);
    for (int t = 0; t < n; ++t) {
        for (int j = 0; j < z; ++j) pooled[static_cast<std::size_t>(j)] += x[static_cast<std::size_t>(t * z + j)];
    }
    for (double& v : pooled) v /= n;
    CHECK(max_abs_diff(got.data(), pooled) <= 1e-12);
}

TEST_CASE("cnn branch with zero weights is a pooled relu of its input") {
    ModelConfig cfg = tiny_config(5);
    ModelParams params = init_params(cfg, 67);
    for (const char* name : {"cnn.conv1.weight", "cnn.conv2.weight", "cnn.conv3.weight"}) {
        params.at(name).data().assign(params.at(name).size(), 0.0);
    }
    Rng rng(71);
    Tensor fmap({2, 8, 5, 5}, oracle::random_vec(rng, 400));
    Tape tape(false);
    Tensor got = cnn_branch(tape, fmap, params, cfg, Mode::eval);
    for (int b = 0; b < 2; ++b) {
        for (int c = 0; c < 8; ++c) {
            double mean = 0.0;
            for (int i = 0; i < 25; ++i) {
                mean += std::max(0.0, fmap.data()[static_cast<std::size_t>((b * 8 + c) * 25 + i)]);
            }
            mean /= 25.0;
            CHECK(got.data()[static_cast<std::size_t>(b * 8 + c)] ==
                  doctest::Approx(mean).epsilon(1e-12));
        }
    }

    SUBCASE("constant per-channel input pools to max(c, 0)") {
        Tensor constant({1, 8, 5, 5}, 0.0);
        for (int c = 0; c < 8; ++c) {
            const double value = c - 4.0;  // mixes negatives and positives
            for (int i = 0; i < 25; ++i) {
                constant.data()[static_cast<std::size_t>(c * 25 + i)] = value;
            }
        }
        Tensor pooled = cnn_branch(tape, constant, params, cfg, Mode::eval);
        for (int c = 0; c < 8; ++c) {
            CHECK(pooled.data()[static_cast<std::size_t>(c)] ==
                  doctest::Approx(std::max(0.0, c - 4.0)).epsilon(1e-12));
        }
    }
}

TEST_CASE("cnn branch matches an unrolled oracle in eval mode") {
    ModelConfig cfg = tiny_config(5);
    ModelParams params = init_params(cfg, 73);
    Rng rng(79);
    const int z = cfg.embed_dim, s = 5;
    std::vector<double> x = oracle::random_vec(rng, static_cast<std::size_t>(z) * s * s);
    Tape tape(false);
    Tensor got = cnn_branch(tape, Tensor({1, z, s, s}, x), params, cfg, Mode::eval);

    const double istd = 1.0 / std::sqrt(1.0 + 1e-5);
    auto bn_relu = [&](std::vector<double> v) {
        for (double& e : v) e = std::max(0.0, e * istd);
        return v;
    };
    auto y = bn_relu(oracle::conv2d(x, z, s, s, params.at("cnn.conv1.weight").data(), z, 3, 3,
                                    params.at("cnn.conv1.bias").data(), 1, 1));
    y = bn_relu(oracle::conv2d(y, z, s, s, params.at("cnn.conv2.weight").data(), z, 1, 1,
                               params.at("cnn.conv2.bias").data(), 0, 0));
    y = oracle::conv2d(y, z, s, s, params.at("cnn.conv3.weight").data(), z, 1, 1,
                       params.at("cnn.conv3.bias").data(), 0, 0);
    std::vector<double> pooled(static_cast<std::size_t>(z), 0.0);
    for (int c = 0; c < z; ++c) {
        for (int i = 0; i < s * s; ++i) {
            pooled[static_cast<std::size_t>(c)] +=
                std::max(0.0, y[static_cast<std::size_t>(c * s * s + i)] +
                                  x[static_cast<std::size_t>(c * s * s + i)]);
        }
        pooled[static_cast<std::size_t>(c)] /= s * s;
    }
    CHECK(max_abs_diff(got.data(), pooled) <= 1e-12);
}

TEST_CASE("forward emits the per-case heads with [B,n] shapes") {
    Rng rng(83);
    for (int case_id = 1; case_id <= 5; ++case_id) {
        ModelConfig cfg = tiny_config(case_id);
        ModelParams params = init_params(cfg, 89);
        Tensor patches = random_patches(rng, 2, cfg);
        Tape tape(false);
        ModelOutput out = forward(tape, patches, params, cfg, Mode::eval);
        if (case_id == 1) {
            CHECK(out.logits_transformer.has_value());
            CHECK_FALSE(out.logits_cnn.has_value());
            CHECK_FALSE(out.logits_fused.has_value());
        } else if (case_id < 5) {
            CHECK_FALSE(out.logits_transformer.has_value());
            CHECK_FALSE(out.logits_cnn.has_value());
            CHECK(out.logits_fused.has_value());
        } else {
            CHECK(out.logits_transformer.has_value());
            CHECK(out.logits_cnn.has_value());
            CHECK(out.logits_fused.has_value());
        }
        for (const Tensor* head : out.present_heads()) {
            CHECK(head->shape() == Shape{2, cfg.classes});
        }
    }
}

TEST_CASE("shape contract holds over randomized configurations") {
    Rng rng(97);
    for (int it = 0; it < 8; ++it) {
        ModelConfig cfg;
        cfg.patch_size = 3 + 2 * static_cast<int>(rng.below(2));  // 3 or 5
        cfg.ssfe_3d_kd = 2 + static_cast<int>(rng.below(3));
        cfg.bands = cfg.ssfe_3d_kd + 1 + static_cast<int>(rng.below(4));
        cfg.classes = 2 + static_cast<int>(rng.below(4));
        cfg.ssfe_3d_filters = 1 + static_cast<int>(rng.below(3));
        cfg.heads = 1 + static_cast<int>(rng.below(2));
        cfg.embed_dim = cfg.heads * (2 + static_cast<int>(rng.below(3)));
        cfg.mlp_hidden = 4 + static_cast<int>(rng.below(8));
        cfg.ablation_case = 1 + static_cast<int>(rng.below(5));
        const int b = 1 + static_cast<int>(rng.below(3));
        ModelParams params = init_params(cfg, rng.next_u64());
        Tensor patches = random_patches(rng, b, cfg);
        Tape tape(false);
        ModelOutput out = forward(tape, patches, params, cfg, Mode::eval);
        CHECK_FALSE(out.present_heads().empty());
        for (const Tensor* head : out.present_heads()) {
            CHECK(head->shape() == Shape{b, cfg.classes});
        }
    }
}

TEST_CASE("forward is bitwise deterministic for a fixed seed") {
    ModelConfig cfg = tiny_config(5);
    auto run = [&]() {
        ModelParams params = init_params(cfg, 123);
        Rng rng(321);
        Tensor patches = random_patches(rng, 2, cfg);
        Tape tape;
        ModelOutput out = forward(tape, patches, params, cfg, Mode::train);
        std::vector<double> all;
        for (const Tensor* head : out.present_heads()) {
            all.insert(all.end(), head->data().begin(), head->data().end());
        }
        return all;
    };
    CHECK(run() == run());
}

TEST_CASE("combined_loss sums the present heads") {
    Tape tape;
    Tensor logits({2, 3}, std::vector<double>{1.0, 0.0, -1.0, 0.5, 0.5, 0.0});
    std::vector<int> labels{0, 2};

    SUBCASE("single head equals its cross entropy") {
        ModelOutput out;
        out.logits_transformer = logits;
        Tensor loss = combined_loss(tape, out, labels);
        Tape t2;
        CHECK(loss.value() == ops::cross_entropy(t2, logits, labels).value());
    }

    SUBCASE("three identical heads triple the loss exactly") {
        ModelOutput out;
        out.logits_transformer = logits;
        out.logits_cnn = logits;
        out.logits_fused = logits;
        Tensor loss = combined_loss(tape, out, labels);
        Tape t2;
        CHECK(loss.value() == 3.0 * ops::cross_entropy(t2, logits, labels).value());
    }

    SUBCASE("no heads is an error") {
        ModelOutput out;
        CHECK_THROWS(combined_loss(tape, out, labels));
    }

    SUBCASE("independent head losses add up") {
        Rng rng(101);
        ModelOutput out;
        Tensor a({2, 3}, oracle::random_vec(rng, 6));
        Tensor b({2, 3}, oracle::random_vec(rng, 6));
        Tensor c({2, 3}, oracle::random_vec(rng, 6));
        out.logits_transformer = a;
        out.logits_cnn = b;
        out.logits_fused = c;
        Tensor loss = combined_loss(tape, out, labels);
        Tape t2;
        const double expect = ops::cross_entropy(t2, a, labels).value() +
                              ops::cross_entropy(t2, b, labels).value() +
                              ops::cross_entropy(t2, c, labels).value();
        CHECK(loss.value() == doctest::Approx(expect).epsilon(1e-14));
    }
}

TEST_CASE("combined_loss is invariant to batch permutation") {
    ModelConfig cfg = tiny_config(5);
    ModelParams params = init_params(cfg, 103);
    Rng rng(107);
    const int b = 5;
    Tensor patches = random_patches(rng, b, cfg);
    std::vector<int> labels{0, 2, 1, 1, 0};

    auto loss_of = [&](const Tensor& batch, const std::vector<int>& lab) {
        Tape tape(false);
        ModelOutput out = forward(tape, batch, params, cfg, Mode::eval);
        Tape t2;
        return combined_loss(t2, out, lab).value();
    };
    const double base = loss_of(patches, labels);

    // rotate the batch by two
    const std::int64_t stride = patches.size() / b;
    Tensor rotated(patches.shape());
    std::vector<int> rl(labels.size());
    for (int i = 0; i < b; ++i) {
        const int src = (i + 2) % b;
        std::copy_n(patches.data().begin() + src * stride, stride,
                    rotated.data().begin() + i * stride);
        rl[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(src)];
    }
    CHECK(std::abs(loss_of(rotated, rl) - base) <= 1e-12);
}

TEST_CASE("zero-initialized heads start at ln(n) per head") {
    for (int n : {2, 4, 9}) {
        ModelConfig cfg = tiny_config(5);
        cfg.classes = n;
        ModelParams params = init_params(cfg, 109);
        for (const char* head : {"head_t", "head_c", "head_f"}) {
            params.at(std::string(head) + ".weight").data().assign(
                params.at(std::string(head) + ".weight").size(), 0.0);
            params.at(std::string(head) + ".bias").data().assign(static_cast<std::size_t>(n), 0.0);
        }
        Rng rng(113);
        Tensor patches = random_patches(rng, 3, cfg);
        std::vector<int> labels{0, n - 1, n / 2};
        Tape tape;
        ModelOutput out = forward(tape, patches, params, cfg, Mode::train);
        Tensor loss = combined_loss(tape, out, labels);
        CHECK(std::abs(loss.value() - 3.0 * std::log(n)) <= 1e-9);
    }
}

TEST_CASE("predict follows the fused-else-sole-head rule") {
    SUBCASE("fused argmax") {
        ModelOutput out;
        out.logits_fused = Tensor({1, 3}, std::vector<double>{0.1, 0.9, 0.2});
        CHECK(predict(out) == std::vector<int>{1});
    }
    SUBCASE("ties break toward the lowest class") {
        ModelOutput out;
        out.logits_fused = Tensor({1, 2}, std::vector<double>{0.5, 0.5});
        CHECK(predict(out) == std::vector<int>{0});
    }
    SUBCASE("case-1 output uses the transformer head") {
        ModelOutput out;
        out.logits_transformer = Tensor({2, 3}, std::vector<double>{0, 0, 1, 5, 4, 3});
        CHECK(predict(out) == std::vector<int>{2, 0});
    }
    SUBCASE("fused wins over per-branch heads") {
        ModelOutput out;
        out.logits_transformer = Tensor({1, 2}, std::vector<double>{9.0, 0.0});
        out.logits_cnn = Tensor({1, 2}, std::vector<double>{9.0, 0.0});
        out.logits_fused = Tensor({1, 2}, std::vector<double>{0.0, 9.0});
        CHECK(predict(out) == std::vector<int>{1});
    }
}

TEST_CASE("full-model gradients pass the finite-difference check in all cases") {
    for (int case_id = 1; case_id <= 5; ++case_id) {
        CAPTURE(case_id);
        ModelConfig cfg = tiny_config(case_id);
        ModelParams params = init_params(cfg, 1000 + static_cast<std::uint64_t>(case_id));
        Rng rng(2000 + static_cast<std::uint64_t>(case_id));
        Tensor patches = random_patches(rng, 2, cfg);
        std::vector<int> labels{1, 2};
        auto program = [&](Tape& tape) {
            const auto snap = snapshot_running_stats(params);
            ModelOutput out = forward(tape, patches, params, cfg, Mode::train);
            Tensor loss = combined_loss(tape, out, labels);
            restore_running_stats(params, snap);
            return loss;
        };
        // h below the op-level default: this deliberately small config has a
        // sharper loss surface, and the central-difference truncation term
        // grows with the curvature
        auto result = finite_difference_check(program, params.trainable(), 3e-4, 3,
                                              static_cast<std::uint64_t>(case_id));
        CHECK(result.max_rel_err <= 1e-5);
    }
}
