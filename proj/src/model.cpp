#include "spectra/model.hpp"

#include <cmath>
#include <stdexcept>

#include "spectra/rng.hpp"

namespace spectra {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
constexpr double kLnEps = 1e-5;

}  // namespace

AblationConfig ablation_config(int case_id) {
    if (case_id < 1 || case_id > 5) {
        throw std::invalid_argument("ablation_config: case must be in 1..5, got " +
                                    std::to_string(case_id));
    }
    AblationConfig ab;
    ab.cnn_branch = case_id >= 2;
    ab.ssfe_3d = case_id >= 3;
    ab.ssfe_2d = case_id >= 4;
    ab.multi_output = case_id == 5;
    return ab;
}

int ModelConfig::branch_channels() const {
    const AblationConfig ab = ablation_config(ablation_case);
    if (ab.ssfe_2d) {
        return embed_dim;
    }
    if (ab.ssfe_3d) {
        return ssfe_3d_filters * (bands - ssfe_3d_kd + 1);
    }
    return bands;
}

void ModelConfig::validate() const {
    if (patch_size < 3 || patch_size % 2 == 0) {
        throw std::invalid_argument("ModelConfig: patch_size must be odd and >= 3");
    }
    if (bands < 1) {
        throw std::invalid_argument("ModelConfig: bands must be positive");
    }
    if (classes < 2) {
        throw std::invalid_argument("ModelConfig: need at least two classes");
    }
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) {
        throw std::invalid_argument("ModelConfig: embed_dim must be divisible by heads");
    }
    if (encoder_layers < 1 || mlp_hidden < 1 || ssfe_3d_filters < 1) {
        throw std::invalid_argument("ModelConfig: layer sizes must be positive");
    }
    if (ssfe_3d_kh % 2 == 0 || ssfe_3d_kw % 2 == 0 || ssfe_3d_kh < 1 || ssfe_3d_kw < 1) {
        throw std::invalid_argument("ModelConfig: spatial kernel extents must be odd");
    }
    const AblationConfig ab = ablation_config(ablation_case);
    if (ab.ssfe_3d && bands <= ssfe_3d_kd) {
        throw std::invalid_argument("ModelConfig: bands must exceed the 3-D kernel's spectral extent");
    }
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = named.find(name);
    if (it == named.end()) {
        throw std::out_of_range("ModelParams: no parameter named " + name);
    }
    return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = named.find(name);
    if (it == named.end()) {
        throw std::out_of_range("ModelParams: no parameter named " + name);
    }
    return it->second;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::trainable() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, t] : named) {
        if (t.requires_grad()) {
            out.emplace_back(name, t);
        }
    }
    return out;
}

void ModelParams::zero_grad() {
    for (auto& [name, t] : named) {
        t.zero_grad();
    }
}

ModelParams ModelParams::clone() const {
    ModelParams out;
    for (const auto& [name, t] : named) {
        out.named.emplace(name, t.clone());
    }
    return out;
}

namespace {

Tensor kaiming_uniform(Rng& rng, Shape shape, std::int64_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor t(std::move(shape), 0.0, true);
    for (double& v : t.data()) {
        v = rng.uniform(-bound, bound);
    }
    return t;
}

void add_linear(ModelParams& p, Rng& rng, const std::string& prefix, int out, int in) {
    p.named.emplace(prefix + ".weight", kaiming_uniform(rng, {out, in}, in));
    p.named.emplace(prefix + ".bias", Tensor({out}, 0.0, true));
}

void add_bn(ModelParams& p, const std::string& prefix, int channels) {
    p.named.emplace(prefix + ".gamma", Tensor({channels}, 1.0, true));
    p.named.emplace(prefix + ".beta", Tensor({channels}, 0.0, true));
    p.named.emplace(prefix + ".run_mean", Tensor({channels}, 0.0, false));
    p.named.emplace(prefix + ".run_var", Tensor({channels}, 1.0, false));
}

// shared handles so batchnorm can update the running statistics in place
struct BnRefs {
    Tensor gamma, beta, run_mean, run_var;
};

BnRefs bn_refs(const ModelParams& params, const std::string& prefix) {
    return {params.at(prefix + ".gamma"), params.at(prefix + ".beta"),
            params.at(prefix + ".run_mean"), params.at(prefix + ".run_var")};
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const AblationConfig ab = ablation_config(cfg.ablation_case);
    Rng rng(mix_seed(seed, 0x9a11u));
    ModelParams p;
    const int z = cfg.embed_dim;

    if (ab.ssfe_3d) {
        const int f3 = cfg.ssfe_3d_filters;
        const std::int64_t fan =
            static_cast<std::int64_t>(cfg.ssfe_3d_kd) * cfg.ssfe_3d_kh * cfg.ssfe_3d_kw;
        p.named.emplace("ssfe3.conv.weight",
                        kaiming_uniform(rng, {f3, 1, cfg.ssfe_3d_kd, cfg.ssfe_3d_kh, cfg.ssfe_3d_kw}, fan));
        p.named.emplace("ssfe3.conv.bias", Tensor({f3}, 0.0, true));
        add_bn(p, "ssfe3.bn", f3);
    }
    if (ab.ssfe_2d) {
        const int c3 = cfg.ssfe_3d_filters * (cfg.bands - cfg.ssfe_3d_kd + 1);
        p.named.emplace("ssfe2.conv.weight",
                        kaiming_uniform(rng, {z, c3, 3, 3}, static_cast<std::int64_t>(c3) * 9));
        p.named.emplace("ssfe2.conv.bias", Tensor({z}, 0.0, true));
        add_bn(p, "ssfe2.bn", z);
    }

    const int branch_in = cfg.branch_channels();
    add_linear(p, rng, "token.proj", z, branch_in);
    {
        Tensor pos({cfg.tokens(), z}, 0.0, true);
        for (double& v : pos.data()) {
            v = rng.normal(0.0, 0.02);
        }
        p.named.emplace("token.pos", pos);
    }
    for (int l = 0; l < cfg.encoder_layers; ++l) {
        const std::string enc = "enc" + std::to_string(l);
        p.named.emplace(enc + ".ln1.gamma", Tensor({z}, 1.0, true));
        p.named.emplace(enc + ".ln1.beta", Tensor({z}, 0.0, true));
        add_linear(p, rng, enc + ".attn.q", z, z);
        add_linear(p, rng, enc + ".attn.k", z, z);
        add_linear(p, rng, enc + ".attn.v", z, z);
        add_linear(p, rng, enc + ".attn.out", z, z);
        p.named.emplace(enc + ".ln2.gamma", Tensor({z}, 1.0, true));
        p.named.emplace(enc + ".ln2.beta", Tensor({z}, 0.0, true));
        add_linear(p, rng, enc + ".mlp.fc1", cfg.mlp_hidden, z);
        add_linear(p, rng, enc + ".mlp.fc2", z, cfg.mlp_hidden);
    }

    if (ab.cnn_branch) {
        p.named.emplace("cnn.conv1.weight",
                        kaiming_uniform(rng, {z, branch_in, 3, 3}, static_cast<std::int64_t>(branch_in) * 9));
        p.named.emplace("cnn.conv1.bias", Tensor({z}, 0.0, true));
        add_bn(p, "cnn.bn1", z);
        p.named.emplace("cnn.conv2.weight", kaiming_uniform(rng, {z, z, 1, 1}, z));
        p.named.emplace("cnn.conv2.bias", Tensor({z}, 0.0, true));
        add_bn(p, "cnn.bn2", z);
        p.named.emplace("cnn.conv3.weight", kaiming_uniform(rng, {z, z, 1, 1}, z));
        p.named.emplace("cnn.conv3.bias", Tensor({z}, 0.0, true));
        if (branch_in != z) {
            // projection shortcut: the residual must match the branch width
            p.named.emplace("cnn.shortcut.weight",
                            kaiming_uniform(rng, {z, branch_in, 1, 1}, branch_in));
            p.named.emplace("cnn.shortcut.bias", Tensor({z}, 0.0, true));
        }
    }

    if (ab.multi_output || !ab.cnn_branch) {
        add_linear(p, rng, "head_t", cfg.classes, z);
    }
    if (ab.multi_output) {
        add_linear(p, rng, "head_c", cfg.classes, z);
    }
    if (ab.cnn_branch) {
        add_linear(p, rng, "head_f", cfg.classes, 2 * z);
    }
    return p;
}

Tensor ssfe_3d_stage(Tape& tape, const Tensor& patches, const ModelParams& params,
                     const ModelConfig& cfg, Mode mode) {
    if (patches.dim() != 4 || patches.extent(1) != cfg.bands) {
        throw std::invalid_argument("ssfe_3d_stage: expected [B," + std::to_string(cfg.bands) +
                                    ",s,s], got " + shape_str(patches.shape()));
    }
    if (cfg.bands <= cfg.ssfe_3d_kd) {
        throw std::invalid_argument("ssfe_3d_stage: bands must exceed the kernel's spectral extent");
    }
    const int b = patches.extent(0);
    const int s = patches.extent(2);
    Tensor cube = ops::reshape(tape, patches, {b, 1, cfg.bands, s, s});
    BnRefs bn = bn_refs(params, "ssfe3.bn");
    Tensor y = ops::conv3d(tape, cube, params.at("ssfe3.conv.weight"), params.at("ssfe3.conv.bias"),
                           {0, (cfg.ssfe_3d_kh - 1) / 2, (cfg.ssfe_3d_kw - 1) / 2});
    y = ops::batchnorm(tape, y, 1, bn.gamma, bn.beta, kBnEps, mode, bn.run_mean, bn.run_var,
                       kBnMomentum);
    y = ops::relu(tape, y);
    // fold the filter and spectral axes into channels
    const int c3 = cfg.ssfe_3d_filters * (cfg.bands - cfg.ssfe_3d_kd + 1);
    return ops::reshape(tape, y, {b, c3, s, s});
}

Tensor ssfe_2d_stage(Tape& tape, const Tensor& fmap, const ModelParams& params,
                     const ModelConfig&, Mode mode) {
    BnRefs bn = bn_refs(params, "ssfe2.bn");
    Tensor y = ops::conv2d(tape, fmap, params.at("ssfe2.conv.weight"), params.at("ssfe2.conv.bias"),
                           {1, 1});
    y = ops::batchnorm(tape, y, 1, bn.gamma, bn.beta, kBnEps, mode, bn.run_mean, bn.run_var,
                       kBnMomentum);
    return ops::relu(tape, y);
}

Tensor ssfe_forward(Tape& tape, const Tensor& patches, const ModelParams& params,
                    const ModelConfig& cfg, Mode mode) {
    return ssfe_2d_stage(tape, ssfe_3d_stage(tape, patches, params, cfg, mode), params, cfg, mode);
}

Tensor tokenize(Tape& tape, const Tensor& fmap, const ModelParams& params, const ModelConfig& cfg) {
    if (fmap.dim() != 4 || fmap.extent(2) != cfg.patch_size || fmap.extent(3) != cfg.patch_size) {
        throw std::invalid_argument("tokenize: expected [B,C,s,s], got " + shape_str(fmap.shape()));
    }
    const int b = fmap.extent(0);
    const int c = fmap.extent(1);
    Tensor grid = ops::reshape(tape, fmap, {b, c, cfg.tokens()});
    Tensor tokens = ops::transpose(tape, grid, 1, 2);  // [B, N, C], row-major spatial order
    tokens = ops::linear(tape, tokens, params.at("token.proj.weight"), params.at("token.proj.bias"));
    return ops::add_broadcast(tape, tokens, params.at("token.pos"));
}

Tensor mhsa_forward(Tape& tape, const Tensor& tokens, const ModelParams& params,
                    const ModelConfig& cfg, int layer) {
    const std::string enc = "enc" + std::to_string(layer) + ".attn";
    const int b = tokens.extent(0);
    const int n = tokens.extent(1);
    const int z = cfg.embed_dim;
    const int h = cfg.heads;
    const int dk = cfg.head_dim();

    auto split_heads = [&](const Tensor& t) {
        return ops::transpose(tape, ops::reshape(tape, t, {b, n, h, dk}), 1, 2);  // [B,h,N,dk]
    };
    Tensor q = split_heads(ops::linear(tape, tokens, params.at(enc + ".q.weight"),
                                       params.at(enc + ".q.bias")));
    Tensor k = split_heads(ops::linear(tape, tokens, params.at(enc + ".k.weight"),
                                       params.at(enc + ".k.bias")));
    Tensor v = split_heads(ops::linear(tape, tokens, params.at(enc + ".v.weight"),
                                       params.at(enc + ".v.bias")));

    Tensor scores = ops::matmul(tape, q, ops::transpose(tape, k, 2, 3));  // [B,h,N,N]
    scores = ops::scale(tape, scores, 1.0 / std::sqrt(static_cast<double>(dk)));
    Tensor attn = ops::softmax(tape, scores, 3);
    Tensor ctx = ops::matmul(tape, attn, v);                       // [B,h,N,dk]
    ctx = ops::reshape(tape, ops::transpose(tape, ctx, 1, 2), {b, n, z});
    return ops::linear(tape, ctx, params.at(enc + ".out.weight"), params.at(enc + ".out.bias"));
}

Tensor transformer_branch(Tape& tape, const Tensor& tokens, const ModelParams& params,
                          const ModelConfig& cfg, Mode) {
    Tensor x = tokens;
    for (int l = 0; l < cfg.encoder_layers; ++l) {
        const std::string enc = "enc" + std::to_string(l);
        Tensor normed = ops::layernorm(tape, x, params.at(enc + ".ln1.gamma"),
                                       params.at(enc + ".ln1.beta"), kLnEps);
        x = ops::add(tape, x, mhsa_forward(tape, normed, params, cfg, l));
        normed = ops::layernorm(tape, x, params.at(enc + ".ln2.gamma"),
                                params.at(enc + ".ln2.beta"), kLnEps);
        Tensor hidden = ops::relu(tape, ops::linear(tape, normed, params.at(enc + ".mlp.fc1.weight"),
                                                    params.at(enc + ".mlp.fc1.bias")));
        Tensor mlp = ops::linear(tape, hidden, params.at(enc + ".mlp.fc2.weight"),
                                 params.at(enc + ".mlp.fc2.bias"));
        x = ops::add(tape, x, mlp);
    }
    return ops::mean_over_axis(tape, x, 1);
}

Tensor cnn_branch(Tape& tape, const Tensor& fmap, const ModelParams& params,
                  const ModelConfig& cfg, Mode mode) {
    const int b = fmap.extent(0);
    const int c = fmap.extent(1);
    const int s = fmap.extent(2);
    const int z = cfg.embed_dim;

    BnRefs bn1 = bn_refs(params, "cnn.bn1");
    BnRefs bn2 = bn_refs(params, "cnn.bn2");
    Tensor y = ops::conv2d(tape, fmap, params.at("cnn.conv1.weight"), params.at("cnn.conv1.bias"),
                           {1, 1});
    y = ops::batchnorm(tape, y, 1, bn1.gamma, bn1.beta, kBnEps, mode, bn1.run_mean, bn1.run_var,
                       kBnMomentum);
    y = ops::relu(tape, y);
    y = ops::conv2d(tape, y, params.at("cnn.conv2.weight"), params.at("cnn.conv2.bias"), {0, 0});
    y = ops::batchnorm(tape, y, 1, bn2.gamma, bn2.beta, kBnEps, mode, bn2.run_mean, bn2.run_var,
                       kBnMomentum);
    y = ops::relu(tape, y);
    y = ops::conv2d(tape, y, params.at("cnn.conv3.weight"), params.at("cnn.conv3.bias"), {0, 0});

    Tensor shortcut = fmap;
    if (c != z) {
        shortcut = ops::conv2d(tape, fmap, params.at("cnn.shortcut.weight"),
                               params.at("cnn.shortcut.bias"), {0, 0});
    }
    y = ops::relu(tape, ops::add(tape, y, shortcut));
    return ops::mean_over_axis(tape, ops::reshape(tape, y, {b, z, s * s}), 2);
}

ModelOutput forward(Tape& tape, const Tensor& patches, const ModelParams& params,
                    const ModelConfig& cfg, Mode mode) {
    cfg.validate();
    if (patches.dim() != 4 || patches.extent(1) != cfg.bands ||
        patches.extent(2) != cfg.patch_size || patches.extent(3) != cfg.patch_size) {
        throw std::invalid_argument("forward: expected [B," + std::to_string(cfg.bands) + "," +
                                    std::to_string(cfg.patch_size) + "," +
                                    std::to_string(cfg.patch_size) + "], got " +
                                    shape_str(patches.shape()));
    }
    const AblationConfig ab = ablation_config(cfg.ablation_case);

    Tensor fmap = patches;
    if (ab.ssfe_3d) {
        fmap = ssfe_3d_stage(tape, fmap, params, cfg, mode);
    }
    if (ab.ssfe_2d) {
        fmap = ssfe_2d_stage(tape, fmap, params, cfg, mode);
    }

    Tensor feat_t = transformer_branch(tape, tokenize(tape, fmap, params, cfg), params, cfg, mode);

    ModelOutput out;
    if (!ab.cnn_branch) {
        out.logits_transformer =
            ops::linear(tape, feat_t, params.at("head_t.weight"), params.at("head_t.bias"));
        return out;
    }

    Tensor feat_c = cnn_branch(tape, fmap, params, cfg, mode);
    Tensor fused = ops::concat(tape, {feat_t, feat_c}, 1);
    if (ab.multi_output) {
        out.logits_transformer =
            ops::linear(tape, feat_t, params.at("head_t.weight"), params.at("head_t.bias"));
        out.logits_cnn = ops::linear(tape, feat_c, params.at("head_c.weight"), params.at("head_c.bias"));
    }
    out.logits_fused = ops::linear(tape, fused, params.at("head_f.weight"), params.at("head_f.bias"));
    return out;
}

std::vector<const Tensor*> ModelOutput::present_heads() const {
    std::vector<const Tensor*> heads;
    if (logits_transformer) heads.push_back(&*logits_transformer);
    if (logits_cnn) heads.push_back(&*logits_cnn);
    if (logits_fused) heads.push_back(&*logits_fused);
    return heads;
}

Tensor combined_loss(Tape& tape, const ModelOutput& out, const std::vector<int>& labels) {
    const auto heads = out.present_heads();
    if (heads.empty()) {
        throw std::invalid_argument("combined_loss: model output has no heads");
    }
    Tensor loss;
    for (const Tensor* head : heads) {
        Tensor term = ops::cross_entropy(tape, *head, labels);
        loss = loss.defined() ? ops::add(tape, loss, term) : term;
    }
    return loss;
}

std::map<std::string, std::vector<double>> snapshot_running_stats(const ModelParams& params) {
    std::map<std::string, std::vector<double>> snap;
    for (const auto& [name, t] : params.named) {
        if (!t.requires_grad()) {
            snap.emplace(name, t.data());
        }
    }
    return snap;
}

void restore_running_stats(const ModelParams& params,
                           const std::map<std::string, std::vector<double>>& snapshot) {
    for (const auto& [name, values] : snapshot) {
        Tensor t = params.at(name);  // handles share storage
        t.data() = values;
    }
}

std::vector<int> predict(const ModelOutput& out) {
    const Tensor* head = nullptr;
    if (out.logits_fused) {
        head = &*out.logits_fused;
    } else {
        const auto heads = out.present_heads();
        if (heads.size() != 1) {
            throw std::invalid_argument("predict: ambiguous output without a fused head");
        }
        head = heads.front();
    }
    const int batch = head->extent(0);
    const int classes = head->extent(1);
    std::vector<int> labels(static_cast<std::size_t>(batch));
    const auto& logits = head->data();
    for (int b = 0; b < batch; ++b) {
        int best = 0;
        double best_v = logits[static_cast<std::size_t>(b * classes)];
        for (int j = 1; j < classes; ++j) {
            const double v = logits[static_cast<std::size_t>(b * classes + j)];
            if (v > best_v) {  // strict: ties keep the lowest index
                best_v = v;
                best = j;
            }
        }
        labels[static_cast<std::size_t>(b)] = best;
    }
    return labels;
}

}  // namespace spectra
