#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spectra/ops.hpp"
#include "spectra/tensor.hpp"

namespace spectra {

// Which architecture pieces an ablation case enables. Case 1 is the bare
// transformer on raw spectra; each later case adds one module; case 5 adds
// the multi-output constraint (per-branch heads with summed losses).
struct AblationConfig {
    bool cnn_branch = false;
    bool ssfe_3d = false;
    bool ssfe_2d = false;
    bool multi_output = false;
};

AblationConfig ablation_config(int case_id);

struct ModelConfig {
    int patch_size = 13;  // s, odd
    int bands = 0;        // d, set from the data
    int classes = 0;      // n, set from the data
    int ssfe_3d_filters = 8;
    int ssfe_3d_kd = 7;  // spectral extent
    int ssfe_3d_kh = 3;
    int ssfe_3d_kw = 3;
    int embed_dim = 64;  // z; also the SSFE 2-D filter count
    int heads = 4;
    int encoder_layers = 1;
    int mlp_hidden = 128;
    int ablation_case = 5;

    int tokens() const { return patch_size * patch_size; }
    int head_dim() const { return embed_dim / heads; }
    /// channels the branches see after the enabled SSFE stages
    int branch_channels() const;
    void validate() const;
};

// Every learnable array plus batchnorm running statistics, addressable by
// stable names. Iteration order is the name order (std::map), which fixes
// the optimizer update and checkpoint layouts.
struct ModelParams {
    std::map<std::string, Tensor> named;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return named.count(name) != 0; }

    /// (name, tensor) for every requires_grad entry, in name order.
    std::vector<std::pair<std::string, Tensor>> trainable() const;

    void zero_grad();
    ModelParams clone() const;
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

struct ModelOutput {
    std::optional<Tensor> logits_transformer;
    std::optional<Tensor> logits_cnn;
    std::optional<Tensor> logits_fused;

    /// Present heads in transformer, cnn, fused order.
    std::vector<const Tensor*> present_heads() const;
};

// architecture pieces; patches are [B, d, s, s]
Tensor ssfe_3d_stage(Tape& tape, const Tensor& patches, const ModelParams& params,
                     const ModelConfig& cfg, Mode mode);
Tensor ssfe_2d_stage(Tape& tape, const Tensor& fmap, const ModelParams& params,
                     const ModelConfig& cfg, Mode mode);
/// Full spectral-spatial front end: 3-D stage then 2-D stage, [B,z,s,s].
Tensor ssfe_forward(Tape& tape, const Tensor& patches, const ModelParams& params,
                    const ModelConfig& cfg, Mode mode);
/// Row-major spatial flattening, learned projection, positional embedding.
Tensor tokenize(Tape& tape, const Tensor& fmap, const ModelParams& params,
                const ModelConfig& cfg);
Tensor mhsa_forward(Tape& tape, const Tensor& tokens, const ModelParams& params,
                    const ModelConfig& cfg, int layer);
/// Pre-norm encoder layers followed by mean pooling over the tokens, [B,z].
Tensor transformer_branch(Tape& tape, const Tensor& tokens, const ModelParams& params,
                          const ModelConfig& cfg, Mode mode);
/// 3x3 conv, two 1x1 convs, residual, relu, global average pool, [B,z].
Tensor cnn_branch(Tape& tape, const Tensor& fmap, const ModelParams& params,
                  const ModelConfig& cfg, Mode mode);

ModelOutput forward(Tape& tape, const Tensor& patches, const ModelParams& params,
                    const ModelConfig& cfg, Mode mode);

/// Sum of the cross entropies of every present head, equal weights.
Tensor combined_loss(Tape& tape, const ModelOutput& out, const std::vector<int>& labels);

/// Argmax of the fused head when present, else the sole head; ties go to the
/// lowest class index.
std::vector<int> predict(const ModelOutput& out);

// Batchnorm running statistics are forward-pass state. Snapshot/restore keeps
// repeated train-mode evaluations pure (finite-difference probing).
std::map<std::string, std::vector<double>> snapshot_running_stats(const ModelParams& params);
void restore_running_stats(const ModelParams& params,
                           const std::map<std::string, std::vector<double>>& snapshot);

}  // namespace spectra
