#pragma once

#include <array>
#include <vector>

#include "spectra/tensor.hpp"

namespace spectra {

enum class Mode { train, eval };

namespace ops {

// Convolutions: stride 1, zero padding, direct evaluation.
// conv3d takes [C,D,H,W] or [B,C,D,H,W]; conv2d takes [C,H,W] or [B,C,H,W].
// weight is [Cout,Cin,k...], bias [Cout]. Output extents must stay positive.
Tensor conv3d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::array<int, 3> pad);
Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::array<int, 2> pad);

// Batch normalization over every axis except channel_axis. Train mode uses
// batch statistics (differentiable through them) and updates running stats
// with the given momentum; with a batch extent of 1 it falls back to the
// running statistics and skips the update. Eval mode always uses running
// statistics.
Tensor batchnorm(Tape& tape, const Tensor& input, int channel_axis, const Tensor& gamma,
                 const Tensor& beta, double eps, Mode mode, Tensor& running_mean,
                 Tensor& running_var, double momentum);

Tensor relu(Tape& tape, const Tensor& input);

/// Normalizes over the last axis; gamma/beta have that axis's extent.
Tensor layernorm(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 double eps);

/// input [..., in] x weight [out, in] + bias [out] -> [..., out].
Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor softmax(Tape& tape, const Tensor& input, int axis);

/// Batched: a [..., M, K] x b [..., K, N] with equal leading extents.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

Tensor transpose(Tape& tape, const Tensor& input, int axis_a, int axis_b);
Tensor reshape(Tape& tape, const Tensor& input, Shape target);
Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis);

/// Removes the axis, averaging over it.
Tensor mean_over_axis(Tape& tape, const Tensor& input, int axis);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);

/// b's shape must be a trailing suffix of a's; b is repeated over the
/// leading axes (used for positional embeddings).
Tensor add_broadcast(Tape& tape, const Tensor& a, const Tensor& b);

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor sum(Tape& tape, const Tensor& a);

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels);

// Relu kink freezing for finite-difference verification: capture records the
// active mask of each relu call; replay reuses the captured masks in call
// order, so perturbed evaluations stay on one piecewise-linear branch.
void relu_freeze_capture();
void relu_freeze_replay();
void relu_freeze_off();

}  // namespace ops
}  // namespace spectra
