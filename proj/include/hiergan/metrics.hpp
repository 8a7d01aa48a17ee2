// SPDX-License-Identifier: Apache-2.0
//
// Model-free evaluation metrics.
#pragma once

#include <torch/torch.h>

#include <vector>

namespace hiergan {

struct MiouResult {
  double miou = 0.0;
  std::vector<double> per_class;  // NaN for classes absent from both maps
};

/// IoU per class; classes absent from both prediction and truth are left out of the mean.
MiouResult miou(const torch::Tensor& pred, const torch::Tensor& truth, int num_classes);

/// Fraction of predictions equal to targets. Throws InvalidArgument on empty input.
double accuracy(const torch::Tensor& predicted, const torch::Tensor& targets);

/// d x d counts, rows = target, cols = predicted.
torch::Tensor confusion_matrix(const torch::Tensor& predicted, const torch::Tensor& targets, int dim);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)) over row-wise feature sets.
/// Covariances get 1e-6 added on the diagonal; the square-root trace is taken
/// from the symmetric product S_a^(1/2) S_b S_a^(1/2). Each set needs > dim rows.
double frechet_distance(const torch::Tensor& feats_a, const torch::Tensor& feats_b);

/// Mean of 1 - cos(a_i, b_i) over paired rows.
double cosine_distance_mean(const torch::Tensor& a, const torch::Tensor& b);

/// Per-pixel mean absolute channel difference, min-max normalized to [0, 1].
/// Identical inputs give an all-zero map. Inputs are (3, H, W); output (H, W).
torch::Tensor diff_heatmap(const torch::Tensor& original, const torch::Tensor& translated);

}  // namespace hiergan
