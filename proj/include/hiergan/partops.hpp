// SPDX-License-Identifier: Apache-2.0
//
// Local part extraction (mask multiply, crop to content, resize) and the inverse
// stitching of translated parts onto a full-size canvas.
//
// Pixel values are differentiable with respect to both the image and the soft
// region masks. Crop geometry is computed from hard labels and carries no gradient.
#pragma once

#include <torch/torch.h>

#include <array>
#include <vector>

#include "hiergan/segmentation.hpp"

namespace hiergan {

struct CropBox {
  Region region = Region::left_eye;
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  bool valid = true;  // false when the region's hard mask was empty and the prior was used

  bool operator==(const CropBox&) const = default;
};

using PriorBoxes = std::array<CropBox, kNumRegions>;

/// Prior box as fractions of the canvas: (top, left, side).
struct PriorFraction {
  double top = 0.0;
  double left = 0.0;
  double side = 0.25;
};
using PriorFractions = std::array<PriorFraction, kNumRegions>;

/// Fallback boxes covering where the toy layout puts each region.
PriorFractions default_prior_fractions();
PriorBoxes make_prior_boxes(const PriorFractions& fractions, int canvas);

/// Which regions take part in extraction and stitching; excluded ones are bypassed.
using RegionSet = std::array<bool, kNumRegions>;
inline constexpr RegionSet kAllRegionsActive = {true, true, true, true};

/// Tight box around `region_mask` (H, W) bool, grown by `margin` of its extent per
/// side (rounded up), squared by growing the short side, at least 4 px, then
/// shifted inside the image. Falls back to `prior` (valid = false) when empty.
CropBox box_from_mask(const torch::Tensor& region_mask, double margin, const CropBox& prior);

/// Tight box plus margin before squaring and clamping; exposed for tests.
CropBox margin_box(const torch::Tensor& region_mask, double margin, Region region);

struct PartBundle {
  std::array<torch::Tensor, kNumRegions> parts;  // (B, 3, P, P); undefined for bypassed regions
  std::array<std::vector<CropBox>, kNumRegions> boxes;  // one per batch element
  RegionMasks masks;
  RegionSet active = kAllRegionsActive;
  int part_size = 0;
};

/// Bilinear resampling of the last two axes. Output pixel (i, j) samples the source
/// at ((i + 0.5) H / out_h - 0.5, (j + 0.5) W / out_w - 0.5), clamped to the
/// source extent. Implemented as two interpolation-matrix products, so the
/// backward pass is the exact adjoint.
torch::Tensor bilinear_resize(const torch::Tensor& src, int64_t out_h, int64_t out_w);

/// (out, in) matrix of 1-D bilinear weights used by bilinear_resize.
torch::Tensor interpolation_matrix(int64_t out_size, int64_t in_size, torch::TensorOptions options);

/// hard_map: (B, H, W) integer class map used for crop geometry.
PartBundle extract_parts(const torch::Tensor& images, const RegionMasks& masks, const torch::Tensor& hard_map,
                         int part_size, const PriorBoxes& priors, double margin = 0.1,
                         const RegionSet& active = kAllRegionsActive);

/// Resizes each translated part back to its box, pastes it on a zero canvas,
/// multiplies by the soft region mask and sums over the active regions.
torch::Tensor stitch_parts(const std::array<torch::Tensor, kNumRegions>& translated,
                           const std::array<std::vector<CropBox>, kNumRegions>& boxes, const RegionMasks& masks,
                           int64_t height, int64_t width, const RegionSet& active = kAllRegionsActive);

}  // namespace hiergan
