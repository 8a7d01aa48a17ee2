// SPDX-License-Identifier: Apache-2.0
#include "hiergan/partops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hiergan/error.hpp"

namespace hiergan {
namespace {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

}  // namespace

PriorFractions default_prior_fractions() {
  // Measured from the toy renderer's layout at the mean identity.
  return {{
      {0.22, 0.19, 0.31},
      {0.22, 0.50, 0.31},
      {0.44, 0.39, 0.22},
      {0.56, 0.34, 0.31},
  }};
}

PriorBoxes make_prior_boxes(const PriorFractions& fractions, int canvas) {
  PriorBoxes boxes;
  for (Region r : kAllRegions) {
    const PriorFraction& f = fractions[region_index(r)];
    const int side = std::clamp(static_cast<int>(std::lround(f.side * canvas)), 4, canvas);
    CropBox b;
    b.region = r;
    b.height = b.width = side;
    b.top = std::clamp(static_cast<int>(std::lround(f.top * canvas)), 0, canvas - side);
    b.left = std::clamp(static_cast<int>(std::lround(f.left * canvas)), 0, canvas - side);
    b.valid = false;
    boxes[region_index(r)] = b;
  }
  return boxes;
}

CropBox margin_box(const torch::Tensor& region_mask, double margin, Region region) {
  CropBox box;
  box.region = region;
  torch::Tensor rows = region_mask.any(1);
  torch::Tensor cols = region_mask.any(0);
  torch::Tensor row_idx = rows.nonzero();
  torch::Tensor col_idx = cols.nonzero();
  if (row_idx.numel() == 0) {
    box.valid = false;
    return box;
  }
  const int r0 = row_idx.min().item<int>();
  const int r1 = row_idx.max().item<int>();
  const int c0 = col_idx.min().item<int>();
  const int c1 = col_idx.max().item<int>();
  const int h = r1 - r0 + 1;
  const int w = c1 - c0 + 1;
  const int pad_h = static_cast<int>(std::ceil(margin * h - 1e-9));
  const int pad_w = static_cast<int>(std::ceil(margin * w - 1e-9));
  box.top = r0 - pad_h;
  box.left = c0 - pad_w;
  box.height = h + 2 * pad_h;
  box.width = w + 2 * pad_w;
  return box;
}

CropBox box_from_mask(const torch::Tensor& region_mask, double margin, const CropBox& prior) {
  const int H = static_cast<int>(region_mask.size(0));
  const int W = static_cast<int>(region_mask.size(1));
  CropBox box = margin_box(region_mask, margin, prior.region);
  if (!box.valid) {
    CropBox fallback = prior;
    fallback.valid = false;
    return fallback;
  }
  int side = std::max({box.height, box.width, 4});
  side = std::min({side, H, W});
  // grow the short side symmetrically, odd remainder goes to the far edge
  const int top = box.top - (side - box.height) / 2;
  const int left = box.left - (side - box.width) / 2;
  box.height = box.width = side;
  box.top = std::clamp(top, 0, H - side);
  box.left = std::clamp(left, 0, W - side);
  return box;
}

torch::Tensor interpolation_matrix(int64_t out_size, int64_t in_size, torch::TensorOptions options) {
  torch::Tensor m = torch::zeros({out_size, in_size}, torch::kFloat64);
  auto acc = m.accessor<double, 2>();
  const double scale = static_cast<double>(in_size) / static_cast<double>(out_size);
  for (int64_t i = 0; i < out_size; ++i) {
    const double x = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(in_size - 1));
    const int64_t x0 = static_cast<int64_t>(std::floor(x));
    const int64_t x1 = std::min(x0 + 1, in_size - 1);
    const double w1 = x - static_cast<double>(x0);
    acc[i][x0] += 1.0 - w1;
    acc[i][x1] += w1;
  }
  return m.to(options);
}

torch::Tensor bilinear_resize(const torch::Tensor& src, int64_t out_h, int64_t out_w) {
  if (out_h <= 0 || out_w <= 0) {
    throw InvalidArgument("bilinear_resize: target size must be positive, got " + std::to_string(out_h) + "x" +
                          std::to_string(out_w));
  }
  if (src.dim() < 2) throw InvalidArgument("bilinear_resize: source needs at least two axes");
  const int64_t H = src.size(-2);
  const int64_t W = src.size(-1);
  if (H == out_h && W == out_w) return src;
  const auto options = src.options().requires_grad(false);
  torch::Tensor ry = interpolation_matrix(out_h, H, options);
  torch::Tensor rx = interpolation_matrix(out_w, W, options);
  return torch::matmul(torch::matmul(ry, src), rx.t());
}

PartBundle extract_parts(const torch::Tensor& images, const RegionMasks& masks, const torch::Tensor& hard_map,
                         int part_size, const PriorBoxes& priors, double margin, const RegionSet& active) {
  if (part_size < 4) throw InvalidArgument("extract_parts: part size must be >= 4");
  if (images.dim() != 4 || masks.masks.dim() != 4 || images.size(0) != masks.masks.size(0) ||
      images.size(2) != masks.masks.size(2) || images.size(3) != masks.masks.size(3)) {
    throw InvalidArgument("extract_parts: images and masks must be spatially aligned (B, *, H, W)");
  }
  const int64_t B = images.size(0);
  torch::Tensor labels = hard_map.to(torch::kCPU, torch::kInt64);

  PartBundle bundle;
  bundle.masks = masks;
  bundle.active = active;
  bundle.part_size = part_size;
  for (Region r : kAllRegions) {
    const int ri = region_index(r);
    if (!active[ri]) continue;
    torch::Tensor in_group = torch::zeros_like(labels, torch::kBool);
    for (int k : masks.grouping[ri]) in_group = in_group.logical_or(labels == k);

    std::vector<torch::Tensor> parts;
    parts.reserve(B);
    bundle.boxes[ri].reserve(B);
    torch::Tensor masked = images * masks.masks.select(1, ri).unsqueeze(1);
    for (int64_t b = 0; b < B; ++b) {
      const CropBox box = box_from_mask(in_group[b], margin, priors[ri]);
      bundle.boxes[ri].push_back(box);
      torch::Tensor crop =
          masked[b].index({Slice(), Slice(box.top, box.top + box.height), Slice(box.left, box.left + box.width)});
      parts.push_back(bilinear_resize(crop, part_size, part_size));
    }
    bundle.parts[ri] = torch::stack(parts);
  }
  return bundle;
}

torch::Tensor stitch_parts(const std::array<torch::Tensor, kNumRegions>& translated,
                           const std::array<std::vector<CropBox>, kNumRegions>& boxes, const RegionMasks& masks,
                           int64_t height, int64_t width, const RegionSet& active) {
  const int64_t B = masks.masks.size(0);
  torch::Tensor canvas;
  for (Region r : kAllRegions) {
    const int ri = region_index(r);
    if (!active[ri]) continue;
    if (static_cast<int64_t>(boxes[ri].size()) != B || !translated[ri].defined() || translated[ri].size(0) != B) {
      throw InvalidArgument("stitch_parts: region " + std::string(region_name(r)) + " is missing parts or boxes");
    }
    std::vector<torch::Tensor> placed;
    placed.reserve(B);
    for (int64_t b = 0; b < B; ++b) {
      const CropBox& box = boxes[ri][b];
      if (box.top < 0 || box.left < 0 || box.height <= 0 || box.width <= 0 || box.top + box.height > height ||
          box.left + box.width > width) {
        throw InvalidArgument("stitch_parts: box for region " + std::string(region_name(r)) + " exceeds the " +
                              std::to_string(height) + "x" + std::to_string(width) + " canvas");
      }
      torch::Tensor patch = bilinear_resize(translated[ri][b], box.height, box.width);
      placed.push_back(F::pad(patch, F::PadFuncOptions({box.left, width - box.left - box.width, box.top,
                                                        height - box.top - box.height})));
    }
    torch::Tensor region = torch::stack(placed) * masks.masks.select(1, ri).unsqueeze(1);
    canvas = canvas.defined() ? canvas + region : region;
  }
  if (!canvas.defined()) {
    canvas = torch::zeros({B, 3, height, width}, masks.masks.options().requires_grad(false));
  }
  return canvas;
}

}  // namespace hiergan
