// SPDX-License-Identifier: Apache-2.0
//
// Face parser S(x; theta_s), the tempered-softmax mask head and the grouping of
// parser classes into the four local regions.
#pragma once

#include <torch/torch.h>

#include <array>
#include <string_view>
#include <vector>

namespace hiergan {

enum class Region : int { left_eye = 0, right_eye = 1, nose = 2, mouth = 3 };
inline constexpr int kNumRegions = 4;
inline constexpr std::array<Region, kNumRegions> kAllRegions = {Region::left_eye, Region::right_eye, Region::nose,
                                                                Region::mouth};

/// Short names used in configs and logs: le, re, n, m.
std::string_view region_name(Region r);
Region parse_region(std::string_view name);
inline int region_index(Region r) { return static_cast<int>(r); }

/// Parser classes belonging to each region, indexed by Region.
using RegionGrouping = std::array<std::vector<int>, kNumRegions>;

/// le <- {left_eye, left_brow}; re <- {right_eye, right_brow}; n <- {nose};
/// m <- {upper_lip, inner_mouth, lower_lip}.
RegionGrouping default_grouping();

/// Throws InvalidArgument on overlapping groups or class indices outside [0, num_classes).
void validate_grouping(const RegionGrouping& grouping, int num_classes);

struct SegNetworkOptions {
  int num_classes = 10;
  std::array<int, 4> widths{8, 16, 32, 64};
};

/// Encoder-decoder with three stride-2 stages, three upsampling stages and skip
/// connections.
class SegNetworkImpl : public torch::nn::Module {
 public:
  explicit SegNetworkImpl(SegNetworkOptions options = {});

  /// (B, 3, H, W) -> logits (B, C, H, W). H and W must be divisible by 8.
  torch::Tensor forward(const torch::Tensor& images);

  static constexpr int kDownsampling = 8;
  int num_classes() const { return options_.num_classes; }
  const SegNetworkOptions& options() const { return options_; }
  void zero_head();

 private:
  SegNetworkOptions options_;
  torch::nn::Sequential enc0_{nullptr}, enc1_{nullptr}, enc2_{nullptr}, enc3_{nullptr};
  torch::nn::Sequential dec2_{nullptr}, dec1_{nullptr}, dec0_{nullptr};
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(SegNetwork);

/// Same as net->forward; kept as a free function to mirror the other stages.
torch::Tensor seg_forward(SegNetwork& net, const torch::Tensor& images);

struct SoftMaskStack {
  torch::Tensor probs;  // (B, C, H, W), channel sums 1
  double temperature = 10.0;
};

/// softmax over channels of temperature * logits.
SoftMaskStack tempered_softmax(const torch::Tensor& logits, double temperature);

struct RegionMasks {
  torch::Tensor masks;  // (B, 4, H, W) in region order le, re, n, m
  RegionGrouping grouping;
};

RegionMasks group_masks(const SoftMaskStack& soft, const RegionGrouping& grouping);

/// Per-pixel argmax, lowest class index on ties. (B, H, W) int64, no gradient.
torch::Tensor hard_labels(const SoftMaskStack& soft);
torch::Tensor hard_labels(const torch::Tensor& probs_or_logits);

/// Total number of scalar parameters in a module.
std::int64_t parameter_count(const torch::nn::Module& module);

}  // namespace hiergan
