// SPDX-License-Identifier: Apache-2.0
#include "hiergan/segmentation.hpp"

#include <set>
#include <string>

#include "hiergan/error.hpp"
#include "hiergan/toyfaces.hpp"

namespace hiergan {
namespace {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

nn::Sequential conv_pair(int in, int out, int first_stride) {
  return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(first_stride).padding(1)), nn::ReLU(),
                        nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)), nn::ReLU());
}

}  // namespace

std::string_view region_name(Region r) {
  switch (r) {
    case Region::left_eye: return "le";
    case Region::right_eye: return "re";
    case Region::nose: return "n";
    case Region::mouth: return "m";
  }
  return "?";
}

Region parse_region(std::string_view name) {
  for (Region r : kAllRegions) {
    if (region_name(r) == name) return r;
  }
  throw InvalidArgument("unknown region '" + std::string(name) + "' (expected le, re, n or m)");
}

RegionGrouping default_grouping() {
  auto k = [](FaceClass c) { return static_cast<int>(c); };
  return {{
      {k(FaceClass::left_eye), k(FaceClass::left_brow)},
      {k(FaceClass::right_eye), k(FaceClass::right_brow)},
      {k(FaceClass::nose)},
      {k(FaceClass::upper_lip), k(FaceClass::inner_mouth), k(FaceClass::lower_lip)},
  }};
}

void validate_grouping(const RegionGrouping& grouping, int num_classes) {
  std::set<int> seen;
  for (Region r : kAllRegions) {
    const auto& group = grouping[region_index(r)];
    if (group.empty()) throw InvalidArgument("grouping: region " + std::string(region_name(r)) + " has no classes");
    for (int k : group) {
      if (k < 0 || k >= num_classes) {
        throw InvalidArgument("grouping: unknown class index " + std::to_string(k) + " in region " +
                              std::string(region_name(r)));
      }
      if (!seen.insert(k).second) {
        throw InvalidArgument("grouping: class " + std::to_string(k) + " assigned to more than one region");
      }
    }
  }
}

SegNetworkImpl::SegNetworkImpl(SegNetworkOptions options) : options_(options) {
  if (options_.num_classes < 2) throw InvalidArgument("segmentation: num_classes must be >= 2");
  const auto& w = options_.widths;
  enc0_ = register_module("enc0", conv_pair(3, w[0], 1));
  enc1_ = register_module("enc1", conv_pair(w[0], w[1], 2));
  enc2_ = register_module("enc2", conv_pair(w[1], w[2], 2));
  enc3_ = register_module("enc3", conv_pair(w[2], w[3], 2));
  dec2_ = register_module("dec2", conv_pair(w[3] + w[2], w[2], 1));
  dec1_ = register_module("dec1", conv_pair(w[2] + w[1], w[1], 1));
  dec0_ = register_module("dec0", conv_pair(w[1] + w[0], w[0], 1));
  head_ = register_module("head", nn::Conv2d(nn::Conv2dOptions(w[0], options_.num_classes, 1)));
}

torch::Tensor SegNetworkImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3) {
    throw InvalidArgument("segmentation: expected (B, 3, H, W) input");
  }
  if (images.size(2) % kDownsampling != 0 || images.size(3) % kDownsampling != 0) {
    throw InvalidArgument("segmentation: spatial size " + std::to_string(images.size(2)) + "x" +
                          std::to_string(images.size(3)) + " must be divisible by " +
                          std::to_string(kDownsampling));
  }
  auto up = [](const torch::Tensor& x) {
    return F::interpolate(x, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0})
                                 .mode(torch::kNearest));
  };
  torch::Tensor s0 = enc0_->forward(images);
  torch::Tensor s1 = enc1_->forward(s0);
  torch::Tensor s2 = enc2_->forward(s1);
  torch::Tensor b = enc3_->forward(s2);
  torch::Tensor d2 = dec2_->forward(torch::cat({up(b), s2}, 1));
  torch::Tensor d1 = dec1_->forward(torch::cat({up(d2), s1}, 1));
  torch::Tensor d0 = dec0_->forward(torch::cat({up(d1), s0}, 1));
  return head_->forward(d0);
}

void SegNetworkImpl::zero_head() {
  torch::NoGradGuard guard;
  head_->weight.zero_();
  head_->bias.zero_();
}

torch::Tensor seg_forward(SegNetwork& net, const torch::Tensor& images) { return net->forward(images); }

SoftMaskStack tempered_softmax(const torch::Tensor& logits, double temperature) {
  if (!(temperature > 0.0)) {
    throw InvalidArgument("tempered_softmax: temperature must be positive, got " + std::to_string(temperature));
  }
  if (logits.dim() < 2) throw InvalidArgument("tempered_softmax: logits need a channel axis");
  if (!torch::isfinite(logits).all().item<bool>()) {
    throw NumericError("tempered_softmax: non-finite logits");
  }
  return {torch::softmax(logits * temperature, 1), temperature};
}

RegionMasks group_masks(const SoftMaskStack& soft, const RegionGrouping& grouping) {
  const int c = static_cast<int>(soft.probs.size(1));
  validate_grouping(grouping, c);
  std::vector<torch::Tensor> masks;
  masks.reserve(kNumRegions);
  for (const auto& group : grouping) {
    torch::Tensor sum = soft.probs.select(1, group.front());
    for (std::size_t i = 1; i < group.size(); ++i) sum = sum + soft.probs.select(1, group[i]);
    masks.push_back(sum);
  }
  return {torch::stack(masks, 1), grouping};
}

torch::Tensor hard_labels(const torch::Tensor& scores) {
  torch::NoGradGuard guard;
  torch::Tensor s = scores.detach();
  torch::Tensor best = s.select(1, 0).clone();
  torch::Tensor index = torch::zeros_like(best, torch::kInt64);
  for (int64_t k = 1; k < s.size(1); ++k) {
    torch::Tensor channel = s.select(1, k);
    torch::Tensor better = channel > best;  // strict: earlier index wins ties
    best = torch::where(better, channel, best);
    index.masked_fill_(better, k);
  }
  return index;
}

torch::Tensor hard_labels(const SoftMaskStack& soft) { return hard_labels(soft.probs); }

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace hiergan
