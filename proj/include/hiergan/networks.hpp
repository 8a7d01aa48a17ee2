// SPDX-License-Identifier: Apache-2.0
//
// Generators, discriminators with auxiliary expression classifiers, and the
// fusion network of the hierarchical model.
#pragma once

#include <torch/torch.h>

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "hiergan/segmentation.hpp"

namespace hiergan {

/// The six adversarial networks, in log order.
enum class NetId : int { global = 0, fusion = 1, le = 2, re = 3, n = 4, m = 5 };
inline constexpr int kNumNets = 6;
inline constexpr std::array<NetId, kNumNets> kAllNets = {NetId::global, NetId::fusion, NetId::le,
                                                         NetId::re,     NetId::n,      NetId::m};

std::string_view net_name(NetId id);
inline int net_index(NetId id) { return static_cast<int>(id); }
inline NetId net_for_region(Region r) { return static_cast<NetId>(region_index(r) + 2); }
inline bool is_local(NetId id) { return net_index(id) >= 2; }
inline Region region_for_net(NetId id) { return static_cast<Region>(net_index(id) - 2); }

/// One-hot expression label of dimension d.
class ExpressionLabel {
 public:
  ExpressionLabel(int index, int dim);

  int index() const { return index_; }
  int dim() const { return dim_; }
  torch::Tensor onehot() const;                                      // (d)
  torch::Tensor broadcast(int64_t height, int64_t width) const;      // (d, H, W)

 private:
  int index_;
  int dim_;
};

/// (B) label indices -> (B, d) one-hot float.
torch::Tensor labels_onehot(const torch::Tensor& indices, int dim, torch::TensorOptions options = {});
/// (B) label indices -> (B, d, H, W), channel k all ones where label == k.
torch::Tensor labels_broadcast(const torch::Tensor& indices, int dim, int64_t height, int64_t width,
                               torch::TensorOptions options = {});

class ResidualBlockImpl : public torch::nn::Module {
 public:
  explicit ResidualBlockImpl(int channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResidualBlock);

struct GeneratorOptions {
  int resolution = 64;
  int label_dim = 4;
  int width = 8;
  int res_blocks = 6;
};

/// Encoder-decoder translator: stem conv, two stride-2 stages, residual blocks,
/// two transposed-conv stages and a tanh output.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorOptions options);
  /// (B, 3, H, H) and (B) label indices -> (B, 3, H, H) in [-1, 1].
  torch::Tensor forward(const torch::Tensor& images, const torch::Tensor& labels);
  const GeneratorOptions& options() const { return options_; }

 private:
  GeneratorOptions options_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Generator);

torch::Tensor gen_translate(Generator& g, const torch::Tensor& images, const torch::Tensor& labels);
torch::Tensor gen_translate(Generator& g, const torch::Tensor& images, const ExpressionLabel& label);

struct DiscriminatorOutput {
  torch::Tensor realness;  // (B, 1, H / 2^k, H / 2^k) logits
  torch::Tensor logits;    // (B, d) class logits
};

struct DiscriminatorOptions {
  int resolution = 64;
  int label_dim = 4;
  int width = 16;
  int max_width = 128;
};

/// Patch discriminator: stride-2 4x4 convs down to a 4x4 map, then a realness
/// head and a pooled class head.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(DiscriminatorOptions options);
  DiscriminatorOutput forward(const torch::Tensor& images);
  const DiscriminatorOptions& options() const { return options_; }
  int downsampling_stages() const { return stages_; }

 private:
  DiscriminatorOptions options_;
  int stages_ = 0;
  torch::nn::Sequential trunk_{nullptr};
  torch::nn::Conv2d realness_head_{nullptr};
  torch::nn::Conv2d class_head_{nullptr};
};
TORCH_MODULE(Discriminator);

DiscriminatorOutput disc_forward(Discriminator& d, const torch::Tensor& images);

struct FusionOptions {
  int width = 8;
};

/// Two conv blocks, four residual blocks and a final conv over the channel
/// concatenation (global first, then stitched local).
class FusionNetworkImpl : public torch::nn::Module {
 public:
  explicit FusionNetworkImpl(FusionOptions options = {});
  torch::Tensor forward(const torch::Tensor& global_out, const torch::Tensor& local_out);
  /// One line per top-level layer, e.g. "conv_block 6->8".
  std::vector<std::string> layer_manifest() const;

 private:
  FusionOptions options_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(FusionNetwork);

torch::Tensor fuse(FusionNetwork& f, const torch::Tensor& global_out, const torch::Tensor& local_out);

struct NetworkConfig {
  int resolution = 64;
  int part_size = 32;
  int label_dim = 4;
  int global_width = 8;
  int global_res_blocks = 6;
  int local_width = 8;
  int local_res_blocks = 3;
  int disc_width = 16;
  int fusion_width = 8;
  std::uint64_t seed = 0;
};

struct Networks {
  std::array<Generator, 5> generators{nullptr, nullptr, nullptr, nullptr, nullptr};  // global, le, re, n, m
  std::array<Discriminator, kNumNets> discriminators{nullptr, nullptr, nullptr, nullptr, nullptr, nullptr};
  FusionNetwork fusion{nullptr};

  /// Generator for global or a local network; fusion has no Generator.
  Generator& generator(NetId id);
  Discriminator& discriminator(NetId id) { return discriminators[net_index(id)]; }
  void to(torch::Dtype dtype);
};

/// Throws ConfigError listing every offending key.
void validate_network_config(const NetworkConfig& config);

/// Deterministic initialization from config.seed.
Networks build_networks(const NetworkConfig& config);

}  // namespace hiergan
