// SPDX-License-Identifier: Apache-2.0
#include "hiergan/networks.hpp"

#include <algorithm>
#include <bit>

#include "hiergan/error.hpp"

namespace hiergan {
namespace {

namespace nn = torch::nn;

nn::InstanceNorm2d instance_norm(int channels) {
  return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(channels).affine(true).track_running_stats(false));
}

// Sequential cannot nest inside Sequential; this gives it a concrete forward().
class ConvBlockImpl : public nn::Module {
 public:
  explicit ConvBlockImpl(nn::Sequential body) : body_(register_module("body", std::move(body))) {}
  torch::Tensor forward(const torch::Tensor& x) { return body_->forward(x); }
  const nn::Sequential& body() const { return body_; }

 private:
  nn::Sequential body_;
};
TORCH_MODULE(ConvBlock);

ConvBlock conv_block(int in, int out, int kernel, int stride, int padding) {
  return ConvBlock(
      nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding).bias(false)),
                     instance_norm(out), nn::ReLU()));
}

void check_images(const torch::Tensor& images, int channels, int resolution, const char* who) {
  if (images.dim() != 4 || images.size(1) != channels || images.size(2) != resolution ||
      images.size(3) != resolution) {
    throw InvalidArgument(std::string(who) + ": expected (B, " + std::to_string(channels) + ", " +
                          std::to_string(resolution) + ", " + std::to_string(resolution) + ") input, got " +
                          std::to_string(images.dim()) + "-d tensor of shape " + [&] {
                            std::string s;
                            for (int64_t v : images.sizes()) s += std::to_string(v) + " ";
                            return s;
                          }());
  }
}

}  // namespace

std::string_view net_name(NetId id) {
  switch (id) {
    case NetId::global: return "global";
    case NetId::fusion: return "fusion";
    case NetId::le: return "le";
    case NetId::re: return "re";
    case NetId::n: return "n";
    case NetId::m: return "m";
  }
  return "?";
}

ExpressionLabel::ExpressionLabel(int index, int dim) : index_(index), dim_(dim) {
  if (dim < 1) throw InvalidArgument("label dimension must be positive");
  if (index < 0 || index >= dim) {
    throw InvalidArgument("label index " + std::to_string(index) + " outside [0, " + std::to_string(dim) + ")");
  }
}

torch::Tensor ExpressionLabel::onehot() const {
  torch::Tensor v = torch::zeros({dim_});
  v[index_] = 1.0;
  return v;
}

torch::Tensor ExpressionLabel::broadcast(int64_t height, int64_t width) const {
  return onehot().view({dim_, 1, 1}).expand({dim_, height, width}).contiguous();
}

torch::Tensor labels_onehot(const torch::Tensor& indices, int dim, torch::TensorOptions options) {
  if (indices.numel() > 0 && (indices.min().item<int64_t>() < 0 || indices.max().item<int64_t>() >= dim)) {
    throw InvalidArgument("label index outside [0, " + std::to_string(dim) + ")");
  }
  const torch::ScalarType dtype = options.has_dtype() ? options.dtype().toScalarType() : torch::kFloat32;
  return torch::one_hot(indices.to(torch::kInt64), dim).to(dtype);
}

torch::Tensor labels_broadcast(const torch::Tensor& indices, int dim, int64_t height, int64_t width,
                               torch::TensorOptions options) {
  torch::Tensor onehot = labels_onehot(indices, dim, options);
  return onehot.view({onehot.size(0), dim, 1, 1}).expand({onehot.size(0), dim, height, width});
}

ResidualBlockImpl::ResidualBlockImpl(int channels) {
  body_ = register_module(
      "body", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1).bias(false)),
                             instance_norm(channels), nn::ReLU(),
                             nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1).bias(false)),
                             instance_norm(channels)));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) { return x + body_->forward(x); }

GeneratorImpl::GeneratorImpl(GeneratorOptions options) : options_(options) {
  if (options_.resolution % 4 != 0) throw InvalidArgument("generator: resolution must be divisible by 4");
  const int w = options_.width;
  nn::Sequential body;
  body->push_back(conv_block(3 + options_.label_dim, w, 3, 1, 1));
  body->push_back(conv_block(w, 2 * w, 4, 2, 1));
  body->push_back(conv_block(2 * w, 4 * w, 4, 2, 1));
  for (int i = 0; i < options_.res_blocks; ++i) body->push_back(ResidualBlock(4 * w));
  for (int c : {4 * w, 2 * w}) {
    body->push_back(ConvBlock(nn::Sequential(
        nn::ConvTranspose2d(nn::ConvTranspose2dOptions(c, c / 2, 4).stride(2).padding(1).bias(false)),
        instance_norm(c / 2), nn::ReLU())));
  }
  body->push_back(nn::Conv2d(nn::Conv2dOptions(w, 3, 3).padding(1)));
  body->push_back(nn::Tanh());
  body_ = register_module("body", body);
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& images, const torch::Tensor& labels) {
  check_images(images, 3, options_.resolution, "generator");
  if (labels.dim() != 1 || labels.size(0) != images.size(0)) {
    throw InvalidArgument("generator: expected one label per image");
  }
  torch::Tensor cond =
      labels_broadcast(labels, options_.label_dim, images.size(2), images.size(3), images.options());
  return body_->forward(torch::cat({images, cond}, 1));
}

torch::Tensor gen_translate(Generator& g, const torch::Tensor& images, const torch::Tensor& labels) {
  return g->forward(images, labels);
}

torch::Tensor gen_translate(Generator& g, const torch::Tensor& images, const ExpressionLabel& label) {
  if (label.dim() != g->options().label_dim) {
    throw InvalidArgument("generator: label dimension " + std::to_string(label.dim()) + " does not match " +
                          std::to_string(g->options().label_dim));
  }
  return g->forward(images, torch::full({images.size(0)}, label.index(), torch::kInt64));
}

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorOptions options) : options_(options) {
  const int r = options_.resolution;
  if (r < 8 || !std::has_single_bit(static_cast<unsigned>(r))) {
    throw InvalidArgument("discriminator: resolution must be a power of two >= 8");
  }
  stages_ = std::countr_zero(static_cast<unsigned>(r)) - 2;  // down to a 4x4 map
  nn::Sequential trunk;
  int in = 3;
  int out = options_.width;
  for (int i = 0; i < stages_; ++i) {
    trunk->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1)));
    trunk->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.01)));
    in = out;
    out = std::min(out * 2, options_.max_width);
  }
  trunk_ = register_module("trunk", trunk);
  realness_head_ = register_module("realness", nn::Conv2d(nn::Conv2dOptions(in, 1, 3).padding(1).bias(false)));
  class_head_ = register_module("classifier", nn::Conv2d(nn::Conv2dOptions(in, options_.label_dim, 1)));
}

DiscriminatorOutput DiscriminatorImpl::forward(const torch::Tensor& images) {
  check_images(images, 3, options_.resolution, "discriminator");
  torch::Tensor h = trunk_->forward(images);
  return {realness_head_->forward(h), class_head_->forward(h).mean({2, 3})};
}

DiscriminatorOutput disc_forward(Discriminator& d, const torch::Tensor& images) { return d->forward(images); }

FusionNetworkImpl::FusionNetworkImpl(FusionOptions options) : options_(options) {
  const int w = options_.width;
  nn::Sequential body;
  body->push_back(conv_block(6, w, 3, 1, 1));
  body->push_back(conv_block(w, w, 3, 1, 1));
  for (int i = 0; i < 4; ++i) body->push_back(ResidualBlock(w));
  body->push_back(nn::Conv2d(nn::Conv2dOptions(w, 3, 3).padding(1)));
  body->push_back(nn::Tanh());
  body_ = register_module("body", body);
}

torch::Tensor FusionNetworkImpl::forward(const torch::Tensor& global_out, const torch::Tensor& local_out) {
  if (global_out.dim() != 4 || global_out.sizes() != local_out.sizes() || global_out.size(1) != 3) {
    throw InvalidArgument("fusion: global and local outputs must both be (B, 3, H, W) with equal shapes");
  }
  return body_->forward(torch::cat({global_out, local_out}, 1));
}

std::vector<std::string> FusionNetworkImpl::layer_manifest() const {
  std::vector<std::string> lines;
  const std::string w = std::to_string(options_.width);
  for (const auto& child : body_->children()) {
    if (child->as<ResidualBlockImpl>()) {
      lines.push_back("res_block " + w + "->" + w);
    } else if (auto* block = child->as<ConvBlockImpl>()) {
      auto* conv = block->body()->ptr(0)->as<nn::Conv2dImpl>();
      lines.push_back("conv_block " + std::to_string(conv->options.in_channels()) + "->" +
                      std::to_string(conv->options.out_channels()));
    } else if (auto* conv = child->as<nn::Conv2dImpl>()) {
      lines.push_back("conv " + std::to_string(conv->options.in_channels()) + "->" +
                      std::to_string(conv->options.out_channels()));
    } else if (child->as<nn::TanhImpl>()) {
      lines.push_back("tanh");
    }
  }
  return lines;
}

torch::Tensor fuse(FusionNetwork& f, const torch::Tensor& global_out, const torch::Tensor& local_out) {
  return f->forward(global_out, local_out);
}

Generator& Networks::generator(NetId id) {
  if (id == NetId::fusion) throw InvalidArgument("the fusion network has no Generator module");
  return generators[id == NetId::global ? 0 : net_index(id) - 1];
}

void Networks::to(torch::Dtype dtype) {
  for (auto& g : generators) g->to(dtype);
  for (auto& d : discriminators) d->to(dtype);
  fusion->to(dtype);
}

void validate_network_config(const NetworkConfig& c) {
  std::vector<std::string> bad;
  auto is_pow2 = [](int v) { return v > 0 && std::has_single_bit(static_cast<unsigned>(v)); };
  if (!is_pow2(c.resolution) || c.resolution < 32) bad.push_back("resolution");
  if (!is_pow2(c.part_size) || c.part_size < 8) bad.push_back("part_size");
  if (c.label_dim < 2) bad.push_back("label_dim");
  if (c.global_width < 1) bad.push_back("global_width");
  if (c.local_width < 1) bad.push_back("local_width");
  if (c.global_res_blocks < 0) bad.push_back("global_res_blocks");
  if (c.local_res_blocks < 0) bad.push_back("local_res_blocks");
  if (c.disc_width < 1) bad.push_back("disc_width");
  if (c.fusion_width < 1) bad.push_back("fusion_width");
  if (!bad.empty()) {
    std::string msg = "invalid network configuration keys:";
    for (const auto& k : bad) msg += " " + k;
    throw ConfigError(msg);
  }
}

Networks build_networks(const NetworkConfig& c) {
  validate_network_config(c);
  torch::manual_seed(c.seed);
  Networks nets;
  nets.generators[0] = Generator(GeneratorOptions{c.resolution, c.label_dim, c.global_width, c.global_res_blocks});
  for (int i = 1; i < 5; ++i) {
    nets.generators[i] = Generator(GeneratorOptions{c.part_size, c.label_dim, c.local_width, c.local_res_blocks});
  }
  for (NetId id : kAllNets) {
    const int res = is_local(id) ? c.part_size : c.resolution;
    nets.discriminators[net_index(id)] = Discriminator(DiscriminatorOptions{res, c.label_dim, c.disc_width, 128});
  }
  nets.fusion = FusionNetwork(FusionOptions{c.fusion_width});
  return nets;
}

}  // namespace hiergan
