// SPDX-License-Identifier: Apache-2.0
//
// Adversarial, classification and reconstruction losses and the weighted
// objective summed over the six networks.
#pragma once

#include <torch/torch.h>

#include <array>
#include <iosfwd>
#include <optional>

#include "hiergan/networks.hpp"

namespace hiergan {

inline constexpr double kSigmoidClamp = 1e-7;

struct LossWeights {
  double adv = 1.0;
  double cls = 1.0;
  double rec = 10.0;
  double global = 1.0;
  double fusion = 1.0;
  double local = 1.0;  // shared by le, re, n, m

  double network(NetId id) const {
    if (id == NetId::global) return global;
    if (id == NetId::fusion) return fusion;
    return local;
  }
};

/// Throws InvalidArgument unless every weight is finite and non-negative.
void validate_weights(const LossWeights& w);

/// -[E log s(real) + E log(1 - s(fake))], sigmoid clamped to [1e-7, 1 - 1e-7].
torch::Tensor adv_loss_d(const torch::Tensor& realness_real, const torch::Tensor& realness_fake);
/// Non-saturating generator loss -E log s(fake).
torch::Tensor adv_loss_g(const torch::Tensor& realness_fake);

/// Mean negative log-likelihood of `targets` (B) under softmax(logits (B, d)).
torch::Tensor cls_loss(const torch::Tensor& logits, const torch::Tensor& targets);
torch::Tensor cls_loss(const torch::Tensor& logits, const ExpressionLabel& target);

/// Mean absolute difference.
torch::Tensor rec_loss(const torch::Tensor& original, const torch::Tensor& reconstructed);

struct NetLosses {
  double adv_d = 0.0;
  double adv_g = 0.0;
  double cls_d = 0.0;
  double cls_g = 0.0;
  double rec = 0.0;

  bool operator==(const NetLosses&) const = default;
};

using LossComponents = std::array<std::optional<NetLosses>, kNumNets>;

struct LossReport {
  std::array<NetLosses, kNumNets> per_network{};
  double total_d = 0.0;
  double total_g = 0.0;

  bool operator==(const LossReport&) const = default;
};

/// total_d = sum_p w_p (w_adv adv_d + w_cls cls_d);
/// total_g = sum_p w_p (w_adv adv_g + w_cls cls_g + w_rec rec).
/// Throws InvalidArgument naming the first network without components.
LossReport total_loss(const LossComponents& components, const LossWeights& weights);

/// CSV metrics log: iter, network, adv_d, adv_g, cls_d, cls_g, rec, total_d, total_g.
void write_metrics_header(std::ostream& out);
void write_metrics_rows(std::ostream& out, std::int64_t iteration, const LossReport& report);

}  // namespace hiergan
