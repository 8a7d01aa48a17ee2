// SPDX-License-Identifier: Apache-2.0
#include "hiergan/losses.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>

#include "hiergan/error.hpp"

namespace hiergan {
namespace {

namespace F = torch::nn::functional;

void require_finite(const torch::Tensor& t, const char* who) {
  if (!torch::isfinite(t).all().item<bool>()) throw NumericError(std::string(who) + ": non-finite logits");
}

// log of the clamped sigmoid, computed stably
torch::Tensor clamped_log_sigmoid(const torch::Tensor& x) {
  static const double lo = std::log(kSigmoidClamp);
  static const double hi = std::log1p(-kSigmoidClamp);
  return F::logsigmoid(x).clamp(lo, hi);
}

}  // namespace

void validate_weights(const LossWeights& w) {
  for (double v : {w.adv, w.cls, w.rec, w.global, w.fusion, w.local}) {
    if (!std::isfinite(v) || v < 0.0) throw InvalidArgument("loss weights must be finite and non-negative");
  }
}

torch::Tensor adv_loss_d(const torch::Tensor& realness_real, const torch::Tensor& realness_fake) {
  require_finite(realness_real, "adv_loss_d");
  require_finite(realness_fake, "adv_loss_d");
  // log(1 - s(x)) = log s(-x)
  return -(clamped_log_sigmoid(realness_real).mean() + clamped_log_sigmoid(-realness_fake).mean());
}

torch::Tensor adv_loss_g(const torch::Tensor& realness_fake) {
  require_finite(realness_fake, "adv_loss_g");
  return -clamped_log_sigmoid(realness_fake).mean();
}

torch::Tensor cls_loss(const torch::Tensor& logits, const torch::Tensor& targets) {
  if (logits.dim() != 2 || logits.size(1) < 2) throw InvalidArgument("cls_loss: logits must be (B, d) with d >= 2");
  if (targets.dim() != 1 || targets.size(0) != logits.size(0)) {
    throw InvalidArgument("cls_loss: expected one target per row");
  }
  const int64_t d = logits.size(1);
  if (targets.numel() > 0 && (targets.min().item<int64_t>() < 0 || targets.max().item<int64_t>() >= d)) {
    throw InvalidArgument("cls_loss: target index outside [0, " + std::to_string(d) + ")");
  }
  require_finite(logits, "cls_loss");
  return F::cross_entropy(logits, targets.to(torch::kInt64));
}

torch::Tensor cls_loss(const torch::Tensor& logits, const ExpressionLabel& target) {
  if (logits.dim() != 2 || target.dim() != logits.size(1)) {
    throw InvalidArgument("cls_loss: target index " + std::to_string(target.index()) + " does not fit logits");
  }
  return cls_loss(logits, torch::full({logits.size(0)}, target.index(), torch::kInt64));
}

torch::Tensor rec_loss(const torch::Tensor& original, const torch::Tensor& reconstructed) {
  if (original.sizes() != reconstructed.sizes()) throw InvalidArgument("rec_loss: shape mismatch");
  return (original - reconstructed).abs().mean();
}

LossReport total_loss(const LossComponents& components, const LossWeights& weights) {
  validate_weights(weights);
  LossReport report;
  for (NetId id : kAllNets) {
    const auto& c = components[net_index(id)];
    if (!c) throw InvalidArgument("total_loss: missing loss components for network " + std::string(net_name(id)));
    const double wp = weights.network(id);
    report.per_network[net_index(id)] = *c;
    report.total_d += wp * (weights.adv * c->adv_d + weights.cls * c->cls_d);
    report.total_g += wp * (weights.adv * c->adv_g + weights.cls * c->cls_g + weights.rec * c->rec);
  }
  return report;
}

void write_metrics_header(std::ostream& out) { out << "iter,network,adv_d,adv_g,cls_d,cls_g,rec,total_d,total_g\n"; }

void write_metrics_rows(std::ostream& out, std::int64_t iteration, const LossReport& report) {
  char buf[512];
  for (NetId id : kAllNets) {
    const NetLosses& l = report.per_network[net_index(id)];
    std::snprintf(buf, sizeof(buf), "%lld,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n",
                  static_cast<long long>(iteration), std::string(net_name(id)).c_str(), l.adv_d, l.adv_g, l.cls_d,
                  l.cls_g, l.rec, report.total_d, report.total_g);
    out << buf;
  }
}

}  // namespace hiergan
