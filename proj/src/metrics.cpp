// SPDX-License-Identifier: Apache-2.0
#include "hiergan/metrics.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>

#include "hiergan/error.hpp"

namespace hiergan {
namespace {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

Matrix to_eigen(const torch::Tensor& t) {
  torch::Tensor d = t.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  Matrix m(d.size(0), d.size(1));
  auto acc = d.accessor<double, 2>();
  for (int64_t i = 0; i < d.size(0); ++i)
    for (int64_t j = 0; j < d.size(1); ++j) m(i, j) = acc[i][j];
  return m;
}

void moments(const Matrix& x, Vector& mean, Matrix& cov) {
  mean = x.colwise().mean();
  const Matrix centred = x.rowwise() - mean.transpose();
  cov = centred.transpose() * centred / static_cast<double>(x.rows() - 1);
  cov.diagonal().array() += 1e-6;
}

Matrix sym_sqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (m + m.transpose()));
  const Vector vals = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

MiouResult miou(const torch::Tensor& pred, const torch::Tensor& truth, int num_classes) {
  if (pred.sizes() != truth.sizes()) throw InvalidArgument("miou: prediction and truth shapes differ");
  if (num_classes < 1) throw InvalidArgument("miou: num_classes must be positive");
  torch::Tensor p = pred.to(torch::kInt64).flatten();
  torch::Tensor t = truth.to(torch::kInt64).flatten();
  MiouResult out;
  out.per_class.assign(num_classes, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  int present = 0;
  for (int k = 0; k < num_classes; ++k) {
    torch::Tensor pk = p == k;
    torch::Tensor tk = t == k;
    const double uni = pk.logical_or(tk).sum().item<double>();
    if (uni == 0.0) continue;
    const double inter = pk.logical_and(tk).sum().item<double>();
    out.per_class[k] = inter / uni;
    sum += out.per_class[k];
    ++present;
  }
  out.miou = present > 0 ? sum / present : 1.0;
  return out;
}

double accuracy(const torch::Tensor& predicted, const torch::Tensor& targets) {
  if (predicted.numel() == 0) throw InvalidArgument("accuracy: empty input");
  if (predicted.sizes() != targets.sizes()) throw InvalidArgument("accuracy: shape mismatch");
  return (predicted.to(torch::kInt64) == targets.to(torch::kInt64)).to(torch::kFloat64).mean().item<double>();
}

torch::Tensor confusion_matrix(const torch::Tensor& predicted, const torch::Tensor& targets, int dim) {
  torch::Tensor cm = torch::zeros({dim, dim}, torch::kInt64);
  auto p = predicted.to(torch::kInt64).contiguous();
  auto t = targets.to(torch::kInt64).contiguous();
  auto pa = p.accessor<int64_t, 1>();
  auto ta = t.accessor<int64_t, 1>();
  auto ca = cm.accessor<int64_t, 2>();
  for (int64_t i = 0; i < p.size(0); ++i) ca[ta[i]][pa[i]] += 1;
  return cm;
}

double frechet_distance(const torch::Tensor& feats_a, const torch::Tensor& feats_b) {
  if (feats_a.dim() != 2 || feats_b.dim() != 2 || feats_a.size(1) != feats_b.size(1)) {
    throw InvalidArgument("frechet_distance: expected (N, D) feature sets of equal D");
  }
  const int64_t dim = feats_a.size(1);
  if (feats_a.size(0) < dim + 1 || feats_b.size(0) < dim + 1) {
    throw InvalidArgument("frechet_distance: each set needs at least " + std::to_string(dim + 1) + " rows");
  }
  Vector mu_a, mu_b;
  Matrix cov_a, cov_b;
  moments(to_eigen(feats_a), mu_a, cov_a);
  moments(to_eigen(feats_b), mu_b, cov_b);
  const Matrix root_a = sym_sqrt(cov_a);
  const Matrix inner = root_a * cov_b * root_a;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double fd = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(fd, 0.0);
}

double cosine_distance_mean(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes() || a.dim() != 2 || a.size(0) == 0) {
    throw InvalidArgument("cosine_distance_mean: expected two non-empty (N, D) tensors of equal shape");
  }
  torch::Tensor da = a.to(torch::kFloat64);
  torch::Tensor db = b.to(torch::kFloat64);
  torch::Tensor cos = ((da * db).sum(1) / (da.norm(2, 1) * db.norm(2, 1)).clamp_min(1e-12)).clamp(-1.0, 1.0);
  return (1.0 - cos).mean().item<double>();
}

torch::Tensor diff_heatmap(const torch::Tensor& original, const torch::Tensor& translated) {
  if (original.sizes() != translated.sizes() || original.dim() != 3) {
    throw InvalidArgument("diff_heatmap: expected two (C, H, W) images of equal shape");
  }
  torch::Tensor diff = (original.to(torch::kFloat64) - translated.to(torch::kFloat64)).abs().mean(0);
  const double lo = diff.min().item<double>();
  const double hi = diff.max().item<double>();
  if (hi <= lo) return torch::zeros_like(diff);
  return (diff - lo) / (hi - lo);
}

}  // namespace hiergan
