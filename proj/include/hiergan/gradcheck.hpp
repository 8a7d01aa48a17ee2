// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks of the differentiable pipeline, run in float64:
// local and fusion losses reach the parser parameters with correct gradients,
// the global loss does not reach them at all, and the resize and fusion
// backward passes are right.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hiergan/training.hpp"

namespace hiergan {

struct GradCheckOptions {
  int coordinates = 10;
  double rel_tol = 0.02;
  double step = 1e-5;
  double abs_tol_resize = 1e-4;
  int batch = 2;
  std::uint64_t seed = 0;
};

struct CoordinateCheck {
  std::string param;
  std::int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckItem {
  std::string name;
  bool passed = false;
  std::string detail;
  std::vector<CoordinateCheck> coordinates;
};

struct GradCheckReport {
  std::vector<GradCheckItem> items;
  bool passed() const;
  const GradCheckItem& item(const std::string& name) const;
};

/// |a - b| / max(|a|, |b|); 0 when both are 0.
double relative_error(double a, double b);

/// Items: seg_mask, seg_fusion, seg_local, seg_global_zero, resize_backward, fusion_inputs.
GradCheckReport run_gradcheck(const TrainConfig& config, const GradCheckOptions& options);

}  // namespace hiergan
