// SPDX-License-Identifier: Apache-2.0
//
// Procedural cartoon faces with exact per-pixel part labels and an expression
// label. Every sample is a pure function of (seed, canvas, expression).
#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hiergan {

enum class Expression : int { neutral = 0, happy = 1, sad = 2, angry = 3 };
inline constexpr int kNumExpressions = 4;

std::string_view expression_name(Expression e);
Expression parse_expression(std::string_view name);
inline Expression expression_from_index(int k) { return static_cast<Expression>(k); }
inline int expression_index(Expression e) { return static_cast<int>(e); }

/// Semantic classes of the toy face parser.
enum class FaceClass : std::uint8_t {
  background = 0,
  skin = 1,
  left_eye = 2,
  left_brow = 3,
  right_eye = 4,
  right_brow = 5,
  nose = 6,
  upper_lip = 7,
  inner_mouth = 8,
  lower_lip = 9,
};
inline constexpr int kNumFaceClasses = 10;

std::string_view face_class_name(int k);

/// Geometry and appearance of one face. Lengths are in pixels of the canvas.
struct FaceParams {
  std::uint64_t seed = 0;
  int canvas = 64;
  Expression expression = Expression::neutral;
  std::array<double, 2> face_center{};  // (row, col)
  std::array<double, 2> face_axes{};    // (vertical, horizontal) semi-axes
  std::array<double, 3> skin_tone{};
  std::array<double, 3> hair_tone{};
  std::array<double, 3> background{};
  double eye_gap = 0.0;
  double eye_half_width = 0.0;
  double mouth_half_width = 0.0;
  double brow_angle = 0.0;        // > 0 raises the inner brow ends
  double mouth_curvature = 0.0;   // > 0 lifts the mouth corners
  double eye_openness = 1.0;      // (0, 1]
  double rotation = 0.0;          // radians, [-0.15, 0.15]

  bool operator==(const FaceParams&) const = default;
};

struct ToySample {
  torch::Tensor image;      // (3, S, S) float32 in [-1, 1], multiples of 1/127.5
  torch::Tensor class_map;  // (S, S) uint8
  Expression label = Expression::neutral;
  FaceParams params;
};

/// Draws the face parameters for a seed. Identity attributes depend on the seed
/// only; brow_angle, mouth_curvature and eye_openness also depend on the expression.
FaceParams make_face_params(std::uint64_t seed, int canvas, std::optional<Expression> expression);

/// Rasterizes the face described by `params`.
ToySample render_face(const FaceParams& params);

/// Throws InvalidArgument when canvas < 32. Without an expression one is drawn
/// uniformly from the seed.
ToySample render_sample(std::uint64_t seed, int canvas = 64,
                        std::optional<Expression> expression = std::nullopt);

/// Same identity rendered with two expressions. Evaluation-only oracle.
std::pair<ToySample, ToySample> render_translated_pair(std::uint64_t seed, int canvas,
                                                       Expression source, Expression target);

/// Writes `manifest.csv`, `img/NNNNNN.png` and `seg/NNNNNN.bin` under `dir` and
/// returns the manifest path.
std::filesystem::path write_dataset(const std::vector<ToySample>& samples,
                                    const std::filesystem::path& dir);

/// Reads a dataset written by write_dataset. Errors name the offending file.
std::vector<ToySample> read_dataset(const std::filesystem::path& dir);

/// Contiguous tensors for a sample range.
struct SampleBatch {
  torch::Tensor images;      // (N, 3, S, S) float32
  torch::Tensor class_maps;  // (N, S, S) int64
  torch::Tensor labels;      // (N) int64
};

SampleBatch stack_samples(const std::vector<ToySample>& samples);

/// Renders `n` samples with seeds first_seed, first_seed + 1, ...
std::vector<ToySample> render_dataset(std::uint64_t first_seed, int n, int canvas);

/// Quantizes an image in [-1, 1] to interleaved 8-bit RGB.
std::vector<std::uint8_t> image_to_rgb8(const torch::Tensor& image);

}  // namespace hiergan
