// SPDX-License-Identifier: Apache-2.0
#include "hiergan/toyfaces.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "hiergan/error.hpp"
#include "hiergan/png_io.hpp"
#include "hiergan/rng.hpp"

namespace hiergan {
namespace {

namespace fs = std::filesystem;

using Stream = SplitMix;

constexpr std::uint64_t kIdentitySalt = 1;
constexpr std::uint64_t kExpressionSalt = 2;
constexpr std::uint64_t kLabelSalt = 3;

struct ExpressionRanges {
  double brow_lo, brow_hi;
  double curv_lo, curv_hi;
  double open_lo, open_hi;
};

ExpressionRanges ranges_for(Expression e) {
  switch (e) {
    case Expression::neutral: return {-0.05, 0.05, -0.10, 0.10, 0.75, 0.90};
    case Expression::happy:   return {0.00, 0.10, 0.60, 1.00, 0.45, 0.60};
    case Expression::sad:     return {0.25, 0.40, -1.00, -0.60, 0.60, 0.72};
    case Expression::angry:   return {-0.40, -0.25, -0.35, -0.20, 0.90, 1.00};
  }
  throw InvalidArgument("unknown expression");
}

// Colors are linear [0,1]; lighting adds a mild top-to-bottom gradient.
struct Rgb {
  double r, g, b;
};

Rgb scale(const std::array<double, 3>& c, double k) { return {c[0] * k, c[1] * k, c[2] * k}; }

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Distance from (u, v) to the segment centred at (cu, cv) with half-length `len`
// along direction (du, dv).
double segment_distance(double u, double v, double cu, double cv, double du, double dv, double len) {
  const double pu = u - cu;
  const double pv = v - cv;
  const double t = std::clamp(pu * du + pv * dv, -len, len);
  const double qu = pu - t * du;
  const double qv = pv - t * dv;
  return std::sqrt(qu * qu + qv * qv);
}

std::string stem_for(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06zu", i);
  return buf;
}

}  // namespace

std::string_view expression_name(Expression e) {
  switch (e) {
    case Expression::neutral: return "neutral";
    case Expression::happy: return "happy";
    case Expression::sad: return "sad";
    case Expression::angry: return "angry";
  }
  return "unknown";
}

Expression parse_expression(std::string_view name) {
  for (int k = 0; k < kNumExpressions; ++k) {
    if (expression_name(expression_from_index(k)) == name) return expression_from_index(k);
  }
  throw InvalidArgument("unknown expression '" + std::string(name) + "'");
}

std::string_view face_class_name(int k) {
  static constexpr std::string_view names[kNumFaceClasses] = {
      "background", "skin", "left_eye", "left_brow", "right_eye",
      "right_brow", "nose", "upper_lip", "inner_mouth", "lower_lip"};
  if (k < 0 || k >= kNumFaceClasses) return "unknown";
  return names[k];
}

FaceParams make_face_params(std::uint64_t seed, int canvas, std::optional<Expression> expression) {
  if (canvas < 32) throw InvalidArgument("canvas must be >= 32, got " + std::to_string(canvas));
  FaceParams p;
  p.seed = seed;
  p.canvas = canvas;
  if (expression) {
    p.expression = *expression;
  } else {
    Stream label_stream(seed, kLabelSalt);
    p.expression = expression_from_index(static_cast<int>(label_stream.next() % kNumExpressions));
  }

  const double s = canvas / 64.0;
  Stream id(seed, kIdentitySalt);
  p.face_center = {canvas / 2.0 + id.uniform(-1.5, 1.5) * s, canvas / 2.0 + id.uniform(-1.5, 1.5) * s};
  p.face_axes = {id.uniform(24.0, 27.0) * s, id.uniform(19.0, 22.0) * s};
  p.skin_tone = {id.uniform(0.55, 0.95), 0.0, 0.0};
  p.skin_tone[1] = p.skin_tone[0] * id.uniform(0.68, 0.82);
  p.skin_tone[2] = p.skin_tone[0] * id.uniform(0.50, 0.68);
  const double hair = id.uniform(0.05, 0.35);
  p.hair_tone = {hair, hair * id.uniform(0.6, 0.9), hair * id.uniform(0.3, 0.7)};
  p.background = {id.uniform(0.1, 0.9), id.uniform(0.1, 0.9), id.uniform(0.1, 0.9)};
  p.eye_gap = id.uniform(19.0, 23.0) * s;
  p.eye_half_width = id.uniform(4.0, 5.0) * s;
  p.mouth_half_width = id.uniform(7.0, 9.0) * s;
  p.rotation = id.uniform(-0.15, 0.15);

  const ExpressionRanges r = ranges_for(p.expression);
  Stream ex(seed, kExpressionSalt + 16 * static_cast<std::uint64_t>(expression_index(p.expression)));
  p.brow_angle = ex.uniform(r.brow_lo, r.brow_hi);
  p.mouth_curvature = ex.uniform(r.curv_lo, r.curv_hi);
  p.eye_openness = ex.uniform(r.open_lo, r.open_hi);
  return p;
}

ToySample render_face(const FaceParams& p) {
  const int n = p.canvas;
  const double s = n / 64.0;
  const double cos_r = std::cos(p.rotation);
  const double sin_r = std::sin(p.rotation);

  const double eye_v = -6.5 * s;
  const double eye_half_height = std::max(2.8 * s * p.eye_openness, 1.0);
  const double iris_radius = std::min(eye_half_height, 1.8 * s);
  const double brow_v = eye_v - 5.0 * s;
  const double brow_half_len = 5.0 * s;
  const double brow_half_thick = std::max(1.2 * s, 1.0);
  const double nose_v = 3.0 * s;
  const double nose_axes[2] = {5.0 * s, 2.8 * s};  // (vertical, horizontal)
  const double mouth_v = 13.0 * s;
  const double mouth_gap = (1.2 + 1.6 * std::max(p.mouth_curvature, 0.0)) * s;
  const double upper_lip = std::max(1.7 * s, 1.5);
  const double lower_lip = std::max(2.1 * s, 1.5);

  const Rgb lip_color{p.skin_tone[0] * 0.85 + 0.12, p.skin_tone[1] * 0.45, p.skin_tone[2] * 0.45};
  const Rgb inner_color{0.22, 0.05, 0.06};
  const Rgb sclera{0.95, 0.95, 0.93};
  const Rgb iris{0.12, 0.08, 0.05};

  torch::Tensor class_map = torch::zeros({n, n}, torch::kUInt8);
  auto cls = class_map.accessor<std::uint8_t, 2>();
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(n) * n * 3);

  for (int row = 0; row < n; ++row) {
    for (int col = 0; col < n; ++col) {
      const double dy = row + 0.5 - p.face_center[0];
      const double dx = col + 0.5 - p.face_center[1];
      // face-local coordinates, v points down
      const double u = cos_r * dx + sin_r * dy;
      const double v = -sin_r * dx + cos_r * dy;

      FaceClass k = FaceClass::background;
      Rgb color{};
      const double light = 1.0 - 0.12 * (dy / p.face_axes[0]);

      const double e = (v / p.face_axes[0]) * (v / p.face_axes[0]) + (u / p.face_axes[1]) * (u / p.face_axes[1]);
      if (e <= 1.0) {
        k = FaceClass::skin;
        color = scale(p.skin_tone, light);

        const double nv = (v - nose_v) / nose_axes[0];
        const double nu = u / nose_axes[1];
        if (nv * nv + nu * nu <= 1.0) {
          k = FaceClass::nose;
          color = scale(p.skin_tone, light * 0.8);
        }

        // mouth: a curved centre line with lips above and below an inner gap
        const double t = u / p.mouth_half_width;
        if (std::abs(t) < 1.0) {
          const double taper = std::sqrt(1.0 - t * t);
          const double centre = mouth_v - p.mouth_curvature * 6.0 * s * (t * t - 1.0 / 3.0);
          const double off = v - centre;
          const double half_gap = 0.5 * mouth_gap * taper;
          if (std::abs(off) < half_gap) {
            k = FaceClass::inner_mouth;
            color = inner_color;
          } else if (off < 0 && off >= -half_gap - upper_lip * taper) {
            k = FaceClass::upper_lip;
            color = {lip_color.r * light, lip_color.g * light, lip_color.b * light};
          } else if (off > 0 && off <= half_gap + lower_lip * taper) {
            k = FaceClass::lower_lip;
            color = {lip_color.r * light * 0.9, lip_color.g * light * 0.9, lip_color.b * light * 0.9};
          }
        }

        for (int side = 0; side < 2; ++side) {
          // side 0 sits at smaller column (image left)
          const double cu = (side == 0 ? -0.5 : 0.5) * p.eye_gap;
          const double inward = side == 0 ? 1.0 : -1.0;
          const double eu = (u - cu) / p.eye_half_width;
          const double ev = (v - eye_v) / eye_half_height;
          if (eu * eu + ev * ev <= 1.0) {
            k = side == 0 ? FaceClass::left_eye : FaceClass::right_eye;
            const double ru = u - cu;
            const double rv = v - eye_v;
            color = (ru * ru + rv * rv <= iris_radius * iris_radius) ? iris : sclera;
          }
          // brow: thick segment, inner end raised when brow_angle > 0
          const double du = inward * std::cos(p.brow_angle);
          const double dv = -std::sin(p.brow_angle);
          if (segment_distance(u, v, cu, brow_v, du, dv, brow_half_len) <= brow_half_thick) {
            k = side == 0 ? FaceClass::left_brow : FaceClass::right_brow;
            color = scale(p.hair_tone, 1.0);
          }
        }
      } else {
        const double g = 0.85 + 0.3 * (row + 0.5) / n;
        color = scale(p.background, g);
      }

      cls[row][col] = static_cast<std::uint8_t>(k);
      std::uint8_t* px = rgb.data() + (static_cast<std::size_t>(row) * n + col) * 3;
      px[0] = quantize(color.r);
      px[1] = quantize(color.g);
      px[2] = quantize(color.b);
    }
  }

  // Guarantee every part class is present: thin features can vanish at small
  // openness, so stamp the pixel nearest to the part centre when needed.
  std::array<int, kNumFaceClasses> counts{};
  for (int row = 0; row < n; ++row)
    for (int col = 0; col < n; ++col) ++counts[cls[row][col]];
  auto stamp = [&](FaceClass k, double u, double v, const Rgb& color) {
    const double dx = cos_r * u - sin_r * v;
    const double dy = sin_r * u + cos_r * v;
    const int col = std::clamp(static_cast<int>(std::floor(p.face_center[1] + dx)), 0, n - 1);
    const int row = std::clamp(static_cast<int>(std::floor(p.face_center[0] + dy)), 0, n - 1);
    cls[row][col] = static_cast<std::uint8_t>(k);
    std::uint8_t* px = rgb.data() + (static_cast<std::size_t>(row) * n + col) * 3;
    px[0] = quantize(color.r);
    px[1] = quantize(color.g);
    px[2] = quantize(color.b);
  };
  const double mouth_centre = mouth_v + p.mouth_curvature * s;
  if (counts[static_cast<int>(FaceClass::left_eye)] == 0) stamp(FaceClass::left_eye, -0.5 * p.eye_gap, eye_v, iris);
  if (counts[static_cast<int>(FaceClass::right_eye)] == 0) stamp(FaceClass::right_eye, 0.5 * p.eye_gap, eye_v, iris);
  if (counts[static_cast<int>(FaceClass::inner_mouth)] == 0) stamp(FaceClass::inner_mouth, 0.0, mouth_centre, inner_color);
  if (counts[static_cast<int>(FaceClass::upper_lip)] == 0) stamp(FaceClass::upper_lip, 0.0, mouth_centre - mouth_gap, lip_color);
  if (counts[static_cast<int>(FaceClass::lower_lip)] == 0) stamp(FaceClass::lower_lip, 0.0, mouth_centre + mouth_gap, lip_color);

  ToySample sample;
  sample.params = p;
  sample.label = p.expression;
  sample.class_map = class_map;
  sample.image = torch::from_blob(rgb.data(), {n, n, 3}, torch::kUInt8)
                     .permute({2, 0, 1})
                     .to(torch::kFloat32)
                     .div(127.5)
                     .sub(1.0)
                     .contiguous();
  return sample;
}

ToySample render_sample(std::uint64_t seed, int canvas, std::optional<Expression> expression) {
  return render_face(make_face_params(seed, canvas, expression));
}

std::pair<ToySample, ToySample> render_translated_pair(std::uint64_t seed, int canvas, Expression source,
                                                       Expression target) {
  return {render_sample(seed, canvas, source), render_sample(seed, canvas, target)};
}

std::vector<ToySample> render_dataset(std::uint64_t first_seed, int n, int canvas) {
  std::vector<ToySample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(render_sample(first_seed + i, canvas));
  return out;
}

std::vector<std::uint8_t> image_to_rgb8(const torch::Tensor& image) {
  torch::Tensor q = image.detach().to(torch::kFloat32).add(1.0).mul(127.5).round().clamp(0, 255)
                        .to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  return {q.data_ptr<std::uint8_t>(), q.data_ptr<std::uint8_t>() + q.numel()};
}

fs::path write_dataset(const std::vector<ToySample>& samples, const fs::path& dir) {
  fs::create_directories(dir / "img");
  fs::create_directories(dir / "seg");
  const fs::path manifest = dir / "manifest.csv";
  std::ofstream out(manifest, std::ios::binary);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << "file,label,seed\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ToySample& s = samples[i];
    const std::string stem = stem_for(i);
    const int n = static_cast<int>(s.class_map.size(0));
    write_png_rgb(dir / "img" / (stem + ".png"), Rgb8Image{n, n, image_to_rgb8(s.image)});

    const fs::path seg_path = dir / "seg" / (stem + ".bin");
    std::ofstream seg(seg_path, std::ios::binary);
    if (!seg) throw IoError("cannot write " + seg_path.string());
    torch::Tensor cm = s.class_map.to(torch::kUInt8).contiguous();
    seg.write(reinterpret_cast<const char*>(cm.data_ptr<std::uint8_t>()), cm.numel());
    if (!seg) throw IoError("write failed: " + seg_path.string());

    out << stem << ',' << expression_name(s.label) << ',' << s.params.seed << '\n';
  }
  if (!out) throw IoError("write failed: " + manifest.string());
  return manifest;
}

std::vector<ToySample> read_dataset(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.csv";
  std::ifstream in(manifest);
  if (!in) throw IoError("missing manifest: " + manifest.string());
  std::string line;
  if (!std::getline(in, line) || line != "file,label,seed") {
    throw IoError("corrupt manifest header: " + manifest.string());
  }
  std::vector<ToySample> samples;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string stem, label, seed_text;
    if (!std::getline(ss, stem, ',') || !std::getline(ss, label, ',') || !std::getline(ss, seed_text)) {
      throw IoError("corrupt manifest line " + std::to_string(line_no) + ": " + manifest.string());
    }
    ToySample s;
    std::uint64_t seed = 0;
    try {
      s.label = parse_expression(label);
      std::size_t used = 0;
      seed = std::stoull(seed_text, &used);
      if (used != seed_text.size()) throw std::invalid_argument(seed_text);
    } catch (const std::exception&) {
      throw IoError("corrupt manifest line " + std::to_string(line_no) + ": " + manifest.string());
    }

    const fs::path img_path = dir / "img" / (stem + ".png");
    const fs::path seg_path = dir / "seg" / (stem + ".bin");
    if (!fs::exists(img_path)) throw IoError("missing file listed in manifest: " + img_path.string());
    if (!fs::exists(seg_path)) throw IoError("missing file listed in manifest: " + seg_path.string());

    Rgb8Image img = read_png_rgb(img_path);
    if (img.height != img.width) throw IoError("non-square image: " + img_path.string());
    const int n = img.height;
    s.image = torch::from_blob(img.pixels.data(), {n, n, 3}, torch::kUInt8)
                  .permute({2, 0, 1})
                  .to(torch::kFloat32)
                  .div(127.5)
                  .sub(1.0)
                  .contiguous();

    std::ifstream seg(seg_path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(seg)), std::istreambuf_iterator<char>());
    if (bytes.size() != static_cast<std::size_t>(n) * n) {
      throw IoError("class map has wrong size: " + seg_path.string());
    }
    s.class_map = torch::from_blob(bytes.data(), {n, n}, torch::kUInt8).clone();
    if (s.class_map.max().item<int>() >= kNumFaceClasses) {
      throw IoError("class index out of range in " + seg_path.string());
    }
    s.params = make_face_params(seed, n, s.label);
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw IoError("dataset is empty: " + manifest.string());
  return samples;
}

SampleBatch stack_samples(const std::vector<ToySample>& samples) {
  if (samples.empty()) throw InvalidArgument("stack_samples: no samples");
  std::vector<torch::Tensor> images, maps;
  std::vector<std::int64_t> labels;
  images.reserve(samples.size());
  maps.reserve(samples.size());
  for (const ToySample& s : samples) {
    images.push_back(s.image);
    maps.push_back(s.class_map.to(torch::kInt64));
    labels.push_back(expression_index(s.label));
  }
  return {torch::stack(images), torch::stack(maps), torch::tensor(labels, torch::kInt64)};
}

}  // namespace hiergan
