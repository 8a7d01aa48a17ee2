// SPDX-License-Identifier: Apache-2.0
//
// Translation quality metrics on toyfaces: expression editing accuracy from a
// small trained classifier, Frechet distance and identity loss from a small
// trained embedder, parser mIoU, plus the region-ablation and weight-sweep
// harnesses and difference heatmaps.
//
// The reference models are trained here rather than downloaded, so reports use
// "toy-" metric names.
#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "hiergan/config.hpp"
#include "hiergan/metrics.hpp"
#include "hiergan/training.hpp"

namespace hiergan {

struct ClassifierOptions {
  int epochs = 20;
  int batch = 32;
  double lr = 1e-3;
  int width = 16;
  std::uint64_t seed = 0;
};

/// Three stride-2 conv stages, global average pooling, linear head.
class ExpressionClassifierImpl : public torch::nn::Module {
 public:
  ExpressionClassifierImpl(int label_dim, int width);
  torch::Tensor forward(const torch::Tensor& images);  // (B, d) logits
  int label_dim() const { return label_dim_; }
  int width() const { return width_; }

 private:
  int label_dim_;
  int width_;
  torch::nn::Sequential trunk_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ExpressionClassifier);

/// Throws InvalidArgument when the set has fewer than label_dim distinct labels.
ExpressionClassifier train_expression_classifier(const SampleBatch& train, int label_dim,
                                                 const ClassifierOptions& options);
torch::Tensor classify(ExpressionClassifier& classifier, const torch::Tensor& images, int chunk = 128);

/// Fraction of images classified as their target. Empty input -> InvalidArgument.
double eea(ExpressionClassifier& classifier, const torch::Tensor& translated, const torch::Tensor& targets);

inline constexpr int kEmbeddingDim = 64;

struct EmbedderOptions {
  int steps = 600;
  int batch = 32;
  double lr = 1e-3;
  double margin = 0.3;
  int canvas = 64;
  std::uint64_t seed = 0;
};

/// Conv encoder producing 64-d features; embed() L2-normalizes them. An auxiliary
/// expression head is used only during training.
class EmbedderImpl : public torch::nn::Module {
 public:
  explicit EmbedderImpl(int canvas = 64);
  torch::Tensor features(const torch::Tensor& images);  // (B, 64), pre-normalization
  torch::Tensor embed(const torch::Tensor& images);     // (B, 64), unit norm
  torch::Tensor expression_logits(const torch::Tensor& features);
  int canvas() const { return canvas_; }

 private:
  int canvas_;
  torch::nn::Sequential trunk_{nullptr};
  torch::nn::Linear project_{nullptr};
  torch::nn::Linear expression_head_{nullptr};
};
TORCH_MODULE(Embedder);

/// Trained on freshly rendered same-identity pairs (rendered with two expressions) with a
/// margin loss on cosine similarity plus an expression cross-entropy.
Embedder train_embedder(const EmbedderOptions& options);

torch::Tensor embed_features(Embedder& embedder, const torch::Tensor& images, bool normalized, int chunk = 128);

/// Mean (1 - cos) between embeddings of paired originals and translations.
double id_loss(Embedder& embedder, const torch::Tensor& originals, const torch::Tensor& translated);

struct EvalModels {
  ExpressionClassifier classifier{nullptr};
  Embedder embedder{nullptr};
  double classifier_train_accuracy = 0.0;
};

EvalModels build_eval_models(const SampleBatch& train, int label_dim, const EvalOptions& options);
void save_eval_models(const EvalModels& models, const std::filesystem::path& path);
EvalModels load_eval_models(const std::filesystem::path& path);
/// Loads `options.eval_models` when it exists, otherwise trains and (when the path is set) saves.
EvalModels obtain_eval_models(const SampleBatch& train, int label_dim, const EvalOptions& options);

struct EvalReport {
  double eea = 0.0;
  double fd = 0.0;
  double id_loss = 0.0;
  double miou = 0.0;
  std::vector<double> per_class_iou;
  torch::Tensor confusion;                  // (d, d) int64, rows = target
  std::vector<double> preservation_error;  // per target class
  std::int64_t translations = 0;
};

/// 1 - diag / row sum of the confusion matrix (NaN for empty rows).
std::vector<double> expression_preservation_error(const torch::Tensor& confusion);

/// Test image i is translated to every label other than its own.
struct EvalPairs {
  torch::Tensor source_index;  // (M) int64 into the test set
  torch::Tensor targets;       // (M) int64
};
EvalPairs eval_pairs(const torch::Tensor& source_labels, int label_dim);

EvalReport evaluate(TrainState& state, const SampleBatch& test, EvalModels& models, const EvalOptions& options);

/// eval.csv (metric,value rows) and summary.txt.
void write_eval_report(const EvalReport& report, const std::filesystem::path& dir);

/// Trains from scratch with `config` and evaluates on `test`.
struct RunResult {
  EvalReport report;
  double train_seconds = 0.0;
};
RunResult train_and_evaluate(const TrainConfig& config, const SampleBatch& train, const SampleBatch& test,
                             EvalModels& models, const EvalOptions& options, const TrainLoopOptions& loop = {});

/// Excluded regions are switched off (weight path and stitching) before training.
EvalReport ablate_regions(TrainConfig config, const RegionSet& excluded, const SampleBatch& train,
                          const SampleBatch& test, EvalModels& models, const EvalOptions& options);

struct SweepPoint {
  double w_global = 1.0;
  double w_local = 1.0;
  double w_fusion = 1.0;
};
struct SweepRow {
  SweepPoint point;
  double eea = 0.0;
  double fd = 0.0;
};
std::vector<SweepRow> sweep_weights(TrainConfig config, const std::vector<SweepPoint>& grid, std::int64_t iterations,
                                    const SampleBatch& train, const SampleBatch& test, EvalModels& models,
                                    const EvalOptions& options);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);

/// (H, W) in [0, 1] as an 8-bit grayscale PNG.
void write_heatmap_png(const torch::Tensor& heatmap, const std::filesystem::path& path);
/// (3, H, W) in [-1, 1] as an RGB PNG.
void write_image_png(const torch::Tensor& image, const std::filesystem::path& path);

/// input | x_global | x_local | x_t | heatmap(input, final), as one (3, H, 5W) image.
torch::Tensor translation_grid(TrainState& state, const torch::Tensor& image, int target);

}  // namespace hiergan
