// SPDX-License-Identifier: Apache-2.0
//
// Forward pipeline wiring, alternating D/G updates, end-to-end routing of the
// local and fusion losses into the parser, checkpoints and parser pretraining.
#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hiergan/checkpoint.hpp"
#include "hiergan/losses.hpp"
#include "hiergan/networks.hpp"
#include "hiergan/partops.hpp"
#include "hiergan/segmentation.hpp"
#include "hiergan/toyfaces.hpp"

namespace hiergan {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with explicit, serializable state. Parameters without a gradient are
/// left untouched by step().
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<torch::Tensor> params, AdamOptions options);

  void zero_grad();
  void step();

  std::vector<NamedTensor> state_tensors() const;
  void load_state(const TensorSection& section);
  const AdamOptions& options() const { return options_; }

 private:
  std::vector<torch::Tensor> params_;
  std::vector<torch::Tensor> exp_avg_;
  std::vector<torch::Tensor> exp_avg_sq_;
  std::vector<std::int64_t> steps_;
  AdamOptions options_;
};

struct TrainConfig {
  std::int64_t iterations = 20000;
  int batch = 8;
  AdamOptions optimizer;
  LossWeights weights;
  double temperature = 10.0;
  bool end_to_end = true;
  std::uint64_t seed = 0;
  NetworkConfig networks;
  SegNetworkOptions seg;
  double margin = 0.1;
  PriorFractions priors = default_prior_fractions();
  RegionSet regions = kAllRegionsActive;
  RegionGrouping grouping = default_grouping();
  std::int64_t checkpoint_interval = 1000;
  int d_steps_per_g = 1;
  double seg_lr_scale = 1.0;  // parser step size relative to optimizer.lr
  std::string train_data;
  std::string seg_checkpoint;  // pretrained parser; empty = random init
};

/// Throws ConfigError listing every offending key.
void validate_train_config(const TrainConfig& config);

struct PipelineOptions {
  double temperature = 10.0;
  int part_size = 32;
  PriorBoxes priors{};
  double margin = 0.1;
  RegionSet regions = kAllRegionsActive;
  RegionGrouping grouping = default_grouping();
  bool run_local = true;  // false runs the global branch only
};

PipelineOptions pipeline_options(const TrainConfig& config);

struct PipelineOutput {
  torch::Tensor x_t;       // fused output (undefined when run_local is false)
  torch::Tensor x_global;  // global generator output
  torch::Tensor x_local;   // stitched local outputs
  std::array<torch::Tensor, kNumRegions> translated;  // local generator outputs at part size
  PartBundle parts;        // source parts with boxes
  SoftMaskStack soft;
  RegionMasks masks;
};

/// seg -> tempered softmax -> region masks -> parts -> local generators -> stitch,
/// global generator, fusion.
PipelineOutput forward_pipeline(SegNetwork& seg, Networks& nets, const torch::Tensor& images,
                                const torch::Tensor& targets, const PipelineOptions& options);

/// The image used for evaluation: fused output when available, else the global output.
torch::Tensor final_output(const PipelineOutput& out);

struct TrainState {
  TrainConfig config;
  SegNetwork seg{nullptr};
  Networks nets;
  std::map<std::string, Adam> optimizers;  // "seg", "gen.<net>", "fusion", "disc.<net>"
  std::int64_t iteration = 0;

  bool network_active(NetId id) const;
  bool needs_local_branch() const;
};

/// Builds networks from config.seed and loads config.seg_checkpoint when set.
TrainState make_train_state(const TrainConfig& config);

/// Reconstruction loss per network; undefined entries for inactive networks.
/// Local cycles re-translate the translated parts, the global cycle re-translates
/// x_global and the fusion cycle re-runs the whole pipeline on x_t.
std::array<torch::Tensor, kNumNets> cycle_pass(TrainState& state, const PipelineOutput& forward,
                                               const torch::Tensor& images, const torch::Tensor& sources);

/// One D phase (d_steps_per_g updates) and one G phase. Throws NumericError
/// naming the network and iteration on non-finite losses.
LossReport train_step(TrainState& state, const torch::Tensor& images, const torch::Tensor& sources,
                      const torch::Tensor& targets);

/// Indices and target labels drawn for an iteration; a pure function of (seed, iteration).
struct IterationDraw {
  torch::Tensor indices;  // (batch) int64
  torch::Tensor targets;  // (batch) int64
};
IterationDraw draw_iteration(std::uint64_t seed, std::int64_t iteration, int batch, std::int64_t dataset_size,
                             int label_dim);

struct TrainLoopOptions {
  std::filesystem::path metrics_csv;     // appended to; header written when new
  std::filesystem::path checkpoint_dir;  // empty disables periodic checkpoints
  std::function<void(std::int64_t, const LossReport&)> on_iteration;
};

/// Runs from state.iteration up to config.iterations.
void train(TrainState& state, const SampleBatch& data, const TrainLoopOptions& options);

/// Hash of every config field that affects the computation (not paths or run length).
std::uint64_t config_hash(const TrainConfig& config);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Throws ConfigError when the stored config hash differs from `config`'s.
TrainState load_checkpoint(const std::filesystem::path& path, const TrainConfig& config);

void save_segmentation(SegNetwork& seg, const std::filesystem::path& path,
                       const std::map<std::string, std::string>& metadata = {});
void load_segmentation(SegNetwork& seg, const std::filesystem::path& path);

struct PretrainOptions {
  double fraction = 1.0;
  int epochs = 10;
  int batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  std::int64_t samples_used = 0;
  double train_miou = 0.0;
};

/// Per-pixel cross-entropy on the first ceil(fraction * N) samples.
PretrainResult pretrain_segmentation(SegNetwork& seg, const SampleBatch& data, const PretrainOptions& options);

/// Hard parser labels for a dataset, evaluated in chunks without gradient.
torch::Tensor predict_labels(SegNetwork& seg, const torch::Tensor& images, int chunk = 64);

/// Translates images in chunks without gradient; returns final_output per chunk.
torch::Tensor translate_images(TrainState& state, const torch::Tensor& images, const torch::Tensor& targets,
                               int chunk = 32);

}  // namespace hiergan
