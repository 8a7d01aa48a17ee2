// SPDX-License-Identifier: Apache-2.0
#include "hiergan/evaluation.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "hiergan/checkpoint.hpp"
#include "hiergan/error.hpp"
#include "hiergan/png_io.hpp"
#include "hiergan/rng.hpp"

namespace hiergan {
namespace {

namespace fs = std::filesystem;
namespace nn = torch::nn;
namespace F = torch::nn::functional;

nn::Conv2d conv(int in, int out, int kernel, int stride, int padding) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
}

nn::LeakyReLU lrelu() { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); }

std::vector<std::int64_t> shuffled(std::int64_t n, std::uint64_t seed, std::uint64_t salt) {
  std::vector<std::int64_t> order(n);
  for (std::int64_t i = 0; i < n; ++i) order[i] = i;
  SplitMix rng(seed, salt);
  for (std::int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  return order;
}

torch::Tensor evenly_spaced_rows(const torch::Tensor& x, std::int64_t cap) {
  if (x.size(0) <= cap) return x;
  return x.index_select(0, torch::linspace(0, static_cast<double>(x.size(0) - 1), cap).round().to(torch::kInt64));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Expression classifier

ExpressionClassifierImpl::ExpressionClassifierImpl(int label_dim, int width) : label_dim_(label_dim), width_(width) {
  const int w = width;
  trunk_ = register_module("trunk", nn::Sequential(conv(3, w, 4, 2, 1), lrelu(), conv(w, 2 * w, 4, 2, 1), lrelu(),
                                                   conv(2 * w, 4 * w, 4, 2, 1), lrelu(),
                                                   conv(4 * w, 4 * w, 3, 1, 1), lrelu()));
  head_ = register_module("head", nn::Linear(4 * w, label_dim));
}

torch::Tensor ExpressionClassifierImpl::forward(const torch::Tensor& images) {
  return head_->forward(trunk_->forward(images).mean({2, 3}));
}

ExpressionClassifier train_expression_classifier(const SampleBatch& train, int label_dim,
                                                 const ClassifierOptions& options) {
  const std::int64_t distinct = std::get<0>(torch::_unique(train.labels)).numel();
  if (distinct < label_dim) {
    throw InvalidArgument("train_expression_classifier: training set has " + std::to_string(distinct) +
                          " distinct labels, need " + std::to_string(label_dim));
  }
  torch::manual_seed(options.seed);
  ExpressionClassifier net(label_dim, options.width);
  Adam opt(net->parameters(), AdamOptions{options.lr, 0.9, 0.999, 1e-8});
  const std::int64_t n = train.images.size(0);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const auto order = shuffled(n, options.seed, 0xC1A5ULL + epoch);
    for (std::int64_t start = 0; start < n; start += options.batch) {
      const std::int64_t end = std::min(n, start + options.batch);
      const torch::Tensor idx = torch::tensor(std::vector<std::int64_t>(order.begin() + start, order.begin() + end));
      const torch::Tensor loss =
          F::cross_entropy(net->forward(train.images.index_select(0, idx)), train.labels.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  return net;
}

torch::Tensor classify(ExpressionClassifier& classifier, const torch::Tensor& images, int chunk) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> out;
  for (std::int64_t start = 0; start < images.size(0); start += chunk) {
    const std::int64_t end = std::min<std::int64_t>(images.size(0), start + chunk);
    out.push_back(classifier->forward(images.slice(0, start, end)).argmax(1));
  }
  if (out.empty()) return torch::empty({0}, torch::kInt64);
  return torch::cat(out);
}

double eea(ExpressionClassifier& classifier, const torch::Tensor& translated, const torch::Tensor& targets) {
  if (translated.size(0) == 0) throw InvalidArgument("eea: no translated images");
  if (translated.size(0) != targets.size(0)) throw InvalidArgument("eea: one target per image required");
  return accuracy(classify(classifier, translated), targets);
}

// ---------------------------------------------------------------------------
// Embedder

EmbedderImpl::EmbedderImpl(int canvas) : canvas_(canvas) {
  if (canvas % 16 != 0) throw InvalidArgument("embedder: canvas must be divisible by 16");
  trunk_ = register_module("trunk", nn::Sequential(conv(3, 16, 4, 2, 1), lrelu(), conv(16, 32, 4, 2, 1), lrelu(),
                                                   conv(32, 64, 4, 2, 1), lrelu(), conv(64, 64, 4, 2, 1), lrelu()));
  const int side = canvas / 16;
  project_ = register_module("project", nn::Linear(64 * side * side, kEmbeddingDim));
  expression_head_ = register_module("expression", nn::Linear(kEmbeddingDim, kNumExpressions));
}

torch::Tensor EmbedderImpl::features(const torch::Tensor& images) {
  return project_->forward(trunk_->forward(images).flatten(1));
}

torch::Tensor EmbedderImpl::embed(const torch::Tensor& images) {
  return F::normalize(features(images), F::NormalizeFuncOptions().dim(1).eps(1e-12));
}

torch::Tensor EmbedderImpl::expression_logits(const torch::Tensor& f) { return expression_head_->forward(f); }

Embedder train_embedder(const EmbedderOptions& options) {
  torch::manual_seed(options.seed);
  Embedder net(options.canvas);
  Adam opt(net->parameters(), AdamOptions{options.lr, 0.9, 0.999, 1e-8});
  const int b = options.batch;
  const torch::Tensor off_diagonal = 1.0 - torch::eye(b);
  for (int step = 0; step < options.steps; ++step) {
    SplitMix rng(options.seed, 0xE3B0ULL + static_cast<std::uint64_t>(step));
    std::vector<ToySample> first, second;
    std::vector<std::int64_t> first_labels, second_labels;
    for (int i = 0; i < b; ++i) {
      // identities far from the dataset seed ranges
      const std::uint64_t id = 1'000'000'000ULL + rng.below(1'000'000'000ULL);
      const auto src = static_cast<Expression>(rng.below(kNumExpressions));
      const auto tgt = static_cast<Expression>(rng.below(kNumExpressions));
      auto [a, p] = render_translated_pair(id, options.canvas, src, tgt);
      first.push_back(std::move(a));
      second.push_back(std::move(p));
      first_labels.push_back(static_cast<std::int64_t>(src));
      second_labels.push_back(static_cast<std::int64_t>(tgt));
    }
    const torch::Tensor fa = net->features(stack_samples(first).images);
    const torch::Tensor fp = net->features(stack_samples(second).images);
    const torch::Tensor ea = F::normalize(fa, F::NormalizeFuncOptions().dim(1));
    const torch::Tensor ep = F::normalize(fp, F::NormalizeFuncOptions().dim(1));
    const torch::Tensor sim = ea.matmul(ep.t());
    const torch::Tensor pos = sim.diag().unsqueeze(1);
    const torch::Tensor id_term = ((options.margin + sim - pos).clamp_min(0) * off_diagonal).sum() / off_diagonal.sum();
    const torch::Tensor expr_term = F::cross_entropy(net->expression_logits(fa), torch::tensor(first_labels)) +
                                    F::cross_entropy(net->expression_logits(fp), torch::tensor(second_labels));
    const torch::Tensor loss = id_term + 0.5 * expr_term;
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  return net;
}

torch::Tensor embed_features(Embedder& embedder, const torch::Tensor& images, bool normalized, int chunk) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> out;
  for (std::int64_t start = 0; start < images.size(0); start += chunk) {
    const std::int64_t end = std::min<std::int64_t>(images.size(0), start + chunk);
    const torch::Tensor x = images.slice(0, start, end);
    out.push_back(normalized ? embedder->embed(x) : embedder->features(x));
  }
  return torch::cat(out);
}

double id_loss(Embedder& embedder, const torch::Tensor& originals, const torch::Tensor& translated) {
  return cosine_distance_mean(embed_features(embedder, originals, true), embed_features(embedder, translated, true));
}

// ---------------------------------------------------------------------------
// Evaluation models

EvalModels build_eval_models(const SampleBatch& train, int label_dim, const EvalOptions& options) {
  EvalModels m;
  ClassifierOptions co;
  co.epochs = options.classifier_epochs;
  co.seed = options.eval_seed;
  m.classifier = train_expression_classifier(train, label_dim, co);
  m.classifier_train_accuracy = accuracy(classify(m.classifier, train.images), train.labels);
  EmbedderOptions eo;
  eo.steps = options.embedder_steps;
  eo.seed = options.eval_seed;
  eo.canvas = static_cast<int>(train.images.size(2));
  m.embedder = train_embedder(eo);
  return m;
}

void save_eval_models(const EvalModels& models, const fs::path& path) {
  TensorContainer c;
  c.metadata["kind"] = "eval_models";
  c.metadata["label_dim"] = std::to_string(models.classifier->label_dim());
  c.metadata["classifier_width"] = std::to_string(models.classifier->width());
  c.metadata["canvas"] = std::to_string(models.embedder->canvas());
  c.metadata["classifier_train_accuracy"] = fmt(models.classifier_train_accuracy);
  c.sections.push_back({"classifier", module_tensors(*models.classifier)});
  c.sections.push_back({"embedder", module_tensors(*models.embedder)});
  save_container(path, c);
}

EvalModels load_eval_models(const fs::path& path) {
  const TensorContainer c = load_container(path);
  if (!c.metadata.count("kind") || c.metadata.at("kind") != "eval_models") {
    throw IoError(path.string() + " does not hold evaluation models");
  }
  EvalModels m;
  m.classifier = ExpressionClassifier(std::stoi(c.metadata.at("label_dim")), std::stoi(c.metadata.at("classifier_width")));
  m.embedder = Embedder(std::stoi(c.metadata.at("canvas")));
  load_module_tensors(*m.classifier, c.section("classifier"));
  load_module_tensors(*m.embedder, c.section("embedder"));
  m.classifier_train_accuracy = std::stod(c.metadata.at("classifier_train_accuracy"));
  return m;
}

EvalModels obtain_eval_models(const SampleBatch& train, int label_dim, const EvalOptions& options) {
  if (!options.eval_models.empty() && fs::exists(options.eval_models)) return load_eval_models(options.eval_models);
  EvalModels m = build_eval_models(train, label_dim, options);
  if (!options.eval_models.empty()) save_eval_models(m, options.eval_models);
  return m;
}

// ---------------------------------------------------------------------------
// Reports

std::vector<double> expression_preservation_error(const torch::Tensor& confusion) {
  const torch::Tensor cm = confusion.to(torch::kFloat64);
  std::vector<double> out;
  for (std::int64_t k = 0; k < cm.size(0); ++k) {
    const double row = cm[k].sum().item<double>();
    out.push_back(row > 0 ? 1.0 - cm[k][k].item<double>() / row : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

EvalPairs eval_pairs(const torch::Tensor& source_labels, int label_dim) {
  std::vector<std::int64_t> idx, tgt;
  const torch::Tensor labels = source_labels.to(torch::kInt64).contiguous();
  const auto* l = labels.data_ptr<std::int64_t>();
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    for (int t = 0; t < label_dim; ++t) {
      if (t == l[i]) continue;
      idx.push_back(i);
      tgt.push_back(t);
    }
  }
  return {torch::tensor(idx, torch::kInt64), torch::tensor(tgt, torch::kInt64)};
}

EvalReport evaluate(TrainState& state, const SampleBatch& test, EvalModels& models, const EvalOptions& options) {
  const int d = state.config.networks.label_dim;
  const EvalPairs pairs = eval_pairs(test.labels, d);
  const torch::Tensor sources = test.images.index_select(0, pairs.source_index);
  const torch::Tensor translated = translate_images(state, sources, pairs.targets);

  EvalReport r;
  r.translations = translated.size(0);
  const torch::Tensor predicted = classify(models.classifier, translated);
  r.eea = accuracy(predicted, pairs.targets);
  r.confusion = confusion_matrix(predicted, pairs.targets, d);
  r.preservation_error = expression_preservation_error(r.confusion);
  r.fd = frechet_distance(embed_features(models.embedder, evenly_spaced_rows(test.images, options.fd_samples), false),
                          embed_features(models.embedder, evenly_spaced_rows(translated, options.fd_samples), false));
  r.id_loss = id_loss(models.embedder, sources, translated);
  const MiouResult m = miou(predict_labels(state.seg, test.images), test.class_maps, state.seg->num_classes());
  r.miou = m.miou;
  r.per_class_iou = m.per_class;
  return r;
}

void write_eval_report(const EvalReport& r, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "eval.csv");
  if (!csv) throw IoError("cannot write " + (dir / "eval.csv").string());
  csv << "metric,value\n";
  csv << "toy-eea," << fmt(r.eea) << "\n";
  csv << "toy-fd," << fmt(r.fd) << "\n";
  csv << "toy-id-loss," << fmt(r.id_loss) << "\n";
  csv << "toy-miou," << fmt(r.miou) << "\n";
  for (std::size_t k = 0; k < r.per_class_iou.size(); ++k) {
    csv << "toy-iou-" << face_class_name(static_cast<int>(k)) << "," << fmt(r.per_class_iou[k]) << "\n";
  }
  for (std::size_t k = 0; k < r.preservation_error.size(); ++k) {
    csv << "toy-epe-" << expression_name(static_cast<Expression>(k)) << "," << fmt(r.preservation_error[k]) << "\n";
  }
  csv << "translations," << r.translations << "\n";

  std::ofstream cm(dir / "confusion.csv");
  const int d = static_cast<int>(r.confusion.size(0));
  cm << "target";
  for (int p = 0; p < d; ++p) cm << "," << expression_name(static_cast<Expression>(p));
  cm << "\n";
  for (int t = 0; t < d; ++t) {
    cm << expression_name(static_cast<Expression>(t));
    for (int p = 0; p < d; ++p) cm << "," << r.confusion[t][p].item<std::int64_t>();
    cm << "\n";
  }

  std::ofstream txt(dir / "summary.txt");
  txt << "toy-EEA      " << fmt(100.0 * r.eea) << " %\n";
  txt << "toy-FD       " << fmt(r.fd) << "\n";
  txt << "toy-ID loss  " << fmt(r.id_loss) << "\n";
  txt << "toy-mIoU     " << fmt(100.0 * r.miou) << " %\n";
  txt << "translations " << r.translations << "\n";
  txt << "expression preservation error (1 - per-target recall):\n";
  for (std::size_t k = 0; k < r.preservation_error.size(); ++k) {
    txt << "  " << expression_name(static_cast<Expression>(k)) << " " << fmt(r.preservation_error[k]) << "\n";
  }
}

// ---------------------------------------------------------------------------
// Harnesses

RunResult train_and_evaluate(const TrainConfig& config, const SampleBatch& train, const SampleBatch& test,
                             EvalModels& models, const EvalOptions& options, const TrainLoopOptions& loop) {
  TrainState state = make_train_state(config);
  const auto t0 = std::chrono::steady_clock::now();
  hiergan::train(state, train, loop);
  RunResult out;
  out.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.report = evaluate(state, test, models, options);
  return out;
}

EvalReport ablate_regions(TrainConfig config, const RegionSet& excluded, const SampleBatch& train,
                          const SampleBatch& test, EvalModels& models, const EvalOptions& options) {
  for (int r = 0; r < kNumRegions; ++r) {
    if (excluded[r]) config.regions[r] = false;
  }
  return train_and_evaluate(config, train, test, models, options).report;
}

std::vector<SweepRow> sweep_weights(TrainConfig config, const std::vector<SweepPoint>& grid, std::int64_t iterations,
                                    const SampleBatch& train, const SampleBatch& test, EvalModels& models,
                                    const EvalOptions& options) {
  std::vector<SweepRow> rows;
  config.iterations = iterations;
  for (const SweepPoint& p : grid) {
    config.weights.global = p.w_global;
    config.weights.local = p.w_local;
    config.weights.fusion = p.w_fusion;
    const EvalReport r = train_and_evaluate(config, train, test, models, options).report;
    rows.push_back({p, r.eea, r.fd});
  }
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "w_global,w_local,w_fusion,eea,fd\n";
  for (const auto& r : rows) {
    out << fmt(r.point.w_global) << "," << fmt(r.point.w_local) << "," << fmt(r.point.w_fusion) << "," << fmt(r.eea)
        << "," << fmt(r.fd) << "\n";
  }
}

void write_heatmap_png(const torch::Tensor& heatmap, const fs::path& path) {
  const torch::Tensor q = heatmap.detach().to(torch::kFloat32).clamp(0, 1).mul(255).round().to(torch::kUInt8).contiguous();
  write_png_gray(path, static_cast<int>(q.size(0)), static_cast<int>(q.size(1)),
                 {q.data_ptr<std::uint8_t>(), q.data_ptr<std::uint8_t>() + q.numel()});
}

void write_image_png(const torch::Tensor& image, const fs::path& path) {
  write_png_rgb(path, Rgb8Image{static_cast<int>(image.size(1)), static_cast<int>(image.size(2)), image_to_rgb8(image)});
}

torch::Tensor translation_grid(TrainState& state, const torch::Tensor& image, int target) {
  torch::NoGradGuard guard;
  PipelineOptions opts = pipeline_options(state.config);
  opts.run_local = state.needs_local_branch();
  const torch::Tensor x = image.unsqueeze(0);
  const PipelineOutput out =
      forward_pipeline(state.seg, state.nets, x, torch::full({1}, target, torch::kInt64), opts);
  const torch::Tensor local = out.x_local.defined() ? out.x_local[0] : torch::zeros_like(image);
  const torch::Tensor final_image = state.network_active(NetId::fusion) ? out.x_t[0] : out.x_global[0];
  const torch::Tensor heat = diff_heatmap(image, final_image).to(torch::kFloat32).mul(2).sub(1);
  return torch::cat({image, out.x_global[0], local, final_image, heat.unsqueeze(0).expand({3, -1, -1})}, 2);
}

}  // namespace hiergan
