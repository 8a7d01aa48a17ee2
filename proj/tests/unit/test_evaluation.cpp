// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <fstream>

#include "hiergan/error.hpp"
#include "hiergan/evaluation.hpp"
#include "hiergan/png_io.hpp"
#include "test_util.hpp"

using namespace hiergan;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.batch = 2;
  c.iterations = 3;
  c.networks.global_width = 4;
  c.networks.global_res_blocks = 1;
  c.networks.local_width = 4;
  c.networks.local_res_blocks = 1;
  c.networks.disc_width = 8;
  c.networks.fusion_width = 4;
  return c;
}

const SampleBatch& small_train() {
  static const SampleBatch data = stack_samples(render_dataset(0, 40, 64));
  return data;
}

const SampleBatch& small_test() {
  static const SampleBatch data = stack_samples(render_dataset(100000, 70, 64));
  return data;
}

EvalOptions tiny_eval() {
  EvalOptions o;
  o.classifier_epochs = 1;
  o.embedder_steps = 2;
  return o;
}

EvalModels& tiny_models() {
  static EvalModels m = build_eval_models(small_train(), 4, tiny_eval());
  return m;
}

void expect_same_report(const EvalReport& a, const EvalReport& b) {
  EXPECT_EQ(a.eea, b.eea);
  EXPECT_EQ(a.fd, b.fd);
  EXPECT_EQ(a.id_loss, b.id_loss);
  EXPECT_EQ(a.miou, b.miou);
  EXPECT_TRUE(torch::equal(a.confusion, b.confusion));
}

}  // namespace

TEST(Classifier, HeldOutAccuracyOnToyFaces) {
  torch::set_num_threads(1);
  const SampleBatch train = stack_samples(render_dataset(0, 2000, 64));
  const SampleBatch test = stack_samples(render_dataset(100000, 500, 64));
  ClassifierOptions o;
  o.epochs = EvalOptions{}.classifier_epochs;
  ExpressionClassifier c = train_expression_classifier(train, 4, o);
  const double held_out = accuracy(classify(c, test.images), test.labels);
  const double own = accuracy(classify(c, train.images), train.labels);
  EXPECT_GE(held_out, 0.95);
  EXPECT_GE(own, held_out);
}

TEST(Classifier, NeedsEveryLabel) {
  SampleBatch one = small_train();
  one.labels = torch::zeros_like(one.labels);
  EXPECT_THROW(train_expression_classifier(one, 4, ClassifierOptions{}), InvalidArgument);
}

TEST(Eea, ChanceLevelOnNoiseAndShuffleInvariance) {
  torch::manual_seed(0);
  ExpressionClassifier c(4, 8);
  torch::Tensor noise = torch::rand({1000, 3, 64, 64}) * 2 - 1;
  torch::Tensor targets = torch::randint(0, 4, {1000}, torch::kInt64);
  const double v = eea(c, noise, targets);
  EXPECT_NEAR(v, 0.25, 0.05);
  torch::Tensor perm = torch::randperm(1000, torch::kInt64);
  EXPECT_DOUBLE_EQ(eea(c, noise.index_select(0, perm), targets.index_select(0, perm)), v);
  EXPECT_THROW(eea(c, torch::zeros({0, 3, 64, 64}), torch::zeros({0}, torch::kInt64)), InvalidArgument);
}

TEST(Eea, IdentityTranslationEqualsClassifierAccuracy) {
  ExpressionClassifier& c = tiny_models().classifier;
  const SampleBatch& t = small_test();
  EXPECT_DOUBLE_EQ(eea(c, t.images, t.labels), accuracy(classify(c, t.images), t.labels));
}

TEST(Embedder, UnitNormAndIdentityLoss) {
  EmbedderOptions o;
  o.steps = 3;
  o.batch = 4;
  Embedder e = train_embedder(o);
  const SampleBatch& t = small_test();
  torch::Tensor z = embed_features(e, t.images, true);
  EXPECT_EQ(z.size(1), kEmbeddingDim);
  EXPECT_LT((z.norm(2, 1) - 1).abs().max().item<float>(), 1e-5f);
  EXPECT_NEAR(id_loss(e, t.images, t.images), 0.0, 1e-6);
  const double v = id_loss(e, t.images, t.images.flip(0));
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 2.0);
  torch::Tensor za = embed_features(e, t.images, true).to(torch::kFloat64);
  torch::Tensor zb = embed_features(e, t.images.flip(0), true).to(torch::kFloat64);
  double sum = 0.0;
  for (int64_t i = 0; i < za.size(0); ++i) sum += 1.0 - (za[i] * zb[i]).sum().item<double>();
  EXPECT_NEAR(v, sum / za.size(0), 1e-5);
}

TEST(Reports, EvalPairsCoverEveryOtherLabel) {
  torch::Tensor labels = torch::tensor({0, 2, 3}, torch::kInt64);
  EvalPairs p = eval_pairs(labels, 4);
  ASSERT_EQ(p.targets.numel(), 9);
  for (int64_t i = 0; i < 9; ++i) {
    EXPECT_NE(p.targets[i].item<int64_t>(), labels[p.source_index[i]].item<int64_t>());
  }
  EXPECT_EQ((p.source_index == 1).sum().item<int64_t>(), 3);
}

TEST(Reports, PreservationErrorFromConfusion) {
  torch::Tensor cm = torch::tensor({8, 2, 0, 0, 0, 0, 0, 0, 1, 1, 2, 0, 0, 0, 0, 4}, torch::kInt64).view({4, 4});
  const std::vector<double> e = expression_preservation_error(cm);
  EXPECT_DOUBLE_EQ(e[0], 0.2);
  EXPECT_TRUE(std::isnan(e[1]));
  EXPECT_DOUBLE_EQ(e[2], 0.5);
  EXPECT_DOUBLE_EQ(e[3], 0.0);
}

TEST(Reports, EvaluateRespectsRangesAndWritesFiles) {
  const auto dir = testutil::scratch_dir();
  TrainState st = make_train_state(tiny_config());
  train(st, small_train(), {});
  EvalOptions o = tiny_eval();
  const EvalReport r = evaluate(st, small_test(), tiny_models(), o);
  EXPECT_EQ(r.translations, 3 * small_test().images.size(0));
  EXPECT_GE(r.eea, 0.0);
  EXPECT_LE(r.eea, 1.0);
  EXPECT_GE(r.miou, 0.0);
  EXPECT_LE(r.miou, 1.0);
  EXPECT_GE(r.fd, 0.0);
  EXPECT_GE(r.id_loss, 0.0);
  EXPECT_LE(r.id_loss, 2.0);
  EXPECT_EQ(r.confusion.sum().item<int64_t>(), r.translations);
  write_eval_report(r, dir);
  std::ifstream csv(dir / "eval.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "metric,value");
  std::string first;
  std::getline(csv, first);
  EXPECT_EQ(first.rfind("toy-eea,", 0), 0u);
  EXPECT_TRUE(std::filesystem::exists(dir / "summary.txt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "confusion.csv"));
}

TEST(EvalModels, SaveLoadRoundTrip) {
  const auto dir = testutil::scratch_dir();
  EvalModels& m = tiny_models();
  save_eval_models(m, dir / "m.ckpt");
  EvalModels back = load_eval_models(dir / "m.ckpt");
  const SampleBatch& t = small_test();
  EXPECT_TRUE(torch::equal(classify(m.classifier, t.images), classify(back.classifier, t.images)));
  EXPECT_TRUE(torch::equal(embed_features(m.embedder, t.images, false), embed_features(back.embedder, t.images, false)));
  EXPECT_EQ(back.classifier_train_accuracy, m.classifier_train_accuracy);
}

TEST(Harness, ExcludingNothingIsTheStandardRun) {
  torch::set_num_threads(1);
  EvalOptions o = tiny_eval();
  const EvalReport standard = train_and_evaluate(tiny_config(), small_train(), small_test(), tiny_models(), o).report;
  const EvalReport none = ablate_regions(tiny_config(), {false, false, false, false}, small_train(), small_test(),
                                         tiny_models(), o);
  expect_same_report(standard, none);
}

TEST(Harness, ExcludingEverythingFusesGlobalWithZeros) {
  TrainConfig c = tiny_config();
  c.regions = {false, false, false, false};
  TrainState st = make_train_state(c);
  const PipelineOutput out = forward_pipeline(st.seg, st.nets, small_test().images.slice(0, 0, 2),
                                              torch::tensor({1, 2}, torch::kInt64), pipeline_options(c));
  EXPECT_EQ(out.x_local.abs().max().item<float>(), 0.0f);
  EXPECT_TRUE(torch::equal(out.x_t, st.nets.fusion->forward(out.x_global, torch::zeros_like(out.x_global))));
  for (NetId id : {NetId::le, NetId::re, NetId::n, NetId::m}) EXPECT_FALSE(st.network_active(id));
}

TEST(Harness, SingleSweepPointIsOneRun) {
  torch::set_num_threads(1);
  const auto dir = testutil::scratch_dir();
  EvalOptions o = tiny_eval();
  TrainConfig c = tiny_config();
  c.weights.local = 0.5;
  const auto rows = sweep_weights(tiny_config(), {{1.0, 0.5, 1.0}}, c.iterations, small_train(), small_test(),
                                  tiny_models(), o);
  ASSERT_EQ(rows.size(), 1u);
  const EvalReport direct = train_and_evaluate(c, small_train(), small_test(), tiny_models(), o).report;
  EXPECT_EQ(rows[0].eea, direct.eea);
  EXPECT_EQ(rows[0].fd, direct.fd);
  write_sweep_csv(rows, dir / "sweep.csv");
  std::ifstream in(dir / "sweep.csv");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 2);
}

TEST(Images, HeatmapPngAndTranslationGrid) {
  const auto dir = testutil::scratch_dir();
  TrainState st = make_train_state(tiny_config());
  const torch::Tensor img = small_test().images[0];
  torch::Tensor grid = translation_grid(st, img, 2);
  EXPECT_EQ(grid.sizes(), (std::vector<int64_t>{3, 64, 5 * 64}));
  EXPECT_TRUE(torch::equal(grid.slice(2, 0, 64), img));
  write_image_png(grid, dir / "grid.png");
  torch::Tensor heat = diff_heatmap(img, small_test().images[1]);
  write_heatmap_png(heat, dir / "heat.png");
  EXPECT_GT(std::filesystem::file_size(dir / "grid.png"), 0u);
  EXPECT_GT(std::filesystem::file_size(dir / "heat.png"), 0u);
}
