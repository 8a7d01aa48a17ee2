// SPDX-License-Identifier: Apache-2.0
//
// hiergan command-line driver. Exit codes: 0 success, 1 invalid input or
// configuration, 2 runtime failure.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hiergan/config.hpp"
#include "hiergan/error.hpp"
#include "hiergan/evaluation.hpp"
#include "hiergan/gradcheck.hpp"
#include "hiergan/metrics.hpp"
#include "hiergan/png_io.hpp"
#include "hiergan/toyfaces.hpp"
#include "hiergan/training.hpp"

namespace fs = std::filesystem;
using namespace hiergan;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "config file (key = value lines)");
  cmd->add_option("--set", c.overrides, "override a config key: key=value")->take_all();
  cmd->add_option("--out", c.out, "output directory");
}

// File first, then --set, then dedicated flags applied by the caller.
RunConfig resolve(const Common& c) {
  RunConfig rc;
  if (!c.config_file.empty()) {
    if (!fs::exists(c.config_file)) throw ConfigError("config file not found: " + c.config_file);
    rc = load_config_file(c.config_file);
  }
  apply_overrides(rc, c.overrides);
  return rc;
}

fs::path output_dir(RunConfig& rc, const Common& c, const std::string& command) {
  if (!c.out.empty()) rc.out = c.out;
  if (rc.out.empty()) {
    const char* env = std::getenv("HIERGAN_OUT");
    if (!env || !*env) throw ConfigError("no output directory: pass --out, set 'out', or set HIERGAN_OUT");
    rc.out = (fs::path(env) / command).string();
  }
  fs::create_directories(rc.out);
  return rc.out;
}

void require_dir(const std::string& path, const std::string& key) {
  if (path.empty()) throw ConfigError("'" + key + "' is not set");
  if (!fs::is_directory(path)) throw ConfigError("'" + key + "': no such directory: " + path);
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " is not set");
  if (!fs::is_regular_file(path)) throw ConfigError(what + ": no such file: " + path);
}

SampleBatch load_data(const std::string& dir) { return stack_samples(read_dataset(dir)); }

// "le,re" -> mask of excluded regions; "none" -> nothing excluded.
RegionSet parse_excluded(const std::string& spec) {
  RegionSet excluded{};
  if (spec == "none" || spec.empty()) return excluded;
  std::string item;
  std::istringstream in(spec);
  while (std::getline(in, item, ',')) {
    try {
      excluded[region_index(parse_region(item))] = true;
    } catch (const InvalidArgument&) {
      throw ConfigError("--exclude: unknown region '" + item + "' (expected le, re, n, m)");
    }
  }
  return excluded;
}

void print_report(const EvalReport& r) {
  std::printf("eea       %.4f\nfd        %.4f\nid_loss   %.4f\nmiou      %.4f\n", r.eea, r.fd, r.id_loss, r.miou);
}

int cmd_gen_data(RunConfig rc, const Common& c) {
  validate_run_config(rc);
  const fs::path out = output_dir(rc, c, "gen-data");
  write_dataset(render_dataset(rc.data.seed, rc.data.n, rc.data.canvas), out);
  write_resolved_config(rc, out);
  std::printf("wrote %d samples to %s\n", rc.data.n, out.c_str());
  return 0;
}

int cmd_pretrain(RunConfig rc, const Common& c) {
  validate_run_config(rc);
  require_dir(rc.train.train_data, "train_data");
  if (!rc.eval.test_data.empty()) require_dir(rc.eval.test_data, "test_data");
  const fs::path out = output_dir(rc, c, "pretrain-seg");
  write_resolved_config(rc, out);
  const SampleBatch train = load_data(rc.train.train_data);
  torch::manual_seed(rc.pretrain.seed);
  SegNetwork seg(rc.train.seg);
  const PretrainResult r = pretrain_segmentation(seg, train, rc.pretrain);
  save_segmentation(seg, out / "seg.ckpt");
  std::ofstream summary(out / "pretrain.txt");
  summary << "samples_used " << r.samples_used << "\ntrain_miou " << r.train_miou << "\n";
  std::printf("samples %lld  train mIoU %.4f\n", static_cast<long long>(r.samples_used), r.train_miou);
  if (!rc.eval.test_data.empty()) {
    const SampleBatch test = load_data(rc.eval.test_data);
    const double m = miou(predict_labels(seg, test.images), test.class_maps, rc.train.seg.num_classes).miou;
    summary << "test_miou " << m << "\n";
    std::printf("held-out mIoU %.4f\n", m);
  }
  return 0;
}

int cmd_train(RunConfig rc, const Common& c, const std::string& end_to_end, bool resume) {
  if (!end_to_end.empty()) set_config_value(rc, "end_to_end", end_to_end);
  validate_run_config(rc);
  require_dir(rc.train.train_data, "train_data");
  if (!rc.train.seg_checkpoint.empty()) require_file(rc.train.seg_checkpoint, "seg_checkpoint");
  const fs::path out = output_dir(rc, c, "train");
  const fs::path ckpt = out / "checkpoints" / "latest.ckpt";
  if (resume) require_file(ckpt.string(), "resume checkpoint");
  const SampleBatch data = load_data(rc.train.train_data);

  TrainState state = resume ? load_checkpoint(ckpt, rc.train) : make_train_state(rc.train);
  if (!resume) fs::remove(out / "metrics.csv");
  write_resolved_config(rc, out);
  TrainLoopOptions loop;
  loop.metrics_csv = out / "metrics.csv";
  loop.checkpoint_dir = out / "checkpoints";
  loop.on_iteration = [](std::int64_t it, const LossReport& r) {
    if (it % 100 == 0) {
      std::printf("iter %6lld  d %.4f  g %.4f\n", static_cast<long long>(it), r.total_d, r.total_g);
      std::fflush(stdout);
    }
  };
  train(state, data, loop);
  std::printf("done at iteration %lld; checkpoint %s\n", static_cast<long long>(state.iteration), ckpt.c_str());
  return 0;
}

int cmd_eval(RunConfig rc, const Common& c, const std::string& checkpoint, int grids,
             const std::string& train_data) {
  require_file(checkpoint, "--checkpoint");
  rc.train = checkpoint_config(checkpoint);
  if (!train_data.empty()) rc.train.train_data = train_data;
  validate_run_config(rc);
  require_dir(rc.eval.test_data, "test_data");
  require_dir(rc.train.train_data, "train_data");
  const fs::path out = output_dir(rc, c, "eval");
  write_resolved_config(rc, out);
  TrainState state = load_checkpoint(checkpoint, rc.train);
  const SampleBatch train = load_data(rc.train.train_data);
  const SampleBatch test = load_data(rc.eval.test_data);
  EvalModels models = obtain_eval_models(train, rc.train.networks.label_dim, rc.eval);
  const EvalReport report = evaluate(state, test, models, rc.eval);
  write_eval_report(report, out);
  const int d = rc.train.networks.label_dim;
  for (int i = 0; i < std::min<int>(grids, test.images.size(0)); ++i) {
    const int target = (test.labels[i].item<int>() + 1) % d;
    write_image_png(translation_grid(state, test.images[i], target), out / ("grid_" + std::to_string(i) + ".png"));
  }
  print_report(report);
  return 0;
}

int cmd_gradcheck(RunConfig rc, const Common& c, const GradCheckOptions& options) {
  validate_run_config(rc);
  const fs::path out = output_dir(rc, c, "gradcheck");
  write_resolved_config(rc, out);
  const GradCheckReport report = run_gradcheck(rc.train, options);
  std::ofstream txt(out / "gradcheck.txt");
  for (const auto& item : report.items) {
    const std::string line = std::string(item.passed ? "PASS " : "FAIL ") + item.name + "  " + item.detail;
    std::printf("%s\n", line.c_str());
    txt << line << "\n";
  }
  return report.passed() ? 0 : 2;
}

int cmd_ablate(RunConfig rc, const Common& c, const std::vector<std::string>& subsets) {
  validate_run_config(rc);
  require_dir(rc.train.train_data, "train_data");
  require_dir(rc.eval.test_data, "test_data");
  if (!rc.train.seg_checkpoint.empty()) require_file(rc.train.seg_checkpoint, "seg_checkpoint");
  std::vector<RegionSet> excluded;
  for (const auto& s : subsets) excluded.push_back(parse_excluded(s));
  const fs::path out = output_dir(rc, c, "ablate");
  write_resolved_config(rc, out);
  const SampleBatch train = load_data(rc.train.train_data);
  const SampleBatch test = load_data(rc.eval.test_data);
  EvalModels models = obtain_eval_models(train, rc.train.networks.label_dim, rc.eval);
  std::ofstream csv(out / "ablation.csv");
  csv << "excluded,eea,fd,id_loss,miou\n";
  for (std::size_t k = 0; k < subsets.size(); ++k) {
    const EvalReport r = ablate_regions(rc.train, excluded[k], train, test, models, rc.eval);
    const std::string name = subsets[k].empty() ? "none" : subsets[k];
    csv << '"' << name << "\"," << r.eea << ',' << r.fd << ',' << r.id_loss << ',' << r.miou << "\n";
    csv.flush();
    std::printf("excluded %-10s eea %.4f  fd %.4f\n", name.c_str(), r.eea, r.fd);
  }
  return 0;
}

int cmd_sweep(RunConfig rc, const Common& c, const std::vector<std::string>& points, std::int64_t iterations) {
  validate_run_config(rc);
  require_dir(rc.train.train_data, "train_data");
  require_dir(rc.eval.test_data, "test_data");
  std::vector<SweepPoint> grid;
  for (const auto& p : points) {
    SweepPoint s;
    if (std::sscanf(p.c_str(), "%lf,%lf,%lf", &s.w_global, &s.w_local, &s.w_fusion) != 3)
      throw ConfigError("--point: expected w_global,w_local,w_fusion, got '" + p + "'");
    grid.push_back(s);
  }
  const fs::path out = output_dir(rc, c, "sweep");
  write_resolved_config(rc, out);
  const SampleBatch train = load_data(rc.train.train_data);
  const SampleBatch test = load_data(rc.eval.test_data);
  EvalModels models = obtain_eval_models(train, rc.train.networks.label_dim, rc.eval);
  const auto rows = sweep_weights(rc.train, grid, iterations > 0 ? iterations : rc.train.iterations, train, test,
                                  models, rc.eval);
  write_sweep_csv(rows, out / "sweep.csv");
  for (const auto& r : rows)
    std::printf("g %.3g l %.3g f %.3g  eea %.4f  fd %.4f\n", r.point.w_global, r.point.w_local, r.point.w_fusion,
                r.eea, r.fd);
  return 0;
}

int cmd_translate(RunConfig rc, const Common& c, const std::string& checkpoint, const std::string& image,
                  std::int64_t sample_seed, const std::string& target_name) {
  require_file(checkpoint, "--checkpoint");
  if (!image.empty()) require_file(image, "--image");
  rc.train = checkpoint_config(checkpoint);
  validate_run_config(rc);
  int target = 0;
  try {
    target = expression_index(parse_expression(target_name));
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("--target: ") + e.what());
  }
  const int res = rc.train.networks.resolution;
  torch::Tensor input;
  if (!image.empty()) {
    const Rgb8Image png = read_png_rgb(image);
    if (png.height != res || png.width != res)
      throw ConfigError("--image must be " + std::to_string(res) + "x" + std::to_string(res));
    input = torch::from_blob(const_cast<std::uint8_t*>(png.pixels.data()), {res, res, 3}, torch::kUInt8)
                .permute({2, 0, 1})
                .to(torch::kFloat32)
                .div(127.5)
                .sub(1.0)
                .contiguous();
  } else {
    input = render_sample(static_cast<std::uint64_t>(sample_seed), res).image;
  }
  const fs::path out = output_dir(rc, c, "translate");
  write_resolved_config(rc, out);
  TrainState state = load_checkpoint(checkpoint, rc.train);
  const torch::Tensor out_image =
      translate_images(state, input.unsqueeze(0), torch::full({1}, target, torch::kInt64))[0];
  write_image_png(out_image, out / "translated.png");
  write_image_png(translation_grid(state, input, target), out / "grid.png");
  write_heatmap_png(diff_heatmap(input, out_image), out / "heatmap.png");
  std::printf("wrote %s\n", (out / "translated.png").c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical facial expression translation on synthetic faces"};
  app.require_subcommand(1);
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "single-threaded, bit-reproducible execution");

  Common gen_c, pre_c, train_c, eval_c, grad_c, abl_c, sweep_c, tr_c;
  auto* gen = app.add_subcommand("gen-data", "render a synthetic dataset");
  add_common(gen, gen_c);
  int gen_n = -1, gen_canvas = -1;
  std::int64_t gen_seed = -1;
  gen->add_option("--n", gen_n, "number of samples");
  gen->add_option("--canvas", gen_canvas, "image side");
  gen->add_option("--seed", gen_seed, "first sample seed");

  auto* pre = app.add_subcommand("pretrain-seg", "pretrain the face parser");
  add_common(pre, pre_c);
  std::string pre_data;
  double pre_fraction = -1;
  int pre_epochs = -1;
  pre->add_option("--data", pre_data, "training dataset directory");
  pre->add_option("--fraction", pre_fraction, "fraction of labelled samples used");
  pre->add_option("--epochs", pre_epochs, "passes over the used samples");

  auto* tr = app.add_subcommand("train", "train the translation networks");
  add_common(tr, train_c);
  std::string tr_data, tr_seg, tr_e2e;
  std::int64_t tr_iters = -1;
  bool tr_resume = false;
  tr->add_option("--data", tr_data, "training dataset directory");
  tr->add_option("--seg", tr_seg, "pretrained parser checkpoint");
  tr->add_option("--iterations", tr_iters, "generator updates");
  tr->add_option("--end-to-end", tr_e2e, "update the parser: true|false");
  tr->add_flag("--resume", tr_resume, "continue from <out>/checkpoints/latest.ckpt");

  auto* ev = app.add_subcommand("eval", "evaluate a trained checkpoint");
  add_common(ev, eval_c);
  std::string ev_ckpt, ev_test, ev_train;
  int ev_grids = 8;
  ev->add_option("--checkpoint", ev_ckpt, "training checkpoint")->required();
  ev->add_option("--data", ev_test, "held-out dataset directory");
  ev->add_option("--train-data", ev_train, "dataset for the evaluation classifier");
  ev->add_option("--grids", ev_grids, "translation grids to write");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(gc, grad_c);
  GradCheckOptions gopt;
  gc->add_option("--coordinates", gopt.coordinates, "coordinates per check");
  gc->add_option("--rel-tol", gopt.rel_tol, "relative tolerance");
  gc->add_option("--samples", gopt.batch, "images in the fixture");

  auto* ab = app.add_subcommand("ablate", "train and evaluate with regions excluded");
  add_common(ab, abl_c);
  std::vector<std::string> ab_sets;
  ab->add_option("--exclude", ab_sets, "regions to exclude, e.g. le,re (repeatable; none = full model)")
      ->required();

  auto* sw = app.add_subcommand("sweep", "train and evaluate over loss-weight settings");
  add_common(sw, sweep_c);
  std::vector<std::string> sw_points;
  std::int64_t sw_iters = -1;
  sw->add_option("--point", sw_points, "w_global,w_local,w_fusion (repeatable)")->required();
  sw->add_option("--iterations", sw_iters, "iterations per point");

  auto* tl = app.add_subcommand("translate", "translate one image");
  add_common(tl, tr_c);
  std::string tl_ckpt, tl_image, tl_target;
  std::int64_t tl_seed = 0;
  tl->add_option("--checkpoint", tl_ckpt, "training checkpoint")->required();
  tl->add_option("--image", tl_image, "input PNG (default: a rendered sample)");
  tl->add_option("--seed", tl_seed, "render the input from this sample seed");
  tl->add_option("--target", tl_target, "target expression name")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    auto run = [&](const Common& c, auto&& body) {
      RunConfig rc = resolve(c);
      rc.deterministic = rc.deterministic || deterministic;
      if (rc.deterministic) {
        torch::set_num_threads(1);
        at::globalContext().setDeterministicAlgorithms(true, false);
      }
      return body(rc);
    };
    if (*gen)
      return run(gen_c, [&](RunConfig rc) {
        if (gen_n >= 0) rc.data.n = gen_n;
        if (gen_canvas >= 0) rc.data.canvas = gen_canvas;
        if (gen_seed >= 0) rc.data.seed = static_cast<std::uint64_t>(gen_seed);
        return cmd_gen_data(rc, gen_c);
      });
    if (*pre)
      return run(pre_c, [&](RunConfig rc) {
        if (!pre_data.empty()) rc.train.train_data = pre_data;
        if (pre_fraction >= 0) rc.pretrain.fraction = pre_fraction;
        if (pre_epochs >= 0) rc.pretrain.epochs = pre_epochs;
        return cmd_pretrain(rc, pre_c);
      });
    if (*tr)
      return run(train_c, [&](RunConfig rc) {
        if (!tr_data.empty()) rc.train.train_data = tr_data;
        if (!tr_seg.empty()) rc.train.seg_checkpoint = tr_seg;
        if (tr_iters >= 0) rc.train.iterations = tr_iters;
        return cmd_train(rc, train_c, tr_e2e, tr_resume);
      });
    if (*ev)
      return run(eval_c, [&](RunConfig rc) {
        if (!ev_test.empty()) rc.eval.test_data = ev_test;
        // rc.train is replaced by the checkpoint's own config; only the data path carries over
        std::string train_data = ev_train;
        if (train_data.empty()) train_data = rc.train.train_data;
        return cmd_eval(rc, eval_c, ev_ckpt, ev_grids, train_data);
      });
    if (*gc) return run(grad_c, [&](RunConfig rc) { return cmd_gradcheck(rc, grad_c, gopt); });
    if (*ab) return run(abl_c, [&](RunConfig rc) { return cmd_ablate(rc, abl_c, ab_sets); });
    if (*sw) return run(sweep_c, [&](RunConfig rc) { return cmd_sweep(rc, sweep_c, sw_points, sw_iters); });
    if (*tl)
      return run(tr_c, [&](RunConfig rc) { return cmd_translate(rc, tr_c, tl_ckpt, tl_image, tl_seed, tl_target); });
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const InvalidArgument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "failed: %s\n", e.what());
    return 2;
  }
  return 1;
}
