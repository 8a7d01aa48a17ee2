// SPDX-License-Identifier: Apache-2.0
#include "hiergan/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>

#include "hiergan/error.hpp"
#include "hiergan/rng.hpp"

namespace hiergan {
namespace {

using Objective = std::function<torch::Tensor()>;

struct Geometry {
  std::vector<int> boxes;
  bool operator==(const Geometry&) const = default;
};

void record(Geometry& g, const PipelineOutput& out) {
  for (const auto& per_region : out.parts.boxes) {
    for (const CropBox& b : per_region) {
      g.boxes.insert(g.boxes.end(), {b.top, b.left, b.height, b.width, b.valid ? 1 : 0});
    }
  }
}

struct Fixture {
  TrainState state;
  torch::Tensor images;
  torch::Tensor sources;
  torch::Tensor targets;
  PipelineOptions opts;
  Geometry geometry;  // crop boxes seen by the last objective evaluation
};

torch::Tensor generator_side(Fixture& f, NetId id, const torch::Tensor& fake, const torch::Tensor& rec) {
  const LossWeights& w = f.state.config.weights;
  const DiscriminatorOutput d = f.state.nets.discriminator(id)->forward(fake);
  return w.adv * adv_loss_g(d.realness) + w.cls * cls_loss(d.logits, f.targets) + w.rec * rec;
}

torch::Tensor fusion_objective(Fixture& f) {
  f.geometry = {};
  const PipelineOutput fwd = forward_pipeline(f.state.seg, f.state.nets, f.images, f.targets, f.opts);
  const PipelineOutput back = forward_pipeline(f.state.seg, f.state.nets, fwd.x_t, f.sources, f.opts);
  record(f.geometry, fwd);
  record(f.geometry, back);
  return generator_side(f, NetId::fusion, fwd.x_t, rec_loss(f.images, back.x_t));
}

torch::Tensor local_objective(Fixture& f) {
  f.geometry = {};
  const PipelineOutput fwd = forward_pipeline(f.state.seg, f.state.nets, f.images, f.targets, f.opts);
  record(f.geometry, fwd);
  torch::Tensor total;
  for (Region r : kAllRegions) {
    const int ri = region_index(r);
    if (!f.opts.regions[ri]) continue;
    const NetId id = net_for_region(r);
    const torch::Tensor back = f.state.nets.generator(id)->forward(fwd.translated[ri], f.sources);
    const torch::Tensor term = generator_side(f, id, fwd.translated[ri], rec_loss(fwd.parts.parts[ri], back));
    total = total.defined() ? total + term : term;
  }
  return total;
}

torch::Tensor global_objective(Fixture& f) {
  PipelineOptions global_only = f.opts;
  global_only.run_local = false;
  const PipelineOutput fwd = forward_pipeline(f.state.seg, f.state.nets, f.images, f.targets, global_only);
  const torch::Tensor back = f.state.nets.generator(NetId::global)->forward(fwd.x_global, f.sources);
  return generator_side(f, NetId::global, fwd.x_global, rec_loss(f.images, back));
}

struct FlatParam {
  std::string name;
  torch::Tensor tensor;
};

std::vector<FlatParam> named_params(torch::nn::Module& m) {
  std::vector<FlatParam> out;
  for (const auto& p : m.named_parameters()) out.push_back({p.key(), p.value()});
  return out;
}

double value_at(const Objective& fn) {
  torch::NoGradGuard guard;
  return fn().item<double>();
}

// Analytic gradients of fn with respect to params, then central differences on
// randomly chosen coordinates whose gradient is not negligible. Coordinates whose
// perturbation changes crop geometry are replaced by others.
GradCheckItem check_coordinates(const std::string& name, const Objective& fn, std::vector<FlatParam> params,
                                const std::function<Geometry()>& geometry, const GradCheckOptions& options,
                                std::uint64_t salt) {
  GradCheckItem item;
  item.name = name;
  std::vector<torch::Tensor> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);
  const torch::Tensor loss = fn();
  const Geometry base_geometry = geometry();
  const auto grads = torch::autograd::grad({loss}, tensors, {}, false, false, true);

  struct Candidate {
    std::size_t param;
    std::int64_t index;
    double grad;
  };
  std::vector<Candidate> all;
  double max_abs = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].defined()) continue;
    const torch::Tensor g = grads[i].reshape(-1).contiguous();
    const double* gp = g.data_ptr<double>();
    for (std::int64_t k = 0; k < g.numel(); ++k) {
      all.push_back({i, k, gp[k]});
      max_abs = std::max(max_abs, std::abs(gp[k]));
    }
  }
  if (max_abs == 0.0) {
    item.detail = "gradient is identically zero";
    return item;
  }
  std::vector<Candidate> eligible;
  for (const auto& c : all) {
    if (std::abs(c.grad) >= 1e-3 * max_abs) eligible.push_back(c);
  }
  SplitMix rng(options.seed, salt);
  for (std::size_t i = eligible.size(); i > 1; --i) std::swap(eligible[i - 1], eligible[rng.below(i)]);

  int skipped = 0;
  bool ok = true;
  for (const Candidate& c : eligible) {
    if (static_cast<int>(item.coordinates.size()) >= options.coordinates) break;
    torch::Tensor flat = params[c.param].tensor.detach().view(-1);
    const double original = flat[c.index].item<double>();
    flat[c.index].fill_(original + options.step);
    const double plus = value_at(fn);
    const Geometry g_plus = geometry();
    flat[c.index].fill_(original - options.step);
    const double minus = value_at(fn);
    const Geometry g_minus = geometry();
    flat[c.index].fill_(original);
    if (!(g_plus == base_geometry) || !(g_minus == base_geometry)) {
      ++skipped;
      continue;
    }
    CoordinateCheck cc;
    cc.param = params[c.param].name;
    cc.index = c.index;
    cc.analytic = c.grad;
    cc.numeric = (plus - minus) / (2.0 * options.step);
    cc.rel_error = relative_error(cc.analytic, cc.numeric);
    ok = ok && cc.rel_error <= options.rel_tol;
    item.coordinates.push_back(cc);
  }
  double worst = 0.0;
  for (const auto& cc : item.coordinates) worst = std::max(worst, cc.rel_error);
  item.passed = ok && static_cast<int>(item.coordinates.size()) >= options.coordinates;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu coordinates, max rel err %.3g, |grad|max %.3g, %d skipped (crop change)",
                item.coordinates.size(), worst, max_abs, skipped);
  item.detail = buf;
  return item;
}

Fixture make_fixture(const TrainConfig& config, const GradCheckOptions& options) {
  TrainConfig c = config;
  c.end_to_end = true;
  Fixture f{make_train_state(c), {}, {}, {}, pipeline_options(c), {}};
  f.state.seg->to(torch::kFloat64);
  f.state.nets.to(torch::kFloat64);
  const SampleBatch data = stack_samples(
      render_dataset(options.seed * 7919 + 17, options.batch, c.networks.resolution));
  f.images = data.images.to(torch::kFloat64);
  f.sources = data.labels;
  SplitMix rng(options.seed, 0x7A26ULL);
  std::vector<std::int64_t> targets;
  const int d = c.networks.label_dim;
  for (std::int64_t i = 0; i < f.sources.size(0); ++i) {
    targets.push_back((f.sources[i].item<std::int64_t>() + 1 + static_cast<std::int64_t>(rng.below(d - 1))) % d);
  }
  f.targets = torch::tensor(targets, torch::kInt64);
  f.opts.run_local = true;
  return f;
}

GradCheckItem check_resize(const GradCheckOptions& options) {
  GradCheckItem item;
  item.name = "resize_backward";
  torch::manual_seed(options.seed);
  double worst = 0.0;
  const std::array<std::array<int, 4>, 3> shapes = {{{7, 9, 5, 4}, {6, 6, 13, 11}, {12, 10, 32, 32}}};
  for (const auto& s : shapes) {
    const torch::Tensor src = torch::randn({2, 3, s[0], s[1]}, torch::kFloat64).requires_grad_(true);
    const torch::Tensor weight = torch::randn({2, 3, s[2], s[3]}, torch::kFloat64);
    const torch::Tensor out = (bilinear_resize(src, s[2], s[3]) * weight).sum();
    const torch::Tensor g = torch::autograd::grad({out}, {src})[0].reshape(-1);
    torch::Tensor flat = src.detach().view(-1);
    for (std::int64_t k = 0; k < flat.numel(); ++k) {
      const double orig = flat[k].item<double>();
      double v[2];
      for (int sgn = 0; sgn < 2; ++sgn) {
        flat[k].fill_(orig + (sgn == 0 ? options.step : -options.step));
        torch::NoGradGuard guard;
        v[sgn] = (bilinear_resize(src, s[2], s[3]) * weight).sum().item<double>();
      }
      flat[k].fill_(orig);
      worst = std::max(worst, std::abs((v[0] - v[1]) / (2 * options.step) - g[k].item<double>()));
    }
  }
  item.passed = worst <= options.abs_tol_resize;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "max abs err %.3g over every source pixel", worst);
  item.detail = buf;
  return item;
}

GradCheckItem check_fusion_inputs(Fixture& f, const GradCheckOptions& options) {
  const torch::Tensor global_out = torch::tanh(torch::randn_like(f.images)).requires_grad_(true);
  const torch::Tensor local_out = torch::tanh(torch::randn_like(f.images)).requires_grad_(true);
  const Objective fn = [&] { return f.state.nets.fusion->forward(global_out, local_out).pow(2).sum(); };
  GradCheckItem item = check_coordinates("fusion_inputs", fn, {{"global_out", global_out}, {"local_out", local_out}},
                                         [] { return Geometry{}; }, options, 0xF051ULL);
  const torch::Tensor loss = fn();
  const auto grads = torch::autograd::grad({loss}, {global_out, local_out});
  const double gn = grads[0].abs().max().item<double>();
  const double ln = grads[1].abs().max().item<double>();
  item.passed = item.passed && gn > 0.0 && ln > 0.0;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "; |d/dglobal|max %.3g, |d/dlocal|max %.3g", gn, ln);
  item.detail += buf;
  return item;
}

}  // namespace

double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

bool GradCheckReport::passed() const {
  return !items.empty() && std::all_of(items.begin(), items.end(), [](const auto& i) { return i.passed; });
}

const GradCheckItem& GradCheckReport::item(const std::string& name) const {
  for (const auto& i : items) {
    if (i.name == name) return i;
  }
  throw InvalidArgument("no gradient check named " + name);
}

GradCheckReport run_gradcheck(const TrainConfig& config, const GradCheckOptions& options) {
  Fixture f = make_fixture(config, options);
  const std::vector<FlatParam> seg_params = named_params(*f.state.seg);
  const auto geometry = [&f] { return f.geometry; };
  GradCheckReport report;

  {
    torch::manual_seed(options.seed + 1);
    const torch::Tensor weight = torch::randn({f.images.size(0), kNumRegions, f.images.size(2), f.images.size(3)},
                                              torch::kFloat64);
    const Objective mask_fn = [&] {
      const SoftMaskStack soft = tempered_softmax(f.state.seg->forward(f.images), f.opts.temperature);
      return (group_masks(soft, f.opts.grouping).masks * weight).sum();
    };
    report.items.push_back(check_coordinates("seg_mask", mask_fn, seg_params, [] { return Geometry{}; }, options, 1));
  }
  report.items.push_back(
      check_coordinates("seg_fusion", [&] { return fusion_objective(f); }, seg_params, geometry, options, 2));
  report.items.push_back(
      check_coordinates("seg_local", [&] { return local_objective(f); }, seg_params, geometry, options, 3));

  {
    GradCheckItem item;
    item.name = "seg_global_zero";
    std::vector<torch::Tensor> tensors;
    for (const auto& p : seg_params) tensors.push_back(p.tensor);
    const torch::Tensor loss = global_objective(f);
    const auto grads = torch::autograd::grad({loss}, tensors, {}, false, false, true);
    double max_abs = 0.0;
    int undefined = 0;
    for (const auto& g : grads) {
      if (!g.defined()) {
        ++undefined;
        continue;
      }
      max_abs = std::max(max_abs, g.abs().max().item<double>());
    }
    item.passed = max_abs == 0.0;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "max |grad| %.3g (%d of %zu parser tensors unreachable from the loss)", max_abs,
                  undefined, grads.size());
    item.detail = buf;
    report.items.push_back(item);
  }
  report.items.push_back(check_resize(options));
  report.items.push_back(check_fusion_inputs(f, options));
  return report;
}

}  // namespace hiergan
