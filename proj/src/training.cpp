// SPDX-License-Identifier: Apache-2.0
#include "hiergan/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "hiergan/config.hpp"
#include "hiergan/error.hpp"
#include "hiergan/metrics.hpp"
#include "hiergan/rng.hpp"

namespace hiergan {
namespace {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

void set_requires_grad(torch::nn::Module& module, bool on) {
  for (auto& p : module.parameters()) p.requires_grad_(on);
}

void clear_grads(torch::nn::Module& module) {
  for (auto& p : module.parameters()) p.mutable_grad().reset();
}

std::string gen_key(NetId id) { return "gen." + std::string(net_name(id)); }
std::string disc_key(NetId id) { return "disc." + std::string(net_name(id)); }

constexpr std::array<NetId, 5> kGeneratorNets = {NetId::global, NetId::le, NetId::re, NetId::n, NetId::m};

struct ImagePair {
  torch::Tensor real;
  torch::Tensor fake;
};

ImagePair pair_for(NetId id, const torch::Tensor& images, const PipelineOutput& out) {
  switch (id) {
    case NetId::global: return {images, out.x_global};
    case NetId::fusion: return {images, out.x_t};
    default: {
      const int r = region_index(region_for_net(id));
      return {out.parts.parts[r], out.translated[r]};
    }
  }
}

double checked(const torch::Tensor& loss, NetId id, const char* term, std::int64_t iteration) {
  const double v = loss.item<double>();
  if (!std::isfinite(v)) {
    throw NumericError("non-finite " + std::string(term) + " loss in network " + std::string(net_name(id)) +
                       " at iteration " + std::to_string(iteration));
  }
  return v;
}

// Loss functions reject non-finite logits on their own; add where it happened.
template <class Fn>
auto in_network(NetId id, std::int64_t iteration, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " in network " + std::string(net_name(id)) + " at iteration " +
                       std::to_string(iteration));
  }
}

torch::Tensor accumulate(const torch::Tensor& total, const torch::Tensor& term) {
  return total.defined() ? total + term : term;
}

}  // namespace

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<torch::Tensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    exp_avg_.push_back(torch::zeros_like(p, torch::MemoryFormat::Contiguous));
    exp_avg_sq_.push_back(torch::zeros_like(p, torch::MemoryFormat::Contiguous));
    steps_.push_back(0);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.mutable_grad().reset();
}

void Adam::step() {
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const torch::Tensor& g = params_[i].grad();
    if (!g.defined()) continue;
    const std::int64_t t = ++steps_[i];
    exp_avg_[i].mul_(options_.beta1).add_(g, 1.0 - options_.beta1);
    exp_avg_sq_[i].mul_(options_.beta2).addcmul_(g, g, 1.0 - options_.beta2);
    const double bias1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t));
    const double bias2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t));
    torch::Tensor denom = (exp_avg_sq_[i] / bias2).sqrt_().add_(options_.eps);
    params_[i].addcdiv_(exp_avg_[i], denom, -options_.lr / bias1);
  }
}

std::vector<NamedTensor> Adam::state_tensors() const {
  std::vector<NamedTensor> out;
  out.push_back({"steps", torch::tensor(steps_, torch::kInt64)});
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({"exp_avg." + std::to_string(i), exp_avg_[i]});
    out.push_back({"exp_avg_sq." + std::to_string(i), exp_avg_sq_[i]});
  }
  return out;
}

void Adam::load_state(const TensorSection& section) {
  if (section.tensors.size() != 1 + 2 * params_.size() || section.tensors[0].name != "steps" ||
      section.tensors[0].tensor.numel() != static_cast<int64_t>(params_.size())) {
    throw IoError("checkpoint section '" + section.name + "' does not match the optimizer layout");
  }
  torch::Tensor steps = section.tensors[0].tensor.to(torch::kInt64).contiguous();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    steps_[i] = steps[i].item<std::int64_t>();
    const torch::Tensor& m = section.tensors[1 + 2 * i].tensor;
    const torch::Tensor& v = section.tensors[2 + 2 * i].tensor;
    if (m.sizes() != exp_avg_[i].sizes() || v.sizes() != exp_avg_sq_[i].sizes()) {
      throw IoError("checkpoint section '" + section.name + "': moment shape mismatch at index " +
                    std::to_string(i));
    }
    exp_avg_[i].copy_(m);
    exp_avg_sq_[i].copy_(v);
  }
}

// ---------------------------------------------------------------------------
// Configuration

void validate_train_config(const TrainConfig& c) {
  std::vector<std::string> bad;
  if (c.iterations < 1) bad.push_back("iterations");
  if (c.batch < 1) bad.push_back("batch");
  if (!(c.optimizer.lr > 0.0)) bad.push_back("lr");
  if (!(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0)) bad.push_back("beta1");
  if (!(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0)) bad.push_back("beta2");
  if (!(c.temperature > 0.0)) bad.push_back("temperature");
  if (!(c.margin >= 0.0 && c.margin < 1.0)) bad.push_back("margin");
  if (c.d_steps_per_g < 1) bad.push_back("d_steps_per_g");
  if (!(c.seg_lr_scale >= 0.0) || !std::isfinite(c.seg_lr_scale)) bad.push_back("seg_lr_scale");
  if (c.checkpoint_interval < 0) bad.push_back("checkpoint_interval");
  const auto& w = c.weights;
  const std::pair<const char*, double> weights[] = {{"w_adv", w.adv},       {"w_cls", w.cls},
                                                    {"w_rec", w.rec},       {"w_global", w.global},
                                                    {"w_fusion", w.fusion}, {"w_local", w.local}};
  for (const auto& [name, v] : weights) {
    if (!std::isfinite(v) || v < 0.0) bad.push_back(name);
  }
  if (c.networks.part_size > c.networks.resolution) bad.push_back("part_size");
  if (c.seg.num_classes < 2) bad.push_back("seg_classes");
  try {
    validate_grouping(c.grouping, c.seg.num_classes);
  } catch (const InvalidArgument&) {
    bad.push_back("grouping");
  }
  try {
    validate_network_config(c.networks);
  } catch (const ConfigError& e) {
    bad.push_back(std::string(e.what()).substr(std::string("invalid network configuration keys: ").size()));
  }
  if (!bad.empty()) {
    std::string msg = "invalid configuration keys:";
    for (const auto& k : bad) msg += " " + k;
    throw ConfigError(msg);
  }
}

PipelineOptions pipeline_options(const TrainConfig& c) {
  PipelineOptions o;
  o.temperature = c.temperature;
  o.part_size = c.networks.part_size;
  o.priors = make_prior_boxes(c.priors, c.networks.resolution);
  o.margin = c.margin;
  o.regions = c.regions;
  o.grouping = c.grouping;
  return o;
}

// ---------------------------------------------------------------------------
// Pipeline

PipelineOutput forward_pipeline(SegNetwork& seg, Networks& nets, const torch::Tensor& images,
                                const torch::Tensor& targets, const PipelineOptions& options) {
  PipelineOutput out;
  out.x_global = nets.generator(NetId::global)->forward(images, targets);
  if (!options.run_local) return out;

  out.soft = tempered_softmax(seg->forward(images), options.temperature);
  out.masks = group_masks(out.soft, options.grouping);
  const torch::Tensor hard = hard_labels(out.soft);
  out.parts = extract_parts(images, out.masks, hard, options.part_size, options.priors, options.margin,
                            options.regions);
  for (Region r : kAllRegions) {
    const int ri = region_index(r);
    if (!options.regions[ri]) continue;
    out.translated[ri] = nets.generator(net_for_region(r))->forward(out.parts.parts[ri], targets);
  }
  out.x_local = stitch_parts(out.translated, out.parts.boxes, out.masks, images.size(2), images.size(3),
                             options.regions);
  out.x_t = nets.fusion->forward(out.x_global, out.x_local);
  return out;
}

torch::Tensor final_output(const PipelineOutput& out) { return out.x_t.defined() ? out.x_t : out.x_global; }

bool TrainState::network_active(NetId id) const {
  if (config.weights.network(id) <= 0.0) return false;
  if (is_local(id)) return config.regions[region_index(region_for_net(id))];
  return true;
}

bool TrainState::needs_local_branch() const {
  for (NetId id : kAllNets) {
    if (id != NetId::global && network_active(id)) return true;
  }
  return false;
}

TrainState make_train_state(const TrainConfig& config) {
  validate_train_config(config);
  TrainState state;
  state.config = config;
  NetworkConfig nc = config.networks;
  nc.seed = config.seed;
  state.nets = build_networks(nc);
  torch::manual_seed(config.seed + 7919);
  state.seg = SegNetwork(config.seg);
  if (!config.seg_checkpoint.empty()) load_segmentation(state.seg, config.seg_checkpoint);
  set_requires_grad(*state.seg, config.end_to_end);

  const AdamOptions& o = config.optimizer;
  if (config.end_to_end) {
    AdamOptions so = o;
    so.lr = o.lr * config.seg_lr_scale;
    state.optimizers.emplace("seg", Adam(state.seg->parameters(), so));
  }
  for (NetId id : kGeneratorNets) {
    state.optimizers.emplace(gen_key(id), Adam(state.nets.generator(id)->parameters(), o));
  }
  state.optimizers.emplace("fusion", Adam(state.nets.fusion->parameters(), o));
  for (NetId id : kAllNets) {
    state.optimizers.emplace(disc_key(id), Adam(state.nets.discriminator(id)->parameters(), o));
  }
  return state;
}

std::array<torch::Tensor, kNumNets> cycle_pass(TrainState& state, const PipelineOutput& forward,
                                               const torch::Tensor& images, const torch::Tensor& sources) {
  std::array<torch::Tensor, kNumNets> rec;
  if (state.network_active(NetId::global)) {
    rec[net_index(NetId::global)] =
        rec_loss(images, state.nets.generator(NetId::global)->forward(forward.x_global, sources));
  }
  for (Region r : kAllRegions) {
    const NetId id = net_for_region(r);
    if (!state.network_active(id)) continue;
    const int ri = region_index(r);
    rec[net_index(id)] = rec_loss(forward.parts.parts[ri],
                                  state.nets.generator(id)->forward(forward.translated[ri], sources));
  }
  if (state.network_active(NetId::fusion)) {
    PipelineOptions opts = pipeline_options(state.config);
    const PipelineOutput back = forward_pipeline(state.seg, state.nets, forward.x_t, sources, opts);
    rec[net_index(NetId::fusion)] = rec_loss(images, back.x_t);
  }
  return rec;
}

LossReport train_step(TrainState& state, const torch::Tensor& images, const torch::Tensor& sources,
                      const torch::Tensor& targets) {
  const TrainConfig& cfg = state.config;
  const LossWeights& w = cfg.weights;
  PipelineOptions opts = pipeline_options(cfg);
  opts.run_local = state.needs_local_branch();
  const std::int64_t iter = state.iteration;

  LossComponents components;
  for (auto& c : components) c = NetLosses{};

  // Generators do not change during the discriminator phase, so one forward pass
  // serves both phases; the discriminators see detached copies.
  const PipelineOutput fwd = forward_pipeline(state.seg, state.nets, images, targets, opts);

  // Discriminator phase.
  for (auto& d : state.nets.discriminators) set_requires_grad(*d, true);
  for (int step = 0; step < cfg.d_steps_per_g; ++step) {
    torch::Tensor loss_d;
    for (NetId id : kAllNets) {
      if (!state.network_active(id)) continue;
      const ImagePair pair = pair_for(id, images, fwd);
      Discriminator& disc = state.nets.discriminator(id);
      const DiscriminatorOutput on_real = disc->forward(pair.real.detach());
      const DiscriminatorOutput on_fake = disc->forward(pair.fake.detach());
      const torch::Tensor adv = in_network(id, iter, [&] { return adv_loss_d(on_real.realness, on_fake.realness); });
      const torch::Tensor cls = cls_loss(on_real.logits, sources);
      NetLosses& c = *components[net_index(id)];
      c.adv_d = checked(adv, id, "adversarial (D)", iter);
      c.cls_d = checked(cls, id, "classification (D)", iter);
      loss_d = accumulate(loss_d, w.network(id) * (w.adv * adv + w.cls * cls));
    }
    for (NetId id : kAllNets) state.optimizers.at(disc_key(id)).zero_grad();
    if (loss_d.defined()) {
      loss_d.backward();
      for (NetId id : kAllNets) {
        if (state.network_active(id)) state.optimizers.at(disc_key(id)).step();
      }
    }
  }

  // Generator phase; discriminators are frozen.
  for (auto& d : state.nets.discriminators) set_requires_grad(*d, false);
  const std::array<torch::Tensor, kNumNets> rec = cycle_pass(state, fwd, images, sources);
  torch::Tensor loss_g;
  for (NetId id : kAllNets) {
    if (!state.network_active(id)) continue;
    const DiscriminatorOutput on_fake = state.nets.discriminator(id)->forward(pair_for(id, images, fwd).fake);
    const torch::Tensor adv = in_network(id, iter, [&] { return adv_loss_g(on_fake.realness); });
    const torch::Tensor cls = cls_loss(on_fake.logits, targets);
    NetLosses& c = *components[net_index(id)];
    c.adv_g = checked(adv, id, "adversarial (G)", iter);
    c.cls_g = checked(cls, id, "classification (G)", iter);
    c.rec = checked(rec[net_index(id)], id, "reconstruction", iter);
    loss_g = accumulate(loss_g, w.network(id) * (w.adv * adv + w.cls * cls + w.rec * rec[net_index(id)]));
  }
  for (NetId id : kGeneratorNets) state.optimizers.at(gen_key(id)).zero_grad();
  state.optimizers.at("fusion").zero_grad();
  if (cfg.end_to_end) state.optimizers.at("seg").zero_grad();
  if (loss_g.defined()) {
    loss_g.backward();
    for (NetId id : kGeneratorNets) state.optimizers.at(gen_key(id)).step();
    state.optimizers.at("fusion").step();
    // theta_s receives only what the local and fusion terms route back through the masks
    if (cfg.end_to_end) state.optimizers.at("seg").step();
  }
  for (auto& d : state.nets.discriminators) {
    set_requires_grad(*d, true);
    clear_grads(*d);
  }

  ++state.iteration;
  return total_loss(components, w);
}

IterationDraw draw_iteration(std::uint64_t seed, std::int64_t iteration, int batch, std::int64_t dataset_size,
                             int label_dim) {
  if (dataset_size < 1) throw InvalidArgument("draw_iteration: empty dataset");
  SplitMix rng(seed, 0x7A11ULL + static_cast<std::uint64_t>(iteration));
  std::vector<std::int64_t> idx(batch), tgt(batch);
  for (int i = 0; i < batch; ++i) {
    idx[i] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(dataset_size)));
    tgt[i] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(label_dim)));
  }
  return {torch::tensor(idx, torch::kInt64), torch::tensor(tgt, torch::kInt64)};
}

void train(TrainState& state, const SampleBatch& data, const TrainLoopOptions& options) {
  std::ofstream metrics;
  if (!options.metrics_csv.empty()) {
    const bool fresh = !fs::exists(options.metrics_csv) || fs::file_size(options.metrics_csv) == 0;
    metrics.open(options.metrics_csv, std::ios::app);
    if (!metrics) throw IoError("cannot open metrics log " + options.metrics_csv.string());
    if (fresh) write_metrics_header(metrics);
  }
  if (!options.checkpoint_dir.empty()) fs::create_directories(options.checkpoint_dir);

  const TrainConfig& cfg = state.config;
  const std::int64_t n = data.images.size(0);
  while (state.iteration < cfg.iterations) {
    const IterationDraw draw = draw_iteration(cfg.seed, state.iteration, cfg.batch, n, cfg.networks.label_dim);
    const torch::Tensor images = data.images.index_select(0, draw.indices);
    const torch::Tensor sources = data.labels.index_select(0, draw.indices);
    const LossReport report = train_step(state, images, sources, draw.targets);
    if (metrics.is_open()) {
      write_metrics_rows(metrics, state.iteration, report);
      metrics.flush();
    }
    if (options.on_iteration) options.on_iteration(state.iteration, report);
    if (!options.checkpoint_dir.empty() && cfg.checkpoint_interval > 0 &&
        state.iteration % cfg.checkpoint_interval == 0) {
      save_checkpoint(state, options.checkpoint_dir / "latest.ckpt");
    }
  }
  if (!options.checkpoint_dir.empty()) save_checkpoint(state, options.checkpoint_dir / "latest.ckpt");
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const TrainState& state, const fs::path& path) {
  TensorContainer c;
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(config_hash(state.config)));
  c.metadata["kind"] = "train_state";
  c.metadata["config_hash"] = hash;
  c.metadata["iteration"] = std::to_string(state.iteration);
  RunConfig rc;
  rc.train = state.config;
  c.metadata["config"] = format_config(rc);
  c.sections.push_back({"seg", module_tensors(*state.seg)});
  for (NetId id : kGeneratorNets) {
    c.sections.push_back({gen_key(id), module_tensors(*const_cast<Networks&>(state.nets).generator(id))});
  }
  c.sections.push_back({"fusion", module_tensors(*state.nets.fusion)});
  for (NetId id : kAllNets) {
    c.sections.push_back({disc_key(id), module_tensors(*state.nets.discriminators[net_index(id)])});
  }
  for (const auto& [name, opt] : state.optimizers) c.sections.push_back({"optim." + name, opt.state_tensors()});
  save_container(path, c);
}

TrainState load_checkpoint(const fs::path& path, const TrainConfig& config) {
  const TensorContainer c = load_container(path);
  if (!c.metadata.count("kind") || c.metadata.at("kind") != "train_state") {
    throw IoError("checkpoint " + path.string() + " is not a training state");
  }
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(config_hash(config)));
  const std::string stored = c.metadata.count("config_hash") ? c.metadata.at("config_hash") : "";
  if (stored != hash) {
    throw ConfigError("refusing to resume from " + path.string() + ": config hash " + stored +
                      " does not match current config hash " + hash);
  }
  TrainConfig build = config;
  build.seg_checkpoint.clear();
  TrainState state = make_train_state(build);
  state.config = config;
  load_module_tensors(*state.seg, c.section("seg"));
  for (NetId id : kGeneratorNets) load_module_tensors(*state.nets.generator(id), c.section(gen_key(id)));
  load_module_tensors(*state.nets.fusion, c.section("fusion"));
  for (NetId id : kAllNets) load_module_tensors(*state.nets.discriminator(id), c.section(disc_key(id)));
  for (auto& [name, opt] : state.optimizers) opt.load_state(c.section("optim." + name));
  state.iteration = std::stoll(c.metadata.at("iteration"));
  return state;
}

void save_segmentation(SegNetwork& seg, const fs::path& path, const std::map<std::string, std::string>& metadata) {
  TensorContainer c;
  c.metadata = metadata;
  c.metadata["kind"] = "segmentation";
  c.sections.push_back({"seg", module_tensors(*seg)});
  save_container(path, c);
}

void load_segmentation(SegNetwork& seg, const fs::path& path) {
  const TensorContainer c = load_container(path);
  load_module_tensors(*seg, c.section("seg"));
}

// ---------------------------------------------------------------------------
// Parser pretraining and batched inference

PretrainResult pretrain_segmentation(SegNetwork& seg, const SampleBatch& data, const PretrainOptions& options) {
  if (!(options.fraction > 0.0 && options.fraction <= 1.0)) {
    throw InvalidArgument("pretrain_segmentation: fraction must lie in (0, 1], got " +
                          std::to_string(options.fraction));
  }
  if (options.epochs < 0 || options.batch < 1) throw InvalidArgument("pretrain_segmentation: bad epochs/batch");
  const std::int64_t total = data.images.size(0);
  const std::int64_t n =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(options.fraction * total - 1e-9)));
  const torch::Tensor images = data.images.slice(0, 0, n);
  const torch::Tensor maps = data.class_maps.slice(0, 0, n).to(torch::kInt64);

  std::vector<bool> restore;
  for (auto& p : seg->parameters()) {
    restore.push_back(p.requires_grad());
    p.requires_grad_(true);
  }
  Adam opt(seg->parameters(), AdamOptions{options.lr, 0.9, 0.999, 1e-8});
  std::vector<std::int64_t> order(n);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::int64_t i = 0; i < n; ++i) order[i] = i;
    SplitMix rng(options.seed, 0xE90C0000ULL + static_cast<std::uint64_t>(epoch));
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    for (std::int64_t start = 0; start < n; start += options.batch) {
      const std::int64_t end = std::min(n, start + options.batch);
      torch::Tensor idx = torch::tensor(std::vector<std::int64_t>(order.begin() + start, order.begin() + end));
      torch::Tensor logits = seg->forward(images.index_select(0, idx));
      torch::Tensor loss = F::cross_entropy(logits, maps.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  int k = 0;
  for (auto& p : seg->parameters()) {
    p.mutable_grad().reset();
    p.requires_grad_(restore[k++]);
  }

  PretrainResult result;
  result.samples_used = n;
  result.train_miou = miou(predict_labels(seg, images), maps, seg->num_classes()).miou;
  return result;
}

torch::Tensor predict_labels(SegNetwork& seg, const torch::Tensor& images, int chunk) {
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> out;
  for (std::int64_t start = 0; start < images.size(0); start += chunk) {
    const std::int64_t end = std::min<std::int64_t>(images.size(0), start + chunk);
    out.push_back(hard_labels(seg->forward(images.slice(0, start, end))));
  }
  return torch::cat(out);
}

torch::Tensor translate_images(TrainState& state, const torch::Tensor& images, const torch::Tensor& targets,
                               int chunk) {
  torch::NoGradGuard guard;
  PipelineOptions opts = pipeline_options(state.config);
  const bool use_fusion = state.network_active(NetId::fusion);
  opts.run_local = use_fusion;
  std::vector<torch::Tensor> out;
  for (std::int64_t start = 0; start < images.size(0); start += chunk) {
    const std::int64_t end = std::min<std::int64_t>(images.size(0), start + chunk);
    const PipelineOutput p =
        forward_pipeline(state.seg, state.nets, images.slice(0, start, end), targets.slice(0, start, end), opts);
    out.push_back(use_fusion ? p.x_t : p.x_global);
  }
  return torch::cat(out);
}

}  // namespace hiergan
