// SPDX-License-Identifier: Apache-2.0
#include "hiergan/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "hiergan/checkpoint.hpp"
#include "hiergan/error.hpp"

namespace hiergan {
namespace {

namespace fs = std::filesystem;

struct Entry {
  ConfigKey key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

template <class T>
T parse_integer(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) bad_value(key, v, "an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out)) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "true|false");
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <class Ref>
Entry int_entry(std::string name, std::string help, bool hashed, Ref ref) {
  using T = std::remove_reference_t<decltype(ref(std::declval<RunConfig&>()))>;
  return {{name, std::move(help), hashed},
          [ref, name](RunConfig& c, const std::string& v) { ref(c) = parse_integer<T>(name, v); },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
Entry double_entry(std::string name, std::string help, bool hashed, Ref ref) {
  return {{name, std::move(help), hashed},
          [ref, name](RunConfig& c, const std::string& v) { ref(c) = parse_double(name, v); },
          [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
Entry bool_entry(std::string name, std::string help, bool hashed, Ref ref) {
  return {{name, std::move(help), hashed},
          [ref, name](RunConfig& c, const std::string& v) { ref(c) = parse_bool(name, v); },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

template <class Ref>
Entry string_entry(std::string name, std::string help, bool hashed, Ref ref) {
  return {{name, std::move(help), hashed},
          [ref](RunConfig& c, const std::string& v) { ref(c) = v; },
          [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); }};
}

Entry prior_entry(Region r) {
  const std::string name = "prior_" + std::string(region_name(r));
  const int i = region_index(r);
  return {{name, "fallback box for an empty region: top,left,side as canvas fractions", true},
          [name, i](RunConfig& c, const std::string& v) {
            const auto parts = split(v, ',');
            if (parts.size() != 3) bad_value(name, v, "three comma-separated fractions");
            c.train.priors[i] = {parse_double(name, parts[0]), parse_double(name, parts[1]),
                                 parse_double(name, parts[2])};
          },
          [i](const RunConfig& c) {
            const PriorFraction& p = c.train.priors[i];
            return format_double(p.top) + "," + format_double(p.left) + "," + format_double(p.side);
          }};
}

Entry group_entry(Region r) {
  const std::string name = "group_" + std::string(region_name(r));
  const int i = region_index(r);
  return {{name, "parser classes merged into this region", true},
          [name, i](RunConfig& c, const std::string& v) {
            std::vector<int> classes;
            for (const auto& p : split(v, ',')) classes.push_back(parse_integer<int>(name, p));
            if (classes.empty()) bad_value(name, v, "a list of class indices");
            c.train.grouping[i] = classes;
          },
          [i](const RunConfig& c) {
            std::string out;
            for (int k : c.train.grouping[i]) out += (out.empty() ? "" : ",") + std::to_string(k);
            return out;
          }};
}

std::vector<Entry> build_entries() {
  std::vector<Entry> e;
  e.push_back(int_entry("data_n", "samples written by gen-data", false, [](RunConfig& c) -> auto& { return c.data.n; }));
  e.push_back(int_entry("data_canvas", "canvas side for gen-data", false, [](RunConfig& c) -> auto& { return c.data.canvas; }));
  e.push_back(int_entry("data_seed", "first sample seed for gen-data", false, [](RunConfig& c) -> auto& { return c.data.seed; }));
  e.push_back(int_entry("iterations", "generator updates", false, [](RunConfig& c) -> auto& { return c.train.iterations; }));
  e.push_back(int_entry("batch", "images per step", true, [](RunConfig& c) -> auto& { return c.train.batch; }));
  e.push_back(double_entry("lr", "Adam step size", true, [](RunConfig& c) -> auto& { return c.train.optimizer.lr; }));
  e.push_back(double_entry("beta1", "Adam first-moment decay", true, [](RunConfig& c) -> auto& { return c.train.optimizer.beta1; }));
  e.push_back(double_entry("beta2", "Adam second-moment decay", true, [](RunConfig& c) -> auto& { return c.train.optimizer.beta2; }));
  e.push_back(double_entry("eps", "Adam epsilon", true, [](RunConfig& c) -> auto& { return c.train.optimizer.eps; }));
  e.push_back(double_entry("w_adv", "adversarial weight", true, [](RunConfig& c) -> auto& { return c.train.weights.adv; }));
  e.push_back(double_entry("w_cls", "classification weight", true, [](RunConfig& c) -> auto& { return c.train.weights.cls; }));
  e.push_back(double_entry("w_rec", "reconstruction weight", true, [](RunConfig& c) -> auto& { return c.train.weights.rec; }));
  e.push_back(double_entry("w_global", "global network weight", true, [](RunConfig& c) -> auto& { return c.train.weights.global; }));
  e.push_back(double_entry("w_fusion", "fusion network weight", true, [](RunConfig& c) -> auto& { return c.train.weights.fusion; }));
  e.push_back(double_entry("w_local", "weight shared by the four local networks", true, [](RunConfig& c) -> auto& { return c.train.weights.local; }));
  e.push_back(double_entry("temperature", "mask softmax temperature", true, [](RunConfig& c) -> auto& { return c.train.temperature; }));
  e.push_back(bool_entry("end_to_end", "update the parser from the local and fusion losses", true, [](RunConfig& c) -> auto& { return c.train.end_to_end; }));
  e.push_back(int_entry("seed", "initialization and sampling seed", true, [](RunConfig& c) -> auto& { return c.train.seed; }));
  e.push_back(int_entry("resolution", "image side", true, [](RunConfig& c) -> auto& { return c.train.networks.resolution; }));
  e.push_back(int_entry("part_size", "local part side", true, [](RunConfig& c) -> auto& { return c.train.networks.part_size; }));
  e.push_back(int_entry("label_dim", "number of expressions", true, [](RunConfig& c) -> auto& { return c.train.networks.label_dim; }));
  e.push_back(int_entry("global_width", "global generator base width", true, [](RunConfig& c) -> auto& { return c.train.networks.global_width; }));
  e.push_back(int_entry("global_res_blocks", "global generator residual blocks", true, [](RunConfig& c) -> auto& { return c.train.networks.global_res_blocks; }));
  e.push_back(int_entry("local_width", "local generator base width", true, [](RunConfig& c) -> auto& { return c.train.networks.local_width; }));
  e.push_back(int_entry("local_res_blocks", "local generator residual blocks", true, [](RunConfig& c) -> auto& { return c.train.networks.local_res_blocks; }));
  e.push_back(int_entry("disc_width", "discriminator base width", true, [](RunConfig& c) -> auto& { return c.train.networks.disc_width; }));
  e.push_back(int_entry("fusion_width", "fusion network width", true, [](RunConfig& c) -> auto& { return c.train.networks.fusion_width; }));
  e.push_back(int_entry("seg_classes", "parser classes", true, [](RunConfig& c) -> auto& { return c.train.seg.num_classes; }));
  e.push_back({{"seg_widths", "parser stage widths (four integers)", true},
               [](RunConfig& c, const std::string& v) {
                 const auto parts = split(v, ',');
                 if (parts.size() != 4) bad_value("seg_widths", v, "four comma-separated integers");
                 for (int i = 0; i < 4; ++i) c.train.seg.widths[i] = parse_integer<int>("seg_widths", parts[i]);
               },
               [](const RunConfig& c) {
                 const auto& w = c.train.seg.widths;
                 return std::to_string(w[0]) + "," + std::to_string(w[1]) + "," + std::to_string(w[2]) + "," +
                        std::to_string(w[3]);
               }});
  e.push_back(double_entry("margin", "crop margin per side, fraction of extent", true, [](RunConfig& c) -> auto& { return c.train.margin; }));
  for (Region r : kAllRegions) e.push_back(prior_entry(r));
  for (Region r : kAllRegions) e.push_back(group_entry(r));
  e.push_back({{"regions", "active local regions, comma-separated subset of le,re,n,m or 'none'", true},
               [](RunConfig& c, const std::string& v) {
                 RegionSet set{false, false, false, false};
                 if (v != "none") {
                   for (const auto& name : split(v, ',')) {
                     try {
                       set[region_index(parse_region(name))] = true;
                     } catch (const InvalidArgument&) {
                       bad_value("regions", v, "a subset of le,re,n,m");
                     }
                   }
                 }
                 c.train.regions = set;
               },
               [](const RunConfig& c) {
                 std::string out;
                 for (Region r : kAllRegions) {
                   if (c.train.regions[region_index(r)]) out += (out.empty() ? "" : ",") + std::string(region_name(r));
                 }
                 return out.empty() ? std::string("none") : out;
               }});
  e.push_back(int_entry("checkpoint_interval", "iterations between checkpoints (0 = end only)", false, [](RunConfig& c) -> auto& { return c.train.checkpoint_interval; }));
  e.push_back(int_entry("d_steps_per_g", "discriminator updates per generator update", true, [](RunConfig& c) -> auto& { return c.train.d_steps_per_g; }));
  e.push_back(double_entry("seg_lr_scale", "parser step size during end-to-end training, relative to lr", true, [](RunConfig& c) -> auto& { return c.train.seg_lr_scale; }));
  e.push_back(string_entry("train_data", "training dataset directory", false, [](RunConfig& c) -> auto& { return c.train.train_data; }));
  e.push_back(string_entry("seg_checkpoint", "pretrained parser checkpoint", false, [](RunConfig& c) -> auto& { return c.train.seg_checkpoint; }));
  e.push_back(double_entry("pretrain_fraction", "fraction of the training set used for parser pretraining", false, [](RunConfig& c) -> auto& { return c.pretrain.fraction; }));
  e.push_back(int_entry("pretrain_epochs", "parser pretraining epochs", false, [](RunConfig& c) -> auto& { return c.pretrain.epochs; }));
  e.push_back(int_entry("pretrain_batch", "parser pretraining batch", false, [](RunConfig& c) -> auto& { return c.pretrain.batch; }));
  e.push_back(double_entry("pretrain_lr", "parser pretraining step size", false, [](RunConfig& c) -> auto& { return c.pretrain.lr; }));
  e.push_back(int_entry("pretrain_seed", "parser pretraining seed", false, [](RunConfig& c) -> auto& { return c.pretrain.seed; }));
  e.push_back(string_entry("test_data", "held-out dataset directory", false, [](RunConfig& c) -> auto& { return c.eval.test_data; }));
  e.push_back(int_entry("fd_samples", "samples per side for the Frechet distance", false, [](RunConfig& c) -> auto& { return c.eval.fd_samples; }));
  e.push_back(int_entry("classifier_epochs", "expression classifier epochs", false, [](RunConfig& c) -> auto& { return c.eval.classifier_epochs; }));
  e.push_back(int_entry("embedder_steps", "embedder training steps", false, [](RunConfig& c) -> auto& { return c.eval.embedder_steps; }));
  e.push_back(int_entry("eval_seed", "seed for evaluation targets and models", false, [](RunConfig& c) -> auto& { return c.eval.eval_seed; }));
  e.push_back(string_entry("eval_models", "cached evaluation models file", false, [](RunConfig& c) -> auto& { return c.eval.eval_models; }));
  e.push_back(string_entry("out", "output directory", false, [](RunConfig& c) -> auto& { return c.out; }));
  e.push_back(bool_entry("deterministic", "single-threaded execution", false, [](RunConfig& c) -> auto& { return c.deterministic; }));
  return e;
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> e = build_entries();
  return e;
}

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.key.name == key) return e;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  find_entry(key).set(config, trim(value));
}

std::string get_config_value(const RunConfig& config, const std::string& key) { return find_entry(key).get(config); }

void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      set_config_value(config, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

RunConfig load_config_file(const fs::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(base, ss.str(), path.string());
  return base;
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + a + "' is not of the form key=value");
    set_config_value(config, trim(a.substr(0, eq)), a.substr(eq + 1));
  }
}

std::string format_config(const RunConfig& config) {
  std::string out;
  for (const auto& e : entries()) out += e.key.name + " = " + e.get(config) + "\n";
  return out;
}

fs::path write_resolved_config(const RunConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path path = dir / "resolved.cfg";
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << format_config(config);
  if (!out) throw IoError("cannot write " + path.string());
  return path;
}

void validate_run_config(const RunConfig& config) {
  std::vector<std::string> bad;
  try {
    validate_train_config(config.train);
  } catch (const ConfigError& e) {
    bad.push_back(std::string(e.what()).substr(std::string("invalid configuration keys: ").size()));
  }
  if (!(config.pretrain.fraction > 0.0 && config.pretrain.fraction <= 1.0)) bad.push_back("pretrain_fraction");
  if (config.pretrain.epochs < 0) bad.push_back("pretrain_epochs");
  if (config.pretrain.batch < 1) bad.push_back("pretrain_batch");
  if (!(config.pretrain.lr > 0.0)) bad.push_back("pretrain_lr");
  if (config.data.n < 1) bad.push_back("data_n");
  if (config.data.canvas < 32) bad.push_back("data_canvas");
  if (config.eval.fd_samples < 2) bad.push_back("fd_samples");
  if (config.eval.classifier_epochs < 1) bad.push_back("classifier_epochs");
  if (config.eval.embedder_steps < 1) bad.push_back("embedder_steps");
  if (!bad.empty()) {
    std::string msg = "invalid configuration keys:";
    for (const auto& k : bad) msg += " " + k;
    throw ConfigError(msg);
  }
}

TrainConfig checkpoint_config(const fs::path& path) {
  const TensorContainer c = load_container(path);
  if (!c.metadata.count("config")) throw IoError("checkpoint " + path.string() + " carries no configuration");
  RunConfig rc;
  apply_config_text(rc, c.metadata.at("config"), path.string() + " (embedded config)");
  return rc.train;
}

std::uint64_t config_hash(const TrainConfig& config) {
  RunConfig rc;
  rc.train = config;
  std::string text;
  for (const auto& e : entries()) {
    if (e.key.hashed) text += e.key.name + "=" + e.get(rc) + "\n";
  }
  return fnv1a(text.data(), text.size());
}

}  // namespace hiergan
