// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a flat, typed `key = value` text format.
//
//   # comment
//   iterations = 5000
//   regions = le,re,n,m
//   prior_le = 0.22,0.19,0.31
//
// Every key is checked against a fixed schema; unknown keys and malformed
// values raise ConfigError naming the key (and the line, for files).
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hiergan/training.hpp"

namespace hiergan {

struct EvalOptions {
  std::string test_data;
  int fd_samples = 2000;        // cap on samples per side of the Frechet distance
  int classifier_epochs = 20;
  int embedder_steps = 600;
  std::uint64_t eval_seed = 1234;
  std::string eval_models;      // cached classifier/embedder; trained when absent
};

struct DataOptions {
  int n = 2000;
  int canvas = 64;
  std::uint64_t seed = 0;  // first sample seed
};

struct RunConfig {
  DataOptions data;
  TrainConfig train;
  PretrainOptions pretrain;
  EvalOptions eval;
  std::string out;
  bool deterministic = false;
};

struct ConfigKey {
  std::string name;
  std::string help;
  bool hashed;  // part of the training-state hash
};

/// All keys in output order.
const std::vector<ConfigKey>& config_schema();

void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& key);

/// Applies `key = value` lines on top of `config`. `origin` is used in messages.
void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin);
RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {});
/// Applies "key=value" strings, later entries winning.
void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments);

/// Every key, one per line, in schema order; parses back to an equal config.
std::string format_config(const RunConfig& config);
std::filesystem::path write_resolved_config(const RunConfig& config, const std::filesystem::path& dir);

/// Training configuration stored in a checkpoint written by save_checkpoint.
TrainConfig checkpoint_config(const std::filesystem::path& path);

/// Throws ConfigError listing every offending key.
void validate_run_config(const RunConfig& config);

}  // namespace hiergan
