#pragma once

// Line-oriented `key = value` run configuration and the run manifest.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "lovis/encoders.hpp"
#include "lovis/pretrain.hpp"
#include "lovis/trainer.hpp"
#include "lovis/world.hpp"

namespace lovis {

struct DataConfig {
  std::size_t houses = 13;
  std::size_t episodes = 200;  // per house
  DatasetStyle style = DatasetStyle::kR2R;
  WorldConfig world;
};

struct Config {
  ModelConfig model;
  TrainerConfig train;
  PretrainConfig pretrain;
  DataConfig data;
  std::uint64_t seed = 7;  // drives data, initialization, pre-training and fine-tuning

  // Propagates `seed` into the sub-configs.
  void apply_seed(std::uint64_t s);
};

// Empty input gives the defaults. '#' starts a comment. Unknown keys,
// malformed values and out-of-range values raise ConfigError naming the line.
Config parse_config_text(const std::string& text, const std::string& source = "<config>");
Config parse_config(const std::filesystem::path& path);

// Every key with its effective value, in parseable form.
std::string config_to_text(const Config& config);

// Git-style blob hash: SHA-1 over "blob <size>\0" followed by the bytes.
std::string git_blob_hash(const std::string& bytes);
// Hash over the sorted (relative path, blob hash) list of every regular file
// under `dir`.
std::string dataset_hash(const std::filesystem::path& dir);

struct RunManifest {
  std::string command;
  Config config;
  std::string dataset_dir;
  std::string dataset_hash;
  std::map<std::string, std::string> inputs;   // e.g. init checkpoint path
  std::map<std::string, std::string> outputs;  // artifact name → path
  std::string started_utc;
};

std::string manifest_json(const RunManifest& manifest);
void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);

}  // namespace lovis
