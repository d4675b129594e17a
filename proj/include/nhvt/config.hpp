#pragma once

#include <filesystem>
#include <string>

#include "nhvt/models.hpp"
#include "nhvt/trainer.hpp"

namespace nhvt {

struct DataPaths {
  std::string train;  // prepared dataset directory
  std::string val;    // optional; evaluation falls back to train
  std::string norm;   // NormStats file; empty: <train>/norm.txt
};

// The on-disk run configuration, a JSON document:
//   { "model": {...}, "train": {..., "augment": {...}}, "data": {...},
//     "deterministic": bool }
// Every section and key is optional; unknown keys are errors.
struct RunConfig {
  ModelConfig model = ModelConfig::toy();
  TrainConfig train;
  DataPaths data;
  bool deterministic = false;

  // Throws ConfigError listing every problem (JSON path and reason).
  static RunConfig parse(const std::string& json_text);
  static RunConfig load(const std::filesystem::path& path);
  // Canonical JSON with every field spelled out; parse(dump()) round-trips.
  std::string dump() const;
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);

}  // namespace nhvt
