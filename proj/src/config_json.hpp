#pragma once

// JSON conversions shared by the config loader and the checkpoint header.

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "nhvt/models.hpp"
#include "nhvt/trainer.hpp"

namespace nhvt::json_io {

using nlohmann::json;

json to_json(const ModelConfig& c);
json to_json(const TrainConfig& c);
json to_json(const AugmentPolicy& p);

// Readers append "path: reason" strings to `errors` instead of throwing and
// leave fields they could not read at their defaults.
ModelConfig model_from_json(const json& j, const std::string& path, std::vector<std::string>& errors);
TrainConfig train_from_json(const json& j, const std::string& path, std::vector<std::string>& errors);
AugmentPolicy augment_from_json(const json& j, const std::string& path, std::vector<std::string>& errors);

}  // namespace nhvt::json_io
