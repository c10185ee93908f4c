#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "stagformer/model.hpp"

namespace stagformer {

inline constexpr int kConfigSchemaVersion = 1;

struct TrainHyper {
  std::size_t seq_len = 256;
  std::size_t batch_size = 16;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t warmup_steps = 100;
  double clip_norm = 1.0;  // 0 disables clipping
  double validation_fraction = 0.02;
  std::size_t eval_every = 100;  // 0: only after the last step
  std::size_t eval_batches = 4;
  std::size_t checkpoint_every = 0;

  bool operator==(const TrainHyper&) const = default;
};

// Flat document: every ModelConfig and TrainHyper field is a top-level key,
// plus "schema_version".
struct RunConfig {
  ModelConfig model;
  TrainHyper train;

  bool operator==(const RunConfig&) const = default;
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
// Rejects unknown keys and mistyped values. Missing keys keep defaults.
ModelConfig model_config_from_json(const nlohmann::json& doc);

nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);

// Applies "key=value"; the value is parsed with the key's schema type.
void apply_override(RunConfig& cfg, std::string_view assignment);

}  // namespace stagformer
