#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stagformer/model.hpp"

namespace stagformer {

inline constexpr int kCheckpointFormatVersion = 1;

// Optimizer moments for the trainable parameters (checkpoint order, each
// flattened) plus whatever the trainer needs to continue bit-exactly.
struct ResumeState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  nlohmann::json run = nlohmann::json::object();
};

struct Checkpoint {
  ModelWeights weights;
  std::optional<ResumeState> resume;
};

// File layout: "STAGCKPT", u64 LE manifest length, JSON manifest, then the
// f64 LE payload. Manifest offsets are bytes from the payload start.
void save_checkpoint(const std::string& path, const ModelWeights& weights, const ResumeState* resume = nullptr);
// Throws FormatError on a bad magic, version, manifest or payload length.
Checkpoint load_checkpoint(const std::string& path);
nlohmann::json read_checkpoint_manifest(const std::string& path);

}  // namespace stagformer
