#pragma once

// Small configurations and inputs shared by the test binaries.

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "stagformer/model.hpp"

namespace fixture {

using stagformer::ModelConfig;
using stagformer::TokenId;

// One layer per stack unless asked otherwise; large enough init that
// perturbations move every logit.
inline ModelConfig toy(std::size_t stacks, bool shared = false, std::optional<std::size_t> window = std::nullopt,
                       std::size_t layers_per_stack = 1, std::size_t d_model = 16) {
  ModelConfig c;
  c.d_model = d_model;
  c.n_heads = 2;
  c.d_ff = 2 * d_model;
  c.stacks = stacks;
  c.weight_sharing = shared;
  c.total_layers = shared ? layers_per_stack : layers_per_stack * stacks;
  c.cross_window = window;
  c.max_seq_len = 96;
  c.init_std = 0.2;
  c.seed = 5;
  return c;
}

inline std::string describe(const ModelConfig& c) {
  std::string s = "p=" + std::to_string(c.stacks) + (c.weight_sharing ? " shared" : " separate") +
                  " l=" + std::to_string(c.total_layers) + " window=";
  s += c.cross_window ? std::to_string(*c.cross_window) : std::string("inf");
  return s;
}

// The baseline, p = 2 x {separate, shared} x window in {inf, 4, 1}, and
// p in {3, 4} separate plus p = 3 shared. Sharing and windows need p >= 2,
// so p = 1 contributes a single entry.
inline std::vector<ModelConfig> variant_matrix(std::size_t layers_per_stack = 1, std::size_t d_model = 16) {
  std::vector<ModelConfig> out{toy(1, false, std::nullopt, 2 * layers_per_stack, d_model)};
  for (bool shared : {false, true}) {
    for (std::optional<std::size_t> w : {std::optional<std::size_t>{}, std::optional<std::size_t>{4},
                                        std::optional<std::size_t>{1}}) {
      out.push_back(toy(2, shared, w, layers_per_stack, d_model));
    }
  }
  out.push_back(toy(3, false, std::nullopt, layers_per_stack, d_model));
  out.push_back(toy(4, false, std::nullopt, layers_per_stack, d_model));
  out.push_back(toy(3, true, std::nullopt, layers_per_stack, d_model));
  return out;
}

inline std::vector<TokenId> tokens(std::size_t n, std::uint64_t seed, std::size_t vocab = 256) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> u(0, static_cast<TokenId>(vocab - 1));
  std::vector<TokenId> t(n);
  for (auto& x : t) x = u(rng);
  return t;
}

// Rewrites a checkpoint's JSON manifest in place, keeping the payload.
inline void edit_manifest(const std::string& path, const std::function<void(nlohmann::json&)>& edit) {
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof len);
  nlohmann::json manifest = nlohmann::json::parse(bytes.substr(16, len));
  edit(manifest);
  const std::string text = manifest.dump();
  const std::uint64_t new_len = text.size();
  std::string out = bytes.substr(0, 8);
  out.append(reinterpret_cast<const char*>(&new_len), sizeof new_len);
  out += text;
  out += bytes.substr(16 + len);
  std::ofstream(path, std::ios::binary | std::ios::trunc) << out;
}

}  // namespace fixture
