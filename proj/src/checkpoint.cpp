#include "stagformer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "stagformer/config.hpp"
#include "stagformer/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace stagformer {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'S', 'T', 'A', 'G', 'C', 'K', 'P', 'T'};

void write_doubles(std::ofstream& out, std::span<const double> values) {
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

struct RawFile {
  json manifest;
  std::vector<double> payload;
};

RawFile read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  char magic[8] = {};
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw FormatError("'" + path + "' is not a checkpoint");
  std::uint64_t manifest_len = 0;
  in.read(reinterpret_cast<char*>(&manifest_len), sizeof manifest_len);
  if (!in || manifest_len > (1ull << 32)) throw FormatError("checkpoint manifest length is corrupt");
  std::string text(manifest_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(manifest_len));
  if (!in) throw FormatError("checkpoint manifest is truncated");
  RawFile raw;
  try {
    raw.manifest = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  const auto version = raw.manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw FormatError("checkpoint format_version " + std::to_string(version) + " is unsupported (expected " +
                      std::to_string(kCheckpointFormatVersion) + ")");
  }
  const std::streampos start = in.tellg();
  in.seekg(0, std::ios::end);
  const std::uint64_t bytes = static_cast<std::uint64_t>(in.tellg() - start);
  const std::uint64_t expected = raw.manifest.at("payload_bytes").get<std::uint64_t>();
  if (bytes != expected) {
    throw FormatError("checkpoint payload has " + std::to_string(bytes) + " bytes, manifest declares " +
                      std::to_string(expected));
  }
  raw.payload.resize(bytes / sizeof(double));
  in.seekg(start);
  in.read(reinterpret_cast<char*>(raw.payload.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw FormatError("checkpoint payload is truncated");
  return raw;
}

std::span<const double> slice(const std::vector<double>& payload, std::uint64_t offset_bytes, std::uint64_t count) {
  if (offset_bytes % sizeof(double) != 0 || offset_bytes / sizeof(double) + count > payload.size()) {
    throw FormatError("checkpoint descriptor points outside the payload");
  }
  return std::span<const double>(payload).subspan(offset_bytes / sizeof(double), count);
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelWeights& weights, const ResumeState* resume) {
  json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["config"] = model_config_to_json(weights.config);
  std::uint64_t offset = 0;
  json params = json::array();
  const auto named = weights.parameters();
  for (const auto& p : named) {
    params.push_back({{"name", p.name},
                      {"shape", p.tensor.shape()},
                      {"offset", offset},
                      {"count", p.tensor.numel()},
                      {"trainable", p.trainable}});
    offset += p.tensor.numel() * sizeof(double);
  }
  manifest["parameters"] = params;

  std::size_t moment_scalars = 0;
  if (resume != nullptr) {
    std::size_t trainable = 0;
    for (const auto& p : named) {
      if (!p.trainable) continue;
      if (trainable >= resume->first_moment.size() || resume->first_moment[trainable].size() != p.tensor.numel() ||
          resume->second_moment[trainable].size() != p.tensor.numel()) {
        throw StateError("optimizer moments do not match parameter '" + p.name + "'");
      }
      moment_scalars += p.tensor.numel();
      ++trainable;
    }
    if (trainable != resume->first_moment.size()) throw StateError("optimizer moment count mismatch");
    manifest["resume"] = {{"step", resume->step},
                          {"first_moment_offset", offset},
                          {"second_moment_offset", offset + moment_scalars * sizeof(double)},
                          {"count", moment_scalars},
                          {"run", resume->run}};
    offset += 2 * moment_scalars * sizeof(double);
  }
  manifest["payload_bytes"] = offset;

  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : named) write_doubles(out, p.tensor.data());
  if (resume != nullptr) {
    for (const auto& m : resume->first_moment) write_doubles(out, m);
    for (const auto& v : resume->second_moment) write_doubles(out, v);
  }
  if (!out) throw FormatError("failed while writing checkpoint '" + path + "'");
}

json read_checkpoint_manifest(const std::string& path) { return read_raw(path).manifest; }

Checkpoint load_checkpoint(const std::string& path) {
  RawFile raw = read_raw(path);
  Checkpoint ckpt;
  try {
    const ModelConfig cfg = model_config_from_json(raw.manifest.at("config"));
    ckpt.weights = init_weights(cfg, cfg.seed);
    auto named = ckpt.weights.parameters();
    const json& params = raw.manifest.at("parameters");
    if (params.size() != named.size()) throw FormatError("checkpoint parameter list does not match its config");
    for (std::size_t i = 0; i < named.size(); ++i) {
      const json& desc = params[i];
      if (desc.at("name").get<std::string>() != named[i].name ||
          desc.at("shape").get<Shape>() != named[i].tensor.shape()) {
        throw FormatError("checkpoint parameter " + std::to_string(i) + " ('" + desc.at("name").get<std::string>() +
                          "') does not match expected '" + named[i].name + "'");
      }
      auto values = slice(raw.payload, desc.at("offset").get<std::uint64_t>(), named[i].tensor.numel());
      std::copy(values.begin(), values.end(), named[i].tensor.mutable_data().begin());
    }
    if (raw.manifest.contains("resume")) {
      const json& r = raw.manifest["resume"];
      ResumeState resume;
      resume.step = r.at("step").get<std::uint64_t>();
      resume.run = r.at("run");
      std::uint64_t m_off = r.at("first_moment_offset").get<std::uint64_t>();
      std::uint64_t v_off = r.at("second_moment_offset").get<std::uint64_t>();
      for (const auto& p : named) {
        if (!p.trainable) continue;
        auto m = slice(raw.payload, m_off, p.tensor.numel());
        auto v = slice(raw.payload, v_off, p.tensor.numel());
        resume.first_moment.emplace_back(m.begin(), m.end());
        resume.second_moment.emplace_back(v.begin(), v.end());
        m_off += p.tensor.numel() * sizeof(double);
        v_off += p.tensor.numel() * sizeof(double);
      }
      ckpt.resume = std::move(resume);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest is malformed: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config is invalid: ") + e.what());
  }
  return ckpt;
}

}  // namespace stagformer
