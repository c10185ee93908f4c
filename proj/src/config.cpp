#include "stagformer/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <vector>

#include "stagformer/errors.hpp"

namespace stagformer {

namespace {

using nlohmann::json;

enum class Kind { kCount, kInteger64, kReal, kFlag, kOptionalCount };

const char* kind_name(Kind kind) {
  switch (kind) {
    case Kind::kCount: return "non-negative integer";
    case Kind::kInteger64: return "non-negative integer";
    case Kind::kReal: return "number";
    case Kind::kFlag: return "boolean";
    case Kind::kOptionalCount: return "non-negative integer or null";
  }
  return "value";
}

struct Field {
  const char* key;
  Kind kind;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <typename Member>
Field field(const char* key, Kind kind, Member member) {
  return Field{key, kind, [member](const RunConfig& c) { return json(member(const_cast<RunConfig&>(c))); },
               [member](RunConfig& c, const json& v) {
                 using T = std::remove_reference_t<decltype(member(c))>;
                 member(c) = v.get<T>();
               }};
}

const std::vector<Field>& model_fields() {
  static const std::vector<Field> fields = {
      field("vocab_size", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.model.vocab_size; }),
      field("d_model", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.model.d_model; }),
      field("n_heads", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.model.n_heads; }),
      field("d_ff", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.model.d_ff; }),
      field("total_layers", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.model.total_layers; }),
      field("stacks", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.model.stacks; }),
      field("weight_sharing", Kind::kFlag, [](RunConfig& c) -> bool& { return c.model.weight_sharing; }),
      Field{"cross_window", Kind::kOptionalCount,
            [](const RunConfig& c) { return c.model.cross_window ? json(*c.model.cross_window) : json(nullptr); },
            [](RunConfig& c, const json& v) {
              c.model.cross_window = v.is_null() ? std::nullopt : std::optional<std::size_t>(v.get<std::size_t>());
            }},
      field("max_seq_len", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.model.max_seq_len; }),
      field("rope_base", Kind::kReal, [](RunConfig& c) -> double& { return c.model.rope_base; }),
      field("seed", Kind::kInteger64, [](RunConfig& c) -> std::uint64_t& { return c.model.seed; }),
      field("init_std", Kind::kReal, [](RunConfig& c) -> double& { return c.model.init_std; }),
  };
  return fields;
}

const std::vector<Field>& train_fields() {
  static const std::vector<Field> fields = {
      field("seq_len", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.train.seq_len; }),
      field("batch_size", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.train.batch_size; }),
      field("lr", Kind::kReal, [](RunConfig& c) -> double& { return c.train.lr; }),
      field("beta1", Kind::kReal, [](RunConfig& c) -> double& { return c.train.beta1; }),
      field("beta2", Kind::kReal, [](RunConfig& c) -> double& { return c.train.beta2; }),
      field("eps", Kind::kReal, [](RunConfig& c) -> double& { return c.train.eps; }),
      field("warmup_steps", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.train.warmup_steps; }),
      field("clip_norm", Kind::kReal, [](RunConfig& c) -> double& { return c.train.clip_norm; }),
      field("validation_fraction", Kind::kReal, [](RunConfig& c) -> double& { return c.train.validation_fraction; }),
      field("eval_every", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.train.eval_every; }),
      field("eval_batches", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.train.eval_batches; }),
      field("checkpoint_every", Kind::kCount, [](RunConfig& c) -> std::size_t& { return c.train.checkpoint_every; }),
  };
  return fields;
}

bool type_matches(Kind kind, const json& v) {
  switch (kind) {
    case Kind::kCount:
    case Kind::kInteger64: return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    case Kind::kReal: return v.is_number();
    case Kind::kFlag: return v.is_boolean();
    case Kind::kOptionalCount:
      return v.is_null() || v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }
  return false;
}

const Field* find_field(const std::vector<const std::vector<Field>*>& tables, std::string_view key) {
  for (const auto* table : tables) {
    for (const Field& f : *table) {
      if (key == f.key) return &f;
    }
  }
  return nullptr;
}

void assign(const Field& f, RunConfig& cfg, const json& v) {
  if (!type_matches(f.kind, v)) {
    throw ConfigError(std::string(f.key) + ": expected " + kind_name(f.kind) + ", got " + v.dump());
  }
  f.set(cfg, v);
}

void read_fields(const json& doc, RunConfig& cfg, const std::vector<const std::vector<Field>*>& tables,
                 bool allow_schema_version) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (allow_schema_version && it.key() == "schema_version") continue;
    const Field* f = find_field(tables, it.key());
    if (f == nullptr) throw ConfigError("unknown config key '" + it.key() + "'");
    assign(*f, cfg, it.value());
  }
}

json parse_scalar(Kind kind, std::string_view key, std::string_view text) {
  auto bad = [&]() {
    return ConfigError(std::string(key) + ": cannot parse '" + std::string(text) + "' as " + kind_name(kind));
  };
  if (kind == Kind::kFlag) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw bad();
  }
  if (kind == Kind::kOptionalCount && (text == "null" || text == "none" || text == "inf")) return nullptr;
  if (kind == Kind::kReal) {
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size()) throw bad();
    return value;
  }
  std::uint64_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) throw bad();
  return value;
}

}  // namespace

json model_config_to_json(const ModelConfig& cfg) {
  RunConfig run;
  run.model = cfg;
  json doc = json::object();
  for (const Field& f : model_fields()) doc[f.key] = f.get(run);
  return doc;
}

ModelConfig model_config_from_json(const json& doc) {
  RunConfig run;
  read_fields(doc, run, {&model_fields()}, false);
  return run.model;
}

json run_config_to_json(const RunConfig& cfg) {
  json doc = json::object();
  doc["schema_version"] = kConfigSchemaVersion;
  for (const Field& f : model_fields()) doc[f.key] = f.get(cfg);
  for (const Field& f : train_fields()) doc[f.key] = f.get(cfg);
  return doc;
}

RunConfig run_config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  if (!doc.contains("schema_version")) throw ConfigError("schema_version: missing");
  const json& version = doc["schema_version"];
  if (!version.is_number_integer() || version.get<int>() != kConfigSchemaVersion) {
    throw ConfigError("schema_version: expected " + std::to_string(kConfigSchemaVersion) + ", got " + version.dump());
  }
  RunConfig cfg;
  read_fields(doc, cfg, {&model_fields(), &train_fields()}, true);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(doc);
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' must have the form key=value");
  }
  const std::string_view key = assignment.substr(0, eq);
  const std::string_view value = assignment.substr(eq + 1);
  const Field* f = find_field({&model_fields(), &train_fields()}, key);
  if (f == nullptr) throw ConfigError("unknown config key '" + std::string(key) + "'");
  assign(*f, cfg, parse_scalar(f->kind, key, value));
}

}  // namespace stagformer
