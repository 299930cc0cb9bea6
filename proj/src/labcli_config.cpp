#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "config_schema.inc"
#include "wmlab/labcli.hpp"
#include "wmlab/util.hpp"

namespace wmlab {

using nlohmann::json;

namespace {

json synth_to_json(const SynthParams& p) {
  return {{"image_size", p.image_size},   {"victim_pairs", p.victim_pairs},
          {"attacker_pairs", p.attacker_pairs}, {"val_pairs", p.val_pairs},
          {"eval_pairs", p.eval_pairs},   {"textures", p.textures},
          {"noise_level", p.noise_level}, {"seed", p.seed}};
}

SynthParams synth_from_json(const json& j) {
  SynthParams p;
  p.image_size = j.at("image_size");
  p.victim_pairs = j.at("victim_pairs");
  p.attacker_pairs = j.at("attacker_pairs");
  p.val_pairs = j.at("val_pairs");
  p.eval_pairs = j.at("eval_pairs");
  p.textures = j.at("textures");
  p.noise_level = j.at("noise_level");
  p.seed = j.at("seed");
  return p;
}

std::string type_name(const json& v) {
  if (v.is_null()) return "null";
  if (v.is_boolean()) return "boolean";
  if (v.is_number_integer()) return "integer";
  if (v.is_number()) return "number";
  if (v.is_string()) return "string";
  if (v.is_array()) return "array";
  return "object";
}

bool type_matches(const json& v, const std::string& t) {
  if (t == "number") return v.is_number();
  if (t == "integer") {
    if (v.is_number_integer()) return true;
    // 3.0 written by hand still counts as an integer.
    return v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<long long>(v.get<double>()));
  }
  return type_name(v) == t;
}

const json& resolve(const json& schema, const json& root) {
  if (!schema.contains("$ref")) return schema;
  const std::string ref = schema["$ref"];
  const std::string prefix = "#/$defs/";
  if (ref.rfind(prefix, 0) != 0) throw std::invalid_argument("schema: unsupported $ref " + ref);
  return root.at("$defs").at(ref.substr(prefix.size()));
}

void check(const json& doc, const json& schema_in, const json& root, const std::string& where,
           std::vector<std::string>& errors) {
  const json& schema = resolve(schema_in, root);
  const std::string at = where.empty() ? "<root>" : where;
  if (schema.contains("type")) {
    bool ok = false;
    if (schema["type"].is_array()) {
      for (const auto& t : schema["type"]) ok = ok || type_matches(doc, t.get<std::string>());
    } else {
      ok = type_matches(doc, schema["type"].get<std::string>());
    }
    if (!ok) {
      errors.push_back(at + ": expected " + schema["type"].dump() + ", got " + type_name(doc));
      return;
    }
  }
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema["enum"]) found = found || e == doc;
    if (!found) errors.push_back(at + ": " + doc.dump() + " not in " + schema["enum"].dump());
  }
  if (doc.is_number()) {
    const double v = doc.get<double>();
    if (schema.contains("minimum") && v < schema["minimum"].get<double>()) {
      errors.push_back(at + ": " + doc.dump() + " below minimum " + schema["minimum"].dump());
    }
    if (schema.contains("maximum") && v > schema["maximum"].get<double>()) {
      errors.push_back(at + ": " + doc.dump() + " above maximum " + schema["maximum"].dump());
    }
  }
  if (doc.is_array()) {
    if (schema.contains("minItems") && doc.size() < schema["minItems"].get<std::size_t>()) {
      errors.push_back(at + ": fewer than " + schema["minItems"].dump() + " items");
    }
    if (schema.contains("items")) {
      for (std::size_t i = 0; i < doc.size(); ++i) {
        check(doc[i], schema["items"], root, where + "[" + std::to_string(i) + "]", errors);
      }
    }
  }
  if (doc.is_object()) {
    const json props = schema.value("properties", json::object());
    for (const auto& r : schema.value("required", json::array())) {
      if (!doc.contains(r.get<std::string>())) {
        errors.push_back(at + ": missing required key " + r.get<std::string>());
      }
    }
    for (const auto& [k, v] : doc.items()) {
      const std::string sub = where.empty() ? k : where + "." + k;
      if (props.contains(k)) {
        check(v, props[k], root, sub, errors);
      } else if (schema.contains("additionalProperties") &&
                 schema["additionalProperties"] == false) {
        errors.push_back(sub + ": unknown key");
      }
    }
  }
}

// A config file may be partial; only the merged document must be complete.
json without_required(json schema) {
  if (schema.is_object()) {
    schema.erase("required");
    for (auto& [k, v] : schema.items()) v = without_required(v);
  }
  return schema;
}

}  // namespace

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"task", c.task},
           {"dataset", synth_to_json(c.dataset)},
           {"victim",
            {{"gnet", c.victim.gnet},
             {"hnet", c.victim.hnet},
             {"enet", c.victim.enet},
             {"disc", c.victim.disc},
             {"gnet_training", c.victim.gnet_training},
             {"training", c.victim.training},
             {"watermark", c.victim.watermark.string()}}},
           {"gateway", c.gateway},
           {"attack",
            {{"budget", c.attack.budget},
             {"parallelism", c.attack.parallelism},
             {"tau_bypass_db", c.attack.tau_bypass_db},
             {"min_pairs", c.attack.min_pairs},
             {"client_id", c.attack.client_id},
             {"gateway_url", c.attack.gateway_url},
             {"inverse", c.attack.inverse},
             {"surrogate", c.attack.surrogate},
             {"training", c.attack.training},
             {"budget_sweep", c.attack.budget_sweep}}},
           {"eval",
            {{"count", c.eval.count},
             {"sanity_gap_db", c.eval.sanity_gap_db},
             {"jpeg_qualities", c.eval.jpeg_qualities},
             {"awgn_snr_db", c.eval.awgn_snr_db},
             {"awgn_seed", c.eval.awgn_seed},
             {"residual_gain", c.eval.residual_gain},
             {"figure_rows", c.eval.figure_rows},
             {"noise_sweep", c.eval.noise_sweep},
             {"noise_sweep_count", c.eval.noise_sweep_count}}},
           {"defense",
            {{"enabled", c.defense.enabled},
             {"threshold", c.defense.threshold ? json(*c.defense.threshold) : json(nullptr)}}},
           {"output_dir", c.output_dir.string()}};
}

void from_json(const json& j, ExperimentConfig& c) {
  c.task = j.at("task");
  c.dataset = synth_from_json(j.at("dataset"));
  const json& v = j.at("victim");
  c.victim.gnet = v.at("gnet");
  c.victim.hnet = v.at("hnet");
  c.victim.enet = v.at("enet");
  c.victim.disc = v.at("disc");
  c.victim.gnet_training = v.at("gnet_training");
  c.victim.training = v.at("training");
  c.victim.watermark = v.value("watermark", std::string());
  c.gateway = j.at("gateway");
  const json& a = j.at("attack");
  c.attack.budget = a.at("budget");
  c.attack.parallelism = a.at("parallelism");
  c.attack.tau_bypass_db = a.at("tau_bypass_db");
  c.attack.min_pairs = a.at("min_pairs");
  c.attack.client_id = a.at("client_id");
  c.attack.gateway_url = a.at("gateway_url");
  c.attack.inverse = a.at("inverse");
  c.attack.surrogate = a.at("surrogate");
  c.attack.training = a.at("training");
  c.attack.budget_sweep = a.at("budget_sweep").get<std::vector<int>>();
  const json& e = j.at("eval");
  c.eval.count = e.at("count");
  c.eval.sanity_gap_db = e.at("sanity_gap_db");
  c.eval.jpeg_qualities = e.at("jpeg_qualities").get<std::vector<int>>();
  c.eval.awgn_snr_db = e.at("awgn_snr_db").get<std::vector<double>>();
  c.eval.awgn_seed = e.at("awgn_seed");
  c.eval.residual_gain = e.at("residual_gain");
  c.eval.figure_rows = e.at("figure_rows");
  c.eval.noise_sweep = e.at("noise_sweep").get<std::vector<double>>();
  c.eval.noise_sweep_count = e.at("noise_sweep_count");
  const json& d = j.at("defense");
  c.defense.enabled = d.at("enabled");
  c.defense.threshold.reset();
  if (!d.at("threshold").is_null()) c.defense.threshold = d["threshold"].get<double>();
  c.output_dir = j.at("output_dir").get<std::string>();
}

void ExperimentConfig::validate() const {
  auto bad = [](const std::string& why) {
    throw std::invalid_argument("config: " + why);
  };
  dataset.validate();
  victim.gnet_training.validate();
  victim.training.validate();
  attack.training.validate();
  gateway.validate();
  const int carrier = 3;
  victim.gnet.validate(carrier, 1);
  victim.hnet.validate(carrier, 1);
  victim.enet.validate(carrier, 1);
  victim.disc.validate(carrier, 1);
  attack.inverse.validate(carrier, 1);
  attack.surrogate.validate(carrier, 1);
  if (victim.gnet.kind != nn::NetKind::gnet || victim.hnet.kind != nn::NetKind::hnet ||
      victim.enet.kind != nn::NetKind::enet || victim.disc.kind != nn::NetKind::disc) {
    bad("victim network kinds must be gnet, hnet, enet, disc");
  }
  if (!victim.watermark.empty() && !std::filesystem::is_regular_file(victim.watermark)) {
    bad("victim.watermark " + victim.watermark.string() + " is not a file");
  }
  if (attack.inverse.kind != nn::NetKind::hnet_inverse ||
      attack.surrogate.kind != nn::NetKind::snet) {
    bad("attack networks must be hnet_inverse and snet");
  }
  if (eval.count > dataset.eval_pairs) bad("eval.count exceeds dataset.eval_pairs");
  if (eval.count < eval.figure_rows) bad("eval.figure_rows exceeds eval.count");
  if (attack.budget > dataset.attacker_pairs) bad("attack.budget exceeds dataset.attacker_pairs");
  if (attack.min_pairs > attack.budget) bad("attack.min_pairs exceeds attack.budget");
  for (int b : attack.budget_sweep) {
    if (b > attack.budget) bad("budget_sweep entries must not exceed attack.budget");
  }
  for (int q : eval.jpeg_qualities) {
    if (q < 1 || q > 100) bad("jpeg quality outside 1..100");
  }
  if (output_dir.empty()) bad("output_dir is empty");
  if (task != "deraining") bad("only the deraining task is implemented");
}

std::string ExperimentConfig::hash() const {
  json j = *this;
  j.erase("output_dir");
  j["gateway"].erase("query_log");
  // Where the attacker reaches the gateway does not change any result.
  j["attack"].erase("gateway_url");
  j["attack"].erase("parallelism");
  // The built-in glyph leaves no trace, so older hashes still match.
  if (victim.watermark.empty()) j["victim"].erase("watermark");
  return sha256_hex(j.dump());
}

const json& config_schema() {
  static const json schema = json::parse(kConfigSchemaText);
  return schema;
}

std::vector<std::string> schema_errors(const json& doc, const json& schema) {
  std::vector<std::string> errors;
  check(doc, schema, schema, "", errors);
  return errors;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' is not path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::stringstream ss(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(ss, key, '.')) keys.push_back(key);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (!node->is_object() || !node->contains(keys[i])) {
      throw std::invalid_argument("override: unknown config path '" + path + "'");
    }
    node = &(*node)[keys[i]];
  }
  *node = std::move(value);
}

ExperimentConfig load_config(const std::optional<std::filesystem::path>& file,
                             const std::vector<std::string>& overrides) {
  json doc = ExperimentConfig{};
  if (file) {
    json patch;
    try {
      patch = json::parse(read_file(*file));
    } catch (const json::parse_error& e) {
      throw std::invalid_argument("config " + file->string() + ": " + e.what());
    }
    if (!patch.is_object()) throw std::invalid_argument("config: top level must be an object");
    // Unknown keys would vanish in a merge, so check the raw file first.
    auto errors = schema_errors(patch, without_required(config_schema()));
    if (!errors.empty()) {
      std::string msg = "config " + file->string() + " violates the schema:";
      for (const auto& e : errors) msg += "\n  " + e;
      throw std::invalid_argument(msg);
    }
    doc.merge_patch(patch);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  const auto errors = schema_errors(doc, config_schema());
  if (!errors.empty()) {
    std::string msg = "config violates the schema:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw std::invalid_argument(msg);
  }
  ExperimentConfig c = doc.get<ExperimentConfig>();
  c.validate();
  return c;
}

DirLock::DirLock(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  file_ = dir / ".lock";
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(file_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      const auto written = ::write(fd, pid.data(), pid.size());
      ::close(fd);
      if (written != static_cast<ssize_t>(pid.size())) {
        std::filesystem::remove(file_);
        throw std::runtime_error("lock: cannot write " + file_.string());
      }
      return;
    }
    if (errno != EEXIST) {
      throw std::runtime_error("lock: cannot create " + file_.string() + ": " +
                               std::strerror(errno));
    }
    long owner = 0;
    std::ifstream(file_) >> owner;
    if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno == EPERM)) {
      throw LockHeld("output directory " + dir.string() + " is in use by pid " +
                     std::to_string(owner));
    }
    std::filesystem::remove(file_);  // stale
  }
  throw LockHeld("output directory " + dir.string() + ": could not take the lock");
}

DirLock::~DirLock() {
  std::error_code ec;
  std::filesystem::remove(file_, ec);
}

}  // namespace wmlab
