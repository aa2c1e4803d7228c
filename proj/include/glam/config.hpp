#pragma once

// Flat `key = value` config files with # comments. CLI flags override file
// values; the fully resolved config is echoed into every output directory.

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "glam/data.hpp"
#include "glam/model.hpp"
#include "glam/train.hpp"

namespace glam {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

struct KvConfig {
  std::map<std::string, std::string> values;

  static KvConfig parse_text(const std::string& text) {
    KvConfig kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(lineno) +
                          " is not `key = value`: " + line);
      std::string key = detail::trim(line.substr(0, eq));
      std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError("empty key on config line " + std::to_string(lineno));
      kv.values[key] = value;
    }
    return kv;
  }

  static KvConfig parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_text(ss.str());
  }

  bool has(const std::string& key) const { return values.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values[key] = value; }

  std::string get_str(const std::string& key, const std::string& dflt) const {
    auto it = values.find(key);
    return it == values.end() ? dflt : it->second;
  }
  i64 get_int(const std::string& key, i64 dflt) const {
    auto it = values.find(key);
    if (it == values.end()) return dflt;
    try {
      return std::stoll(it->second);
    } catch (...) {
      throw ConfigError("key '" + key + "': not an integer: " + it->second);
    }
  }
  u64 get_u64(const std::string& key, u64 dflt) const {
    auto it = values.find(key);
    if (it == values.end()) return dflt;
    try {
      return std::stoull(it->second);
    } catch (...) {
      throw ConfigError("key '" + key + "': not an unsigned integer: " + it->second);
    }
  }
  double get_double(const std::string& key, double dflt) const {
    auto it = values.find(key);
    if (it == values.end()) return dflt;
    try {
      return std::stod(it->second);
    } catch (...) {
      throw ConfigError("key '" + key + "': not a number: " + it->second);
    }
  }
  bool get_bool(const std::string& key, bool dflt) const {
    auto it = values.find(key);
    if (it == values.end()) return dflt;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("key '" + key + "': not a bool: " + it->second);
  }
  std::vector<int> get_int_list(const std::string& key, std::vector<int> dflt) const {
    auto it = values.find(key);
    if (it == values.end()) return dflt;
    std::vector<int> out;
    std::stringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = detail::trim(tok);
      if (tok.empty()) continue;
      try {
        out.push_back(std::stoi(tok));
      } catch (...) {
        throw ConfigError("key '" + key + "': not an integer list: " + it->second);
      }
    }
    if (out.empty()) throw ConfigError("key '" + key + "': empty list");
    return out;
  }
};

// Everything a run needs, resolved from defaults, file, and flag overrides.
struct RunConfig {
  u64 seed = 0;
  ModelConfig model;
  TrainConfig train;
  TaskConfig task;
};

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys{
      "seed",
      "img_h", "img_w", "patch", "chans", "window", "ng", "classes", "heads",
      "depths", "glam_stages", "gmsa", "nlu", "nlu_residual", "decoder_symmetric",
      "epochs", "batch", "steps", "lr0", "poly_power", "weight_decay", "augment",
      "win_px", "targets_min", "targets_max", "distractors_min", "distractors_max",
      "noise", "balanced_keys", "n_train", "n_eval"};
  return keys;
}

struct DatasetMeta {
  int n_train = 64;
  int n_eval = 32;
};

inline RunConfig resolve_config(const KvConfig& kv, DatasetMeta* meta = nullptr) {
  for (const auto& [key, value] : kv.values)
    if (!known_config_keys().count(key))
      throw ConfigError("unknown config key '" + key + "'");

  RunConfig rc;
  rc.seed = kv.get_u64("seed", 0);

  ModelConfig& m = rc.model;
  m.img_h = static_cast<int>(kv.get_int("img_h", 64));
  m.img_w = static_cast<int>(kv.get_int("img_w", 64));
  m.patch = static_cast<int>(kv.get_int("patch", 4));
  m.chans = static_cast<int>(kv.get_int("chans", 32));
  m.window = static_cast<int>(kv.get_int("window", 4));
  m.ng = static_cast<int>(kv.get_int("ng", 4));
  m.classes = static_cast<int>(kv.get_int("classes", 5));
  m.heads = static_cast<int>(kv.get_int("heads", 2));
  m.depths = kv.get_int_list("depths", {2, 2});
  if (kv.has("glam_stages")) m.glam_stages = kv.get_int_list("glam_stages", {});
  m.gmsa = kv.get_bool("gmsa", true);
  m.nlu = kv.get_bool("nlu", true);
  m.nlu_residual = kv.get_bool("nlu_residual", true);
  m.decoder_symmetric = kv.get_bool("decoder_symmetric", true);

  TrainConfig& t = rc.train;
  t.epochs = static_cast<int>(kv.get_int("epochs", 10));
  t.batch = static_cast<int>(kv.get_int("batch", 8));
  t.steps = kv.get_int("steps", 0);
  t.lr0 = kv.get_double("lr0", 6e-5);
  t.poly_power = kv.get_double("poly_power", 1.0);
  t.weight_decay = kv.get_double("weight_decay", 0.01);
  t.augment = kv.get_bool("augment", true);
  t.seed = rc.seed;

  TaskConfig& k = rc.task;
  k.img_h = m.img_h;
  k.img_w = m.img_w;
  k.win_px = static_cast<int>(kv.get_int("win_px", m.window * m.patch));
  k.targets_min = static_cast<int>(kv.get_int("targets_min", 1));
  k.targets_max = static_cast<int>(kv.get_int("targets_max", 3));
  k.distractors_min = static_cast<int>(kv.get_int("distractors_min", 1));
  k.distractors_max = static_cast<int>(kv.get_int("distractors_max", 2));
  k.noise = kv.get_double("noise", 0.02);
  k.balanced_keys = kv.get_bool("balanced_keys", false);

  if (meta) {
    meta->n_train = static_cast<int>(kv.get_int("n_train", 64));
    meta->n_eval = static_cast<int>(kv.get_int("n_eval", 32));
  }
  return rc;
}

inline std::string int_list_str(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

// Canonical echo of every key with its final value, fixed order: written to
// stdout and into output directories for provenance.
inline std::string resolved_config_text(const RunConfig& rc, const DatasetMeta& meta) {
  const ModelConfig& m = rc.model;
  const TrainConfig& t = rc.train;
  const TaskConfig& k = rc.task;
  std::string out;
  auto kvline = [&](const std::string& key, const std::string& value) {
    out += key + " = " + value + "\n";
  };
  kvline("seed", std::to_string(rc.seed));
  kvline("img_h", std::to_string(m.img_h));
  kvline("img_w", std::to_string(m.img_w));
  kvline("patch", std::to_string(m.patch));
  kvline("chans", std::to_string(m.chans));
  kvline("window", std::to_string(m.window));
  kvline("ng", std::to_string(m.ng));
  kvline("classes", std::to_string(m.classes));
  kvline("heads", std::to_string(m.heads));
  kvline("depths", int_list_str(m.depths));
  kvline("glam_stages", m.glam_stages.empty()
                            ? int_list_str(std::vector<int>(m.depths.size(), 1))
                            : int_list_str(m.glam_stages));
  kvline("gmsa", m.gmsa ? "true" : "false");
  kvline("nlu", m.nlu ? "true" : "false");
  kvline("nlu_residual", m.nlu_residual ? "true" : "false");
  kvline("decoder_symmetric", m.decoder_symmetric ? "true" : "false");
  kvline("epochs", std::to_string(t.epochs));
  kvline("batch", std::to_string(t.batch));
  kvline("steps", std::to_string(t.steps));
  kvline("lr0", fmt_g(t.lr0, 12));
  kvline("poly_power", fmt_g(t.poly_power, 12));
  kvline("weight_decay", fmt_g(t.weight_decay, 12));
  kvline("augment", t.augment ? "true" : "false");
  kvline("win_px", std::to_string(k.win_px));
  kvline("targets_min", std::to_string(k.targets_min));
  kvline("targets_max", std::to_string(k.targets_max));
  kvline("distractors_min", std::to_string(k.distractors_min));
  kvline("distractors_max", std::to_string(k.distractors_max));
  kvline("noise", fmt_g(k.noise, 12));
  kvline("balanced_keys", k.balanced_keys ? "true" : "false");
  kvline("n_train", std::to_string(meta.n_train));
  kvline("n_eval", std::to_string(meta.n_eval));
  return out;
}

}  // namespace glam
