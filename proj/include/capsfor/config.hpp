#pragma once

// Run configuration for the command-line front end (JSON). Unknown keys are
// rejected and everything is validated before any compute starts.
//
// {
//   "model": {"capsules": 3, "classes": 2, "class_names": ["real", "fake"],
//             "input_size": 128,
//             "routing": {"iterations": 2, "noise_sigma": 0.1, "dropout_p": 0.05}},
//   "train": {"epochs": 25, "batch": "auto", "lr": 5e-4, "seed": 0,
//             "checkpoint_every": 1, "refresh_batch_norm": true,
//             "fine_tune_prefix": false},
//   "data":  {"manifest": "data/manifest.jsonl", "crop": "none",
//             "patch_size": 100, "frames_train": 100, "frames_eval": 10},
//   "io":    {"weights": "", "prefix_seed": 0,
//             "checkpoint_dir": "runs/checkpoints", "report_dir": "runs/report"}
// }
//
// Relative paths resolve against the directory of the config file. An
// empty "weights" selects the random-init feature extractor.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "capsfor/capsule.hpp"
#include "capsfor/errors.hpp"
#include "capsfor/training.hpp"

namespace capsfor {

enum class CropMode { none, bbox, center, patches };

inline CropMode parse_crop_mode(const std::string& s) {
  if (s == "none") return CropMode::none;
  if (s == "bbox") return CropMode::bbox;
  if (s == "center") return CropMode::center;
  if (s == "patches") return CropMode::patches;
  throw ConfigError("data.crop must be one of none, bbox, center, patches (got '" + s + "')");
}

inline std::string crop_mode_name(CropMode m) {
  switch (m) {
    case CropMode::none: return "none";
    case CropMode::bbox: return "bbox";
    case CropMode::center: return "center";
    case CropMode::patches: return "patches";
  }
  return "none";
}

struct DataConfig {
  std::filesystem::path manifest;
  CropMode crop = CropMode::none;
  std::size_t patch_size = 100;
  std::size_t frames_train = 100;
  std::size_t frames_eval = 10;
};

struct IoConfig {
  std::filesystem::path weights;  // empty: random fallback prefix
  std::uint64_t prefix_seed = 0;
  std::filesystem::path checkpoint_dir = "runs/checkpoints";
  std::filesystem::path report_dir = "runs/report";
};

struct RunConfig {
  CapsuleConfig model;
  std::vector<std::string> class_names{"real", "fake"};
  std::size_t input_size = 128;
  bool batch_auto = true;
  bool fine_tune_prefix = false;
  TrainConfig train;
  DataConfig data;
  IoConfig io;

  /// Batch size after resolving "auto" against the input size.
  std::size_t batch() const { return batch_auto ? default_batch_size(input_size) : train.batch; }

  TrainConfig resolved_train() const {
    TrainConfig t = train;
    t.batch = batch();
    return t;
  }

  void validate() const {
    if (model.capsules < 1) throw ConfigError("model.capsules must be >= 1");
    if (model.classes < 2) throw ConfigError("model.classes must be >= 2");
    if (class_names.size() != model.classes) {
      throw ConfigError("model.class_names lists " + std::to_string(class_names.size()) + " names for " +
                        std::to_string(model.classes) + " classes");
    }
    if (std::set<std::string>(class_names.begin(), class_names.end()).size() != class_names.size()) {
      throw ConfigError("model.class_names must be unique");
    }
    if (input_size < 24) throw ConfigError("model.input_size must be >= 24 (three pools and two 3x3 convolutions)");
    if (data.crop == CropMode::patches && data.patch_size < 24) throw ConfigError("data.patch_size must be >= 24");
    if (data.frames_train < 1 || data.frames_eval < 1) throw ConfigError("data.frames_train/frames_eval must be >= 1");
    try {
      resolved_train().validate();
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
  }
};

inline std::vector<std::string> default_class_names(std::size_t classes) {
  if (classes == 2) return {"real", "fake"};
  std::vector<std::string> out{"real"};
  for (std::size_t k = 1; k < classes; ++k) out.push_back("fake" + std::to_string(k));
  return out;
}

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw ConfigError("unknown key '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

template <class V>
void read_opt(const nlohmann::json& j, const char* key, const std::string& where, V& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + where + "." + key + "': " + j.at(key).dump());
  }
}

inline void read_path(const nlohmann::json& j, const char* key, const std::string& where,
                      const std::filesystem::path& base, std::filesystem::path& out) {
  std::string s;
  if (!j.contains(key)) {
    if (!out.empty() && out.is_relative()) out = base / out;
    return;
  }
  read_opt(j, key, where, s);
  const std::filesystem::path p(s);
  out = s.empty() || p.is_absolute() ? p : base / p;
}

}  // namespace detail

/// Parses a configuration document; relative paths resolve against `base_dir`.
inline RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using detail::check_keys;
  using detail::read_opt;
  RunConfig c;
  check_keys(j, "", {"model", "train", "data", "io"});

  const nlohmann::json empty = nlohmann::json::object();
  const auto& m = j.contains("model") ? j.at("model") : empty;
  check_keys(m, "model", {"capsules", "classes", "class_names", "input_size", "routing"});
  read_opt(m, "capsules", "model", c.model.capsules);
  read_opt(m, "classes", "model", c.model.classes);
  c.class_names = default_class_names(c.model.classes);
  read_opt(m, "class_names", "model", c.class_names);
  read_opt(m, "input_size", "model", c.input_size);
  const auto& r = m.contains("routing") ? m.at("routing") : empty;
  check_keys(r, "model.routing", {"iterations", "noise_sigma", "dropout_p"});
  read_opt(r, "iterations", "model.routing", c.train.routing.iterations);
  read_opt(r, "noise_sigma", "model.routing", c.train.routing.noise_sigma);
  read_opt(r, "dropout_p", "model.routing", c.train.routing.dropout_p);

  const auto& t = j.contains("train") ? j.at("train") : empty;
  check_keys(t, "train", {"epochs", "batch", "lr", "seed", "checkpoint_every", "refresh_batch_norm", "fine_tune_prefix"});
  read_opt(t, "epochs", "train", c.train.epochs);
  if (t.contains("batch")) {
    if (t.at("batch").is_string()) {
      if (t.at("batch").get<std::string>() != "auto") throw ConfigError("train.batch must be a positive integer or \"auto\"");
    } else {
      c.batch_auto = false;
      read_opt(t, "batch", "train", c.train.batch);
    }
  }
  read_opt(t, "lr", "train", c.train.lr);
  read_opt(t, "seed", "train", c.train.seed);
  read_opt(t, "checkpoint_every", "train", c.train.checkpoint_every);
  read_opt(t, "refresh_batch_norm", "train", c.train.refresh_batch_norm);
  read_opt(t, "fine_tune_prefix", "train", c.fine_tune_prefix);

  const auto& d = j.contains("data") ? j.at("data") : empty;
  check_keys(d, "data", {"manifest", "crop", "patch_size", "frames_train", "frames_eval"});
  detail::read_path(d, "manifest", "data", base_dir, c.data.manifest);
  std::string crop = "none";
  read_opt(d, "crop", "data", crop);
  c.data.crop = parse_crop_mode(crop);
  read_opt(d, "patch_size", "data", c.data.patch_size);
  read_opt(d, "frames_train", "data", c.data.frames_train);
  read_opt(d, "frames_eval", "data", c.data.frames_eval);

  const auto& io = j.contains("io") ? j.at("io") : empty;
  check_keys(io, "io", {"weights", "prefix_seed", "checkpoint_dir", "report_dir"});
  detail::read_path(io, "weights", "io", base_dir, c.io.weights);
  read_opt(io, "prefix_seed", "io", c.io.prefix_seed);
  detail::read_path(io, "checkpoint_dir", "io", base_dir, c.io.checkpoint_dir);
  detail::read_path(io, "report_dir", "io", base_dir, c.io.report_dir);

  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  return parse_config(j, path.parent_path());
}

}  // namespace capsfor
