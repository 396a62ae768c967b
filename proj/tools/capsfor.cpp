// capsfor: train, evaluate and run the capsule forgery detector.
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical abort.
// Failures print one JSON line {"error": kind, "message": text} to stderr.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "capsfor/capsfor.hpp"

namespace fs = std::filesystem;
using namespace capsfor;

namespace {

struct Overrides {
  std::string config;
  std::string checkpoint;
  std::string manifest;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> capsules;
  std::optional<std::size_t> classes;
  std::optional<std::size_t> input_size;
};

void info(const std::string& msg) { std::cerr << "capsfor: " << msg << '\n'; }

RunConfig resolve_config(const Overrides& o, bool require_file) {
  RunConfig c;
  if (!o.config.empty()) {
    c = load_config(o.config);
  } else if (require_file) {
    throw ConfigError("--config is required");
  }
  if (!o.manifest.empty()) c.data.manifest = o.manifest;
  if (!o.out.empty()) {
    c.io.checkpoint_dir = fs::path(o.out) / "checkpoints";
    c.io.report_dir = fs::path(o.out) / "report";
  }
  if (o.seed) c.train.seed = *o.seed;
  if (o.capsules) c.model.capsules = *o.capsules;
  if (o.classes) {
    if (*o.classes != c.model.classes) c.class_names = default_class_names(*o.classes);
    c.model.classes = *o.classes;
  }
  if (o.input_size) c.input_size = *o.input_size;
  c.validate();
  return c;
}

VggPrefix<float> make_prefix(const RunConfig& c) {
  VggPrefix<float> p;
  if (c.io.weights.empty()) {
    RngStream rng(c.io.prefix_seed);
    p = build_vgg_prefix<float>(rng);
  } else {
    p = load_vgg_prefix<float>(c.io.weights);
  }
  p.trainable = c.fine_tune_prefix;
  return p;
}

Checkpoint<float> open_checkpoint(const std::string& path, const CapsuleConfig* expect = nullptr) {
  Checkpoint<float> ck = load_checkpoint<float>(path, expect);
  if (ck.prefix.convs[0].weight.rank() != 4) throw FormatError(path + ": checkpoint holds no feature extractor");
  return ck;
}

CropSpec crop_spec(const RunConfig& c) { return {c.data.crop, c.input_size, c.data.patch_size}; }

nlohmann::json run_metadata(const RunConfig& c) {
  return {{"class_names", c.class_names},
          {"input_size", c.input_size},
          {"crop", crop_mode_name(c.data.crop)},
          {"patch_size", c.data.patch_size}};
}

/// Front-end settings stored in a checkpoint, overridable from the command line.
RunConfig config_from_checkpoint(const Checkpoint<float>& ck, const Overrides& o) {
  RunConfig c;
  if (!o.config.empty()) c = load_config(o.config);
  c.model = ck.net.config;
  try {
    c.class_names = ck.run.at("class_names").get<std::vector<std::string>>();
    c.input_size = ck.run.at("input_size").get<std::size_t>();
    c.data.crop = parse_crop_mode(ck.run.at("crop").get<std::string>());
    c.data.patch_size = ck.run.at("patch_size").get<std::size_t>();
  } catch (const nlohmann::json::exception&) {
    if (o.config.empty()) c.class_names = default_class_names(c.model.classes);
  }
  if (!o.manifest.empty()) c.data.manifest = o.manifest;
  if (o.input_size) c.input_size = *o.input_size;
  if (!o.out.empty()) c.io.report_dir = o.out;
  c.train.routing = ck.train.routing;
  return c;
}

LoadedSplit<float> load(const Manifest& m, const std::string& split, std::size_t cap, const RunConfig& c,
                        const VggPrefix<float>& prefix) {
  LoadedSplit<float> s = load_split<float>(m, split, cap, crop_spec(c), c.fine_tune_prefix ? nullptr : &prefix);
  if (!s.skipped.empty()) {
    info(std::to_string(s.skipped.size()) + " missing file(s) skipped in split '" + split + "', first: " + s.skipped.front());
  }
  return s;
}

void write_text(const fs::path& path, const std::string& text) { write_file(path, text); }

void write_report(const fs::path& dir, const ScoreReport& r) {
  write_scores(dir / "scores.jsonl", r.samples);
  write_scores(dir / "group_scores.jsonl", r.groups);
  write_text(dir / "report.json", to_json(r).dump(2) + "\n");
  write_text(dir / "summary.txt", summary_table({{"image", r.sample_level}, {"group", r.group_level}}));
  write_text(dir / "roc_image.csv", roc_csv(r.sample_level));
  write_text(dir / "roc_group.csv", roc_csv(r.group_level));
}

int cmd_train(const Overrides& o) {
  RunConfig c = resolve_config(o, true);
  if (c.data.manifest.empty()) throw ConfigError("data.manifest is not set");
  const Manifest manifest = load_manifest(c.data.manifest, c.class_names);
  const TrainConfig tc = c.resolved_train();

  Checkpoint<float> state;
  if (!o.checkpoint.empty()) {
    state = open_checkpoint(o.checkpoint, &c.model);
    info("resuming from " + o.checkpoint + " after epoch " + std::to_string(state.epoch));
  } else {
    state.prefix = make_prefix(c);
    RngStream rng = RngStream(tc.seed).split(0x1417);
    state.net = CapsuleNetwork<float>::init(c.model, rng);
  }
  state.train = tc;
  state.run = run_metadata(c);

  const LoadedSplit<float> train = load(manifest, "train", c.data.frames_train, c, state.prefix);
  if (train.data.empty()) throw DataError("training split is empty");
  const LoadedSplit<float> val = load(manifest, "val", c.data.frames_eval, c, state.prefix);
  info("train samples " + std::to_string(train.data.size()) + ", val samples " + std::to_string(val.data.size()));

  fs::create_directories(c.io.checkpoint_dir);
  std::ofstream log(c.io.checkpoint_dir / "train_log.jsonl", state.epoch ? std::ios::app : std::ios::trunc);
  double best = state.metrics.value("best_accuracy", -1.0);
  for (std::size_t epoch = state.epoch; epoch < tc.epochs; ++epoch) {
    const EpochReport rep = train_epoch(state.net, &state.prefix, train.data, tc, state.adam, epoch);
    nlohmann::json line{{"epoch", epoch + 1}, {"loss", rep.mean_loss}, {"train_accuracy", rep.accuracy}};
    double score = rep.accuracy;
    if (!val.data.empty()) {
      const ScoreReport vr = evaluate(state.net, &state.prefix, val.data, tc.routing);
      line["val"] = to_json(vr);
      score = vr.group_level.accuracy;
    }
    log << line.dump() << '\n' << std::flush;
    std::cout << line.dump() << '\n';
    state.epoch = epoch + 1;
    const bool improved = score > best;
    if (improved) best = score;
    state.metrics = {{"last", line}, {"best_accuracy", best}};
    if (tc.checkpoint_every && state.epoch % tc.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03zu.ckpt", state.epoch);
      save_checkpoint(c.io.checkpoint_dir / name, state);
    }
    if (improved) save_checkpoint(c.io.checkpoint_dir / "best.ckpt", state);
    save_checkpoint(c.io.checkpoint_dir / "last.ckpt", state);
  }
  return 0;
}

int cmd_eval(const Overrides& o, const std::string& split) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const Checkpoint<float> ck = open_checkpoint(o.checkpoint);
  RunConfig c = config_from_checkpoint(ck, o);
  if (c.data.manifest.empty()) throw ConfigError("no manifest: pass --manifest or a config with data.manifest");
  const Manifest manifest = load_manifest(c.data.manifest, c.class_names);
  c.fine_tune_prefix = false;
  const LoadedSplit<float> data = load(manifest, split, c.data.frames_eval, c, ck.prefix);
  if (data.data.empty()) throw DataError("split '" + split + "' is empty");
  const ScoreReport r = evaluate(ck.net, &ck.prefix, data.data, c.train.routing);
  write_report(c.io.report_dir, r);
  std::cout << summary_table({{"image", r.sample_level}, {"group", r.group_level}});
  return 0;
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".ppm";
}

int cmd_infer(const Overrides& o, const std::vector<std::string>& inputs) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const Checkpoint<float> ck = open_checkpoint(o.checkpoint);
  const RunConfig c = config_from_checkpoint(ck, o);
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in)) {
        if (e.is_regular_file() && is_image_file(e.path())) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.emplace_back(in);
    }
  }
  if (files.empty()) throw DataError("no input images");
  for (const auto& f : files) {
    std::vector<std::vector<double>> probs;
    for (const auto& view : prepare_image(read_image<float>(f), crop_spec(c))) {
      const Tensor<float> feats = extract_features(ck.prefix, normalize_image(ck.prefix.normalization, view));
      const Tensor<float> p = infer_probs(ck.net, feats, c.train.routing);
      probs.emplace_back(p.data().begin(), p.data().end());
    }
    const std::vector<double> mean = aggregate_scores(probs);
    nlohmann::json line{{"path", f.string()},
                        {"probs", mean},
                        {"label", c.class_names.at(predicted_class(mean))},
                        {"units", probs.size()}};
    std::cout << line.dump() << '\n';
  }
  return 0;
}

int cmd_saliency(const Overrides& o, const std::string& image, const std::string& target) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (o.out.empty()) throw ConfigError("--out is required");
  const Checkpoint<float> ck = open_checkpoint(o.checkpoint);
  Overrides o2 = o;
  o2.out.clear();
  const RunConfig c = config_from_checkpoint(ck, o2);
  std::size_t cls = 0;
  auto it = std::find(c.class_names.begin(), c.class_names.end(), target);
  if (it != c.class_names.end()) {
    cls = static_cast<std::size_t>(it - c.class_names.begin());
  } else {
    try {
      cls = std::stoul(target);
    } catch (const std::exception&) {
      throw ConfigError("--class must be a class name or index, got '" + target + "'");
    }
    if (cls >= c.model.classes) throw ConfigError("--class index out of range");
  }
  const Tensor<float> img = resize_bilinear(read_image<float>(image), c.input_size, c.input_size);
  write_png_gray(o.out, saliency_map(ck.net, ck.prefix, img, cls, c.train.routing));
  return 0;
}

int cmd_inspect(const Overrides& o) {
  CapsuleNetwork<float> net;
  VggPrefix<float> prefix;
  if (!o.checkpoint.empty()) {
    Checkpoint<float> ck = open_checkpoint(o.checkpoint);
    net = std::move(ck.net);
    prefix = std::move(ck.prefix);
  } else {
    RunConfig c = resolve_config(o, false);
    RngStream rng(0);
    prefix = build_vgg_prefix<float>(rng);
    net = CapsuleNetwork<float>::init(c.model, rng);
  }
  const std::size_t pre = parameter_count(prefix);
  const std::size_t caps = parameter_count(net);
  const std::size_t routing = net.config.capsules * net.config.classes * kOutputDim * kCapsuleDim;
  const std::size_t trunk = (caps - routing) / net.config.capsules;
  const std::size_t per_capsule = caps / net.config.capsules;
  nlohmann::json j{{"capsules", net.config.capsules},
                   {"classes", net.config.classes},
                   {"capsule_dim", kCapsuleDim},
                   {"output_dim", kOutputDim},
                   {"prefix_parameters", pre},
                   {"trunk_parameters_per_capsule", trunk},
                   {"routing_parameters", routing},
                   {"per_capsule_parameters", per_capsule},
                   {"capsule_parameters", caps},
                   {"total_parameters", pre + caps}};
  std::printf("feature extractor   VGG-19 conv1_1..conv3_4 + 3 max pools, 256 channels out\n");
  std::printf("primary capsules    %zu x [conv 256-64, conv 64-16, stat pool, conv1d 2-8, conv1d 8-1] -> u in R^%zu\n",
              net.config.capsules, kCapsuleDim);
  std::printf("output capsules     %zu x R^%zu, dynamic routing\n", net.config.classes, kOutputDim);
  std::printf("prefix parameters   %zu\n", pre);
  std::printf("per capsule         %zu (trunk %zu + routing %zu)\n", per_capsule, trunk,
              net.config.classes * kOutputDim * kCapsuleDim);
  std::printf("capsule parameters  %zu\n", caps);
  std::printf("total parameters    %zu\n", pre + caps);
  std::printf("%s\n", j.dump().c_str());
  return 0;
}

int exit_code(const Error& e) {
  const std::string k = e.kind();
  if (k == "config" || k == "parameter") return 2;
  if (k == "numerical") return 4;
  return 3;
}

void report_error(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Capsule-network detector for manipulated images and video frames"};
  app.require_subcommand(1);
  Overrides o;
  auto common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint file");
    sub->add_option("--manifest", o.manifest, "dataset manifest (JSON lines)");
    sub->add_option("--out", o.out, "output directory or file");
    sub->add_option("--seed", o.seed, "random seed");
    sub->add_option("--capsules", o.capsules, "number of primary capsules (3 light, 10 full)");
    sub->add_option("--classes", o.classes, "number of output capsules");
    sub->add_option("--input-size", o.input_size, "square model input size in pixels");
  };

  auto* train = app.add_subcommand("train", "train a model; --checkpoint resumes");
  common(train);
  auto* eval = app.add_subcommand("eval", "score a manifest split and write a report");
  common(eval);
  std::string split = "test";
  eval->add_option("--split", split, "manifest split to score")->check(CLI::IsMember({"train", "val", "test"}));
  auto* infer = app.add_subcommand("infer", "print class probabilities for images (JSON lines)");
  common(infer);
  std::vector<std::string> inputs;
  infer->add_option("inputs", inputs, "image files or directories")->required();
  auto* saliency = app.add_subcommand("saliency", "write a guided-backprop saliency map as grayscale PNG");
  common(saliency);
  std::string image, target = "1";
  saliency->add_option("image", image, "input image")->required();
  saliency->add_option("--class", target, "target class name or index");
  auto* inspect = app.add_subcommand("inspect", "print the architecture and parameter counts");
  common(inspect);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    report_error("config", e.what());
    return 2;
  }

  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o, split);
    if (*infer) return cmd_infer(o, inputs);
    if (*saliency) return cmd_saliency(o, image, target);
    if (*inspect) return cmd_inspect(o);
  } catch (const Error& e) {
    report_error(e.kind(), e.what());
    return exit_code(e);
  } catch (const std::filesystem::filesystem_error& e) {
    report_error("data", e.what());
    return 3;
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
  return 0;
}
