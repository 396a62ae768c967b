#pragma once

// Training loop, evaluation and checkpoints.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capsfor/adam.hpp"
#include "capsfor/capsule.hpp"
#include "capsfor/report.hpp"
#include "capsfor/vgg.hpp"
#include "capsfor/weights.hpp"

namespace capsfor {

/// Batch size for square inputs of side `input_size`: 100 up to 128 px,
/// 32 from 300 px, linear in between.
inline std::size_t default_batch_size(std::size_t input_size) {
  if (input_size <= 128) return 100;
  if (input_size >= 300) return 32;
  const double f = static_cast<double>(input_size - 128) / (300.0 - 128.0);
  return static_cast<std::size_t>(std::lround(100.0 - f * (100.0 - 32.0)));
}

struct TrainConfig {
  std::size_t epochs = 25;
  std::size_t batch = 100;
  double lr = 5e-4;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1;  // 0 disables periodic checkpoints
  bool refresh_batch_norm = true;    // re-estimate running statistics after each epoch
  RoutingConfig routing{};

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch < 1) throw ConfigError("train.batch must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be a finite value >= 0");
    routing.validate();
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Labelled inputs in manifest order: cached prefix features [256,h,w], or
/// raw [3,H,W] images when the prefix is fine-tuned.
template <std::floating_point T>
struct Dataset {
  std::vector<Tensor<T>> inputs;
  std::vector<std::size_t> labels;
  std::vector<std::string> ids;
  std::vector<std::string> groups;
  bool images = false;

  std::size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }

  void add(Tensor<T> input, std::size_t label, std::string id, std::string group) {
    inputs.push_back(std::move(input));
    labels.push_back(label);
    ids.push_back(std::move(id));
    groups.push_back(std::move(group));
  }

  /// Stacks the listed samples into [B,...]; all must share a shape.
  Tensor<T> batch(std::span<const std::size_t> idx) const {
    const Shape& s = inputs.at(idx.front()).shape();
    Shape shape{idx.size()};
    shape.insert(shape.end(), s.begin(), s.end());
    Tensor<T> out(shape);
    const std::size_t n = shape_size(s);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const Tensor<T>& x = inputs.at(idx[k]);
      if (x.shape() != s) {
        throw DimensionError("sample '" + ids[idx[k]] + "' has shape " + shape_str(x.shape()) + ", batch expects " +
                             shape_str(s));
      }
      std::copy_n(x.raw(), n, out.raw() + k * n);
    }
    return out;
  }
};

/// Precomputes prefix features for every image of `images`.
template <std::floating_point T>
Dataset<T> cache_features(const VggPrefix<T>& prefix, const Dataset<T>& images) {
  if (!images.images) return images;
  Dataset<T> out;
  for (std::size_t k = 0; k < images.size(); ++k) {
    out.add(extract_features(prefix, normalize_image(prefix.normalization, images.inputs[k])), images.labels[k],
            images.ids[k], images.groups[k]);
  }
  return out;
}

/// Capsule network plus the prefix when it is being fine-tuned.
template <std::floating_point T>
struct TrainableModel {
  CapsuleNetwork<T>* net;
  VggPrefix<T>* prefix;

  template <class F>
  void visit(F&& f) {
    net->visit(f);
    if (prefix && prefix->trainable) prefix->visit(f);
  }
  template <class F>
  void visit(F&& f) const {
    std::as_const(*net).visit(f);
    if (prefix && prefix->trainable) std::as_const(*prefix).visit(f);
  }
};

struct EpochReport {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double accuracy = 0;  // running train-mode accuracy
  std::size_t samples = 0;

  friend bool operator==(const EpochReport&, const EpochReport&) = default;
};

/// Predicted class: fake-probability >= threshold for two classes, else argmax.
template <class Range>
std::size_t predicted_class(const Range& probs, double threshold = 0.5) {
  const std::size_t J = std::size(probs);
  if (J == 2) return static_cast<double>(probs[1]) >= threshold ? 1 : 0;
  std::size_t best = 0;
  for (std::size_t j = 1; j < J; ++j) {
    if (probs[j] > probs[best]) best = j;
  }
  return best;
}

/// Seed-derived permutation of 0..n-1 (Fisher-Yates).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.next_u64() % i]);
  return idx;
}

namespace detail {
template <std::floating_point T>
Var<T> batch_features(Tape<T>& tape, const VggPrefix<T>* prefix, const Dataset<T>& data,
                      std::span<const std::size_t> idx, bool train_prefix) {
  Tensor<T> x = data.batch(idx);
  if (!data.images) return tape.constant(std::move(x));
  if (!prefix) throw ParameterError("image dataset needs a feature extractor");
  Binder<T> bind(tape, train_prefix);
  return vgg_forward(*prefix, bind, tape.constant(normalize_image(prefix->normalization, x)));
}
}  // namespace detail

/**
 * Replaces every running mean/variance with the average of the batch
 * moments seen over `data` (in order, batches of `batch`) under the
 * current weights.
 */
template <std::floating_point T>
void refresh_batch_norm(CapsuleNetwork<T>& net, const VggPrefix<T>* prefix, const Dataset<T>& data, std::size_t batch) {
  if (data.empty()) throw DataError("cannot re-estimate batch statistics on an empty split");
  std::vector<BatchMoments> total;
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::size_t batches = 0;
  for (std::size_t start = 0; start < all.size(); start += batch, ++batches) {
    std::span<const std::size_t> idx(all.data() + start, std::min(all.size(), start + batch) - start);
    Tape<T> tape;
    Binder<T> bind(tape, false);
    ForwardOptions opt;
    opt.mode = Mode::train;
    opt.routing.noise_sigma = 0;
    opt.routing.dropout_p = 0;
    ForwardResult<T> r = forward(net, bind, detail::batch_features(tape, prefix, data, idx, false), opt);
    if (total.empty()) {
      total = std::move(r.moments);
      continue;
    }
    for (std::size_t k = 0; k < total.size(); ++k) {
      for (std::size_t c = 0; c < total[k].mean.size(); ++c) {
        total[k].mean[c] += r.moments[k].mean[c];
        total[k].var[c] += r.moments[k].var[c];
      }
    }
  }
  for (auto& m : total) {
    for (auto& v : m.mean) v /= static_cast<double>(batches);
    for (auto& v : m.var) v /= static_cast<double>(batches);
  }
  net.update_running_stats(total, 1.0);
}

/**
 * One pass over `data` in a permutation drawn from the epoch's stream
 * seed.split(epoch), so any epoch can be replayed on its own.
 */
template <std::floating_point T>
EpochReport train_epoch(CapsuleNetwork<T>& net, VggPrefix<T>* prefix, const Dataset<T>& data, const TrainConfig& cfg,
                        AdamState<T>& state, std::size_t epoch) {
  if (data.empty()) throw DataError("training split is empty");
  cfg.validate();
  state.lr = cfg.lr;
  RngStream rng = RngStream(cfg.seed).split(epoch);
  const std::vector<std::size_t> order = shuffled_indices(data.size(), rng);
  const bool train_prefix = prefix && prefix->trainable && data.images;
  TrainableModel<T> model{&net, train_prefix ? prefix : nullptr};

  EpochReport rep;
  rep.epoch = epoch;
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
    const std::size_t end = std::min(order.size(), start + cfg.batch);
    std::span<const std::size_t> idx(order.data() + start, end - start);
    std::vector<std::size_t> labels;
    for (std::size_t i : idx) labels.push_back(data.labels[i]);

    Tape<T> tape;
    Binder<T> bind(tape, true);
    Var<T> x = detail::batch_features(tape, prefix, data, idx, train_prefix);
    ForwardOptions opt;
    opt.mode = Mode::train;
    opt.routing = cfg.routing;
    opt.rng = &rng;
    ForwardResult<T> r = forward(net, bind, x, opt);
    Var<T> loss = nll_loss(r.probs, labels);
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) throw NumericalError("loss diverged (NaN/Inf) in epoch " + std::to_string(epoch));
    GradientRecord<T> grads = tape.backward(loss);
    adam_step(model, grads, state);
    net.update_running_stats(r.moments);

    loss_sum += lv * static_cast<double>(idx.size());
    const Tensor<T>& p = r.probs.value();
    const std::size_t J = p.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::vector<T> row(p.raw() + b * J, p.raw() + (b + 1) * J);
      correct += predicted_class(row) == labels[b];
    }
  }
  if (cfg.refresh_batch_norm) refresh_batch_norm(net, prefix, data, cfg.batch);
  rep.samples = data.size();
  rep.mean_loss = loss_sum / static_cast<double>(data.size());
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return rep;
}

/// Infer-mode probabilities for every sample, in dataset order. Pure.
template <std::floating_point T>
std::vector<ScoreRecord> score_dataset(const CapsuleNetwork<T>& net, const VggPrefix<T>* prefix, const Dataset<T>& data,
                                       const RoutingConfig& routing, std::size_t batch = 64) {
  if (data.empty()) throw DataError("evaluation split is empty");
  std::vector<ScoreRecord> out;
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t start = 0; start < all.size(); start += batch) {
    std::span<const std::size_t> idx(all.data() + start, std::min(all.size(), start + batch) - start);
    Tape<T> tape;
    Binder<T> bind(tape, false);
    Var<T> x = detail::batch_features(tape, prefix, data, idx, false);
    ForwardOptions opt;
    opt.routing = routing;
    const Tensor<T> p = forward(net, bind, x, opt).probs.value();
    const std::size_t J = p.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const std::size_t i = idx[b];
      std::vector<double> probs(p.raw() + b * J, p.raw() + (b + 1) * J);
      out.push_back({data.ids[i], data.groups[i], data.labels[i], std::move(probs)});
    }
  }
  return out;
}

/// Per-sample scores with sample-level and group-level summaries.
struct ScoreReport {
  std::vector<ScoreRecord> samples;
  MetricSummary sample_level;
  std::vector<ScoreRecord> groups;
  MetricSummary group_level;
};

/// Summaries recomputed from per-sample scores; `per_group` caps members per group.
inline ScoreReport build_report(std::vector<ScoreRecord> samples, std::size_t classes, std::size_t per_group = 0,
                                double threshold = 0.5) {
  ScoreReport r;
  r.samples = std::move(samples);
  r.sample_level = summarize(r.samples, classes, threshold);
  r.groups = aggregate_by_group(r.samples, per_group);
  r.group_level = summarize(r.groups, classes, threshold);
  return r;
}

template <std::floating_point T>
ScoreReport evaluate(const CapsuleNetwork<T>& net, const VggPrefix<T>* prefix, const Dataset<T>& data,
                     const RoutingConfig& routing = {}, std::size_t per_group = 0) {
  return build_report(score_dataset(net, prefix, data, routing), net.config.classes, per_group);
}

inline nlohmann::json to_json(const ScoreReport& r) {
  return {{"image", to_json(r.sample_level)}, {"group", to_json(r.group_level)}};
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "CFCK", u32 version,
//   u64 n + n bytes JSON header (configs, epoch, metrics, optimiser scalars),
//   u64 n + CFW1 blob of model tensors (capsules, routing, prefix),
//   u64 n + CFW1 blob of Adam moments ("m.<name>", "v.<name>").

inline constexpr std::string_view kCheckpointMagic = "CFCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <std::floating_point T>
struct Checkpoint {
  CapsuleNetwork<T> net;
  VggPrefix<T> prefix;  // optional; left empty when no extractor is stored
  AdamState<T> adam;
  TrainConfig train;
  std::size_t epoch = 0;  // epochs completed
  nlohmann::json metrics = nlohmann::json::object();
  nlohmann::json run = nlohmann::json::object();  // front-end settings (class names, input geometry)
};

template <std::floating_point T>
std::string encode_checkpoint(const Checkpoint<T>& c) {
  nlohmann::json h;
  h["model"] = {{"capsules", c.net.config.capsules}, {"classes", c.net.config.classes},
                {"in_channels", c.net.config.in_channels}};
  h["routing"] = {{"iterations", c.train.routing.iterations}, {"noise_sigma", c.train.routing.noise_sigma},
                  {"dropout_p", c.train.routing.dropout_p}};
  h["train"] = {{"epochs", c.train.epochs}, {"batch", c.train.batch}, {"lr", c.train.lr},
                {"seed", c.train.seed}, {"checkpoint_every", c.train.checkpoint_every},
                {"refresh_batch_norm", c.train.refresh_batch_norm}};
  h["epoch"] = c.epoch;
  h["metrics"] = c.metrics;
  h["run"] = c.run;
  h["adam"] = {{"t", c.adam.t}, {"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2},
               {"eps", c.adam.eps}};
  h["prefix"] = {{"trainable", c.prefix.trainable},
                 {"mean", c.prefix.normalization.mean},
                 {"std", c.prefix.normalization.stddev}};

  WeightList params = collect_weights(c.net);
  if (c.prefix.convs[0].weight.rank() == 4) {
    for (auto& r : collect_weights(c.prefix)) params.push_back(std::move(r));
  }
  WeightList moments;
  for (const auto& [name, m] : c.adam.m) moments.push_back({"m." + name, m.template cast<float>()});
  for (const auto& [name, v] : c.adam.v) moments.push_back({"v." + name, v.template cast<float>()});

  std::string out(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  for (const std::string& blob : {h.dump(), encode_weights(params), encode_weights(moments)}) {
    detail::put_u64(out, blob.size());
    out += blob;
  }
  return out;
}

/// Parses a checkpoint; with `expect`, a different network layout is a dimension error.
template <std::floating_point T>
Checkpoint<T> decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint",
                                const CapsuleConfig* expect = nullptr) {
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError(what + ": bad magic bytes, expected \"CFCK\"");
  }
  detail::ByteReader in(bytes.substr(kCheckpointMagic.size()), what);
  if (const auto version = in.u32(); version != kCheckpointVersion) {
    throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version));
  }
  auto section = [&]() { return in.take(static_cast<std::size_t>(in.u64())); };
  const std::string_view header = section(), params = section(), moments = section();
  if (!in.done()) throw FormatError(what + ": trailing bytes after the optimiser section");

  Checkpoint<T> c;
  try {
    const auto h = nlohmann::json::parse(header);
    CapsuleConfig cfg;
    h.at("model").at("capsules").get_to(cfg.capsules);
    h.at("model").at("classes").get_to(cfg.classes);
    h.at("model").at("in_channels").get_to(cfg.in_channels);
    if (expect && (expect->capsules != cfg.capsules || expect->classes != cfg.classes ||
                   expect->in_channels != cfg.in_channels)) {
      throw DimensionError(what + ": checkpoint holds " + std::to_string(cfg.capsules) + " capsules x " +
                           std::to_string(cfg.classes) + " classes, model expects " +
                           std::to_string(expect->capsules) + " x " + std::to_string(expect->classes));
    }
    h.at("routing").at("iterations").get_to(c.train.routing.iterations);
    h.at("routing").at("noise_sigma").get_to(c.train.routing.noise_sigma);
    h.at("routing").at("dropout_p").get_to(c.train.routing.dropout_p);
    h.at("train").at("epochs").get_to(c.train.epochs);
    h.at("train").at("batch").get_to(c.train.batch);
    h.at("train").at("lr").get_to(c.train.lr);
    h.at("train").at("seed").get_to(c.train.seed);
    h.at("train").at("checkpoint_every").get_to(c.train.checkpoint_every);
    h.at("train").at("refresh_batch_norm").get_to(c.train.refresh_batch_norm);
    h.at("epoch").get_to(c.epoch);
    c.metrics = h.at("metrics");
    c.run = h.at("run");
    h.at("adam").at("t").get_to(c.adam.t);
    h.at("adam").at("lr").get_to(c.adam.lr);
    h.at("adam").at("beta1").get_to(c.adam.beta1);
    h.at("adam").at("beta2").get_to(c.adam.beta2);
    h.at("adam").at("eps").get_to(c.adam.eps);
    h.at("prefix").at("trainable").get_to(c.prefix.trainable);
    h.at("prefix").at("mean").get_to(c.prefix.normalization.mean);
    h.at("prefix").at("std").get_to(c.prefix.normalization.stddev);

    RngStream rng(0);
    c.net = CapsuleNetwork<T>::init(cfg, rng);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": malformed header: " + e.what());
  }

  WeightList records = decode_weights(params, what + " parameters");
  WeightList net_records, prefix_records;
  for (auto& r : records) (r.name.rfind("vgg.", 0) == 0 ? prefix_records : net_records).push_back(std::move(r));
  assign_weights(c.net, net_records, true);
  if (!prefix_records.empty()) {
    for (std::size_t i = 0; i < kVggLayers; ++i) {
      c.prefix.convs[i].weight = Tensor<T>(Shape{kVggChannels[i + 1], kVggChannels[i], 3, 3});
      c.prefix.convs[i].bias = Tensor<T>(Shape{kVggChannels[i + 1]});
    }
    assign_weights(c.prefix, prefix_records, true);
  }

  for (auto& r : decode_weights(moments, what + " optimiser state")) {
    const bool is_m = r.name.rfind("m.", 0) == 0, is_v = r.name.rfind("v.", 0) == 0;
    if (!is_m && !is_v) throw FormatError(what + ": unexpected optimiser record '" + r.name + "'");
    (is_m ? c.adam.m : c.adam.v).emplace(r.name.substr(2), r.tensor.template cast<T>());
  }
  return c;
}

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& c) {
  write_file(path, encode_checkpoint(c));
}

template <std::floating_point T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const CapsuleConfig* expect = nullptr) {
  return decode_checkpoint<T>(read_file(path), path.string(), expect);
}

}  // namespace capsfor
