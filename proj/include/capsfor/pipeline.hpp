#pragma once

// Pre-processing (crops, patch tiling, frame selection from manifests) and
// post-processing (probability averaging over patches or frames).

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "capsfor/errors.hpp"
#include "capsfor/tensor.hpp"

namespace capsfor {

/// Pixel rectangle: x, y of the top-left corner, then width and height.
struct BBox {
  std::size_t x = 0, y = 0, w = 0, h = 0;
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct ManifestEntry {
  std::string path;  // as written in the manifest
  std::filesystem::path resolved;
  std::string label;
  std::string split;  // train | val | test
  std::string group_id;
  std::optional<BBox> bbox;
  std::optional<long> frame_index;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> classes;

  std::size_t class_index(const std::string& label) const {
    auto it = std::find(classes.begin(), classes.end(), label);
    if (it == classes.end()) throw DataError("label '" + label + "' is not one of the configured classes");
    return static_cast<std::size_t>(it - classes.begin());
  }
};

/**
 * Parses JSON-lines records {path, label, split, group_id, bbox?, frame_index?}.
 * Relative paths resolve against `base_dir`. Paths must be unique and
 * labels must come from `classes`.
 */
inline Manifest parse_manifest(std::istream& in, const std::vector<std::string>& classes,
                               const std::filesystem::path& base_dir = {}) {
  Manifest m;
  m.classes = classes;
  std::set<std::string> paths;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "manifest line " + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": " + e.what());
    }
    if (!j.is_object()) throw DataError(where + ": expected a JSON object");
    static const std::set<std::string> known{"path", "label", "split", "group_id", "bbox", "frame_index"};
    for (const auto& [k, v] : j.items()) {
      if (!known.count(k)) throw DataError(where + ": unknown field '" + k + "'");
    }
    ManifestEntry e;
    try {
      e.path = j.at("path").get<std::string>();
      e.label = j.at("label").get<std::string>();
      e.split = j.at("split").get<std::string>();
      e.group_id = j.at("group_id").get<std::string>();
      if (j.contains("bbox")) {
        const auto b = j.at("bbox").get<std::array<long, 4>>();
        if (b[0] < 0 || b[1] < 0 || b[2] <= 0 || b[3] <= 0) throw DataError(where + ": bbox must be non-negative with positive size");
        e.bbox = BBox{static_cast<std::size_t>(b[0]), static_cast<std::size_t>(b[1]), static_cast<std::size_t>(b[2]),
                      static_cast<std::size_t>(b[3])};
      }
      if (j.contains("frame_index")) e.frame_index = j.at("frame_index").get<long>();
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(where + ": " + ex.what());
    }
    if (e.split != "train" && e.split != "val" && e.split != "test") {
      throw DataError(where + ": split must be train, val or test");
    }
    if (std::find(classes.begin(), classes.end(), e.label) == classes.end()) {
      throw DataError(where + ": label '" + e.label + "' is not one of the configured classes");
    }
    if (!paths.insert(e.path).second) throw DataError(where + ": duplicate path '" + e.path + "'");
    const std::filesystem::path p(e.path);
    e.resolved = p.is_absolute() ? p : base_dir / p;
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path, const std::vector<std::string>& classes) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  return parse_manifest(in, classes, path.parent_path());
}

inline void write_manifest(std::ostream& out, const std::vector<ManifestEntry>& entries) {
  for (const auto& e : entries) {
    nlohmann::json j{{"path", e.path}, {"label", e.label}, {"split", e.split}, {"group_id", e.group_id}};
    if (e.bbox) j["bbox"] = {e.bbox->x, e.bbox->y, e.bbox->w, e.bbox->h};
    if (e.frame_index) j["frame_index"] = *e.frame_index;
    out << j.dump() << '\n';
  }
}

struct SplitSelection {
  std::vector<ManifestEntry> samples;
  std::vector<std::string> skipped;  // manifest paths whose files are missing
};

/**
 * Samples of one split. Groups keep their first-appearance order; inside a
 * group entries are ordered by frame_index (stable, unindexed entries keep
 * manifest order) and capped at `frames_per_group` (0 = no cap). Missing
 * files are reported in `skipped` instead of failing the run.
 */
inline SplitSelection build_split(const Manifest& manifest, const std::string& split, std::size_t frames_per_group) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ManifestEntry*>> groups;
  for (const auto& e : manifest.entries) {
    if (e.split != split) continue;
    auto [it, fresh] = groups.try_emplace(e.group_id);
    if (fresh) order.push_back(e.group_id);
    it->second.push_back(&e);
  }
  SplitSelection sel;
  for (const auto& g : order) {
    auto members = groups[g];
    std::stable_sort(members.begin(), members.end(), [](const ManifestEntry* a, const ManifestEntry* b) {
      const long fa = a->frame_index.value_or(0), fb = b->frame_index.value_or(0);
      return fa < fb;
    });
    if (frames_per_group && members.size() > frames_per_group) members.resize(frames_per_group);
    for (const ManifestEntry* e : members) {
      if (std::filesystem::exists(e->resolved)) {
        sel.samples.push_back(*e);
      } else {
        sel.skipped.push_back(e->path);
      }
    }
  }
  return sel;
}

/// Exact pixel copy of a rectangle from a [C,H,W] image.
template <std::floating_point T>
Tensor<T> crop_region(const Tensor<T>& image, const BBox& box) {
  if (image.rank() != 3) throw DimensionError("crop expects [C,H,W], got " + shape_str(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (box.w == 0 || box.h == 0 || box.x + box.w > W || box.y + box.h > H) {
    throw DataError("crop region [" + std::to_string(box.x) + "," + std::to_string(box.y) + "," + std::to_string(box.w) +
                    "," + std::to_string(box.h) + "] outside image " + shape_str(image.shape()));
  }
  Tensor<T> out(Shape{C, box.h, box.w});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < box.h; ++y) {
      std::copy_n(image.raw() + (c * H + box.y + y) * W + box.x, box.w, out.raw() + (c * box.h + y) * box.w);
    }
  return out;
}

/// S x S crop at offsets floor((H-S)/2), floor((W-S)/2).
template <std::floating_point T>
Tensor<T> center_crop(const Tensor<T>& image, std::size_t size) {
  if (image.rank() != 3) throw DimensionError("center_crop expects [C,H,W], got " + shape_str(image.shape()));
  const std::size_t H = image.dim(1), W = image.dim(2);
  if (size == 0 || size > std::min(H, W)) {
    throw DataError("center crop " + std::to_string(size) + " larger than image " + shape_str(image.shape()));
  }
  return crop_region(image, BBox{(W - size) / 2, (H - size) / 2, size, size});
}

/// Non-overlapping P x P tiles in row-major order; right/bottom remainders are dropped.
template <std::floating_point T>
std::vector<Tensor<T>> split_patches(const Tensor<T>& image, std::size_t patch) {
  if (image.rank() != 3) throw DimensionError("split_patches expects [C,H,W], got " + shape_str(image.shape()));
  const std::size_t H = image.dim(1), W = image.dim(2);
  if (patch == 0 || H < patch || W < patch) {
    throw DataError("image " + shape_str(image.shape()) + " smaller than patch size " + std::to_string(patch));
  }
  std::vector<Tensor<T>> out;
  for (std::size_t py = 0; py + patch <= H; py += patch)
    for (std::size_t px = 0; px + patch <= W; px += patch) out.push_back(crop_region(image, BBox{px, py, patch, patch}));
  return out;
}

/// Bilinear resampling of [C,H,W] to [C,out_h,out_w] (pixel-centre aligned).
template <std::floating_point T>
Tensor<T> resize_bilinear(const Tensor<T>& image, std::size_t out_h, std::size_t out_w) {
  if (image.rank() != 3) throw DimensionError("resize expects [C,H,W], got " + shape_str(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (H == out_h && W == out_w) return image;
  Tensor<T> out(Shape{C, out_h, out_w});
  const double sy = static_cast<double>(H) / static_cast<double>(out_h);
  const double sx = static_cast<double>(W) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const T* p = image.raw() + c * H * W;
        const double top = p[y0 * W + x0] * (1 - wx) + p[y0 * W + x1] * wx;
        const double bot = p[y1 * W + x0] * (1 - wx) + p[y1 * W + x1] * wx;
        out[(c * out_h + y) * out_w + x] = static_cast<T>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

/// Arithmetic mean of equally sized probability vectors.
inline std::vector<double> aggregate_scores(const std::vector<std::vector<double>>& probs) {
  if (probs.empty()) throw DataError("cannot aggregate an empty score list");
  std::vector<double> out(probs.front().size(), 0.0);
  for (const auto& p : probs) {
    if (p.size() != out.size()) throw DimensionError("aggregate_scores: probability vectors differ in length");
    for (std::size_t k = 0; k < p.size(); ++k) out[k] += p[k];
  }
  for (auto& v : out) v /= static_cast<double>(probs.size());
  return out;
}

}  // namespace capsfor
