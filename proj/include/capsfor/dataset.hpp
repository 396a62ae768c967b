#pragma once

// Manifest split -> model inputs (cropped, resized or tiled, then optionally
// passed through the frozen feature extractor).

#include <string>
#include <vector>

#include "capsfor/config.hpp"
#include "capsfor/image_io.hpp"
#include "capsfor/pipeline.hpp"
#include "capsfor/training.hpp"
#include "capsfor/vgg.hpp"

namespace capsfor {

struct CropSpec {
  CropMode mode = CropMode::none;
  std::size_t input_size = 128;
  std::size_t patch_size = 100;
};

/// Model-ready views of one image: one tensor, or one per patch.
template <std::floating_point T>
std::vector<Tensor<T>> prepare_image(const Tensor<T>& image, const CropSpec& spec,
                                     const std::optional<BBox>& bbox = std::nullopt) {
  const std::size_t S = spec.input_size;
  switch (spec.mode) {
    case CropMode::none:
      return {resize_bilinear(image, S, S)};
    case CropMode::bbox:
      if (!bbox) throw DataError("crop mode 'bbox' needs a bbox for every sample");
      return {resize_bilinear(crop_region(image, *bbox), S, S)};
    case CropMode::center:
      return {center_crop(image, S)};
    case CropMode::patches:
      return split_patches(image, spec.patch_size);
  }
  return {};
}

template <std::floating_point T>
struct LoadedSplit {
  Dataset<T> data;
  std::vector<std::string> skipped;
};

/**
 * Loads one manifest split. Patch mode turns every image into several
 * samples ("<path>#<k>") grouped by image; otherwise the manifest
 * group_id is kept. With `prefix` the inputs are cached features,
 * without it raw images.
 */
template <std::floating_point T>
LoadedSplit<T> load_split(const Manifest& manifest, const std::string& split, std::size_t frames_per_group,
                          const CropSpec& spec, const VggPrefix<T>* prefix) {
  const SplitSelection sel = build_split(manifest, split, frames_per_group);
  LoadedSplit<T> out;
  out.skipped = sel.skipped;
  out.data.images = prefix == nullptr;
  for (const auto& e : sel.samples) {
    const std::size_t label = manifest.class_index(e.label);
    const std::vector<Tensor<T>> views = prepare_image(read_image<T>(e.resolved), spec, e.bbox);
    for (std::size_t k = 0; k < views.size(); ++k) {
      const bool tiled = spec.mode == CropMode::patches;
      Tensor<T> x = prefix ? extract_features(*prefix, normalize_image(prefix->normalization, views[k])) : views[k];
      out.data.add(std::move(x), label, tiled ? e.path + "#" + std::to_string(k) : e.path, tiled ? e.path : e.group_id);
    }
  }
  return out;
}

}  // namespace capsfor
