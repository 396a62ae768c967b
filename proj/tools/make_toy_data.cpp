// Writes a synthetic texture dataset (PNG images plus a manifest) for
// smoke-testing the training and evaluation commands.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "capsfor/image_io.hpp"
#include "capsfor/pipeline.hpp"
#include "capsfor/toy_data.hpp"

namespace fs = std::filesystem;
using namespace capsfor;

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic real/manipulated texture dataset"};
  std::string out;
  std::size_t per_class = 100, classes = 2, size = 100, group = 1;
  std::uint64_t seed = 1;
  double val = 0.1, test = 0.2;
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--per-class", per_class, "images per class");
  app.add_option("--classes", classes, "number of classes (2-4)")->check(CLI::Range(2, 4));
  app.add_option("--size", size, "image side in pixels");
  app.add_option("--group-size", group, "consecutive images of a class sharing a group id");
  app.add_option("--seed", seed, "random seed");
  app.add_option("--val", val, "fraction of groups in the val split")->check(CLI::Range(0.0, 1.0));
  app.add_option("--test", test, "fraction of groups in the test split")->check(CLI::Range(0.0, 1.0));
  CLI11_PARSE(app, argc, argv);
  if (group < 1) group = 1;

  try {
    fs::create_directories(fs::path(out) / "images");
    const auto samples = toy::make_dataset(per_class, classes, size, seed);
    const std::size_t groups = (per_class + group - 1) / group;
    const auto n_test = static_cast<std::size_t>(static_cast<double>(groups) * test);
    const auto n_val = static_cast<std::size_t>(static_cast<double>(groups) * val);
    const std::vector<std::string> names = {"real", "fake", "fake2", "fake3"};
    std::vector<ManifestEntry> entries;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const auto& s = samples[k];
      const std::size_t index = k / classes, g = index / group;
      const std::string label = classes == 2 ? names[s.label] : (s.label == 0 ? "real" : "fake" + std::to_string(s.label));
      ManifestEntry e;
      e.path = "images/" + s.id + ".png";
      e.label = label;
      e.split = g >= groups - n_test ? "test" : (g >= groups - n_test - n_val ? "val" : "train");
      e.group_id = toy::manipulation_name(toy::kManipulations[s.label]) + "_g" + std::to_string(g);
      e.frame_index = static_cast<long>(index % group);
      write_png_rgb(fs::path(out) / e.path, s.image);
      entries.push_back(std::move(e));
    }
    std::ofstream manifest(fs::path(out) / "manifest.jsonl");
    write_manifest(manifest, entries);
    std::cout << "wrote " << entries.size() << " images to " << out << '\n';
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "data"}, {"message", e.what()}}.dump() << '\n';
    return 3;
  }
  return 0;
}
