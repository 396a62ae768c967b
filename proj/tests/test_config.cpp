#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "capsfor/config.hpp"

using namespace capsfor;
using nlohmann::json;

TEST(Config, Defaults) {
  const RunConfig c = parse_config(json::object());
  EXPECT_EQ(c.model.capsules, 3u);
  EXPECT_EQ(c.model.classes, 2u);
  EXPECT_EQ(c.class_names, (std::vector<std::string>{"real", "fake"}));
  EXPECT_EQ(c.batch(), 100u);
  EXPECT_DOUBLE_EQ(c.train.lr, 5e-4);
  EXPECT_EQ(c.data.crop, CropMode::none);
}

TEST(Config, RejectsBadValues) {
  EXPECT_THROW(parse_config(json{{"train", {{"epochs", 0}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"train", {{"epochz", 3}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"extra", 1}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"model", {{"routing", {{"iters", 2}}}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"train", {{"batch", "big"}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"train", {{"lr", "fast"}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"data", {{"crop", "zoom"}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"model", {{"classes", 4}, {"class_names", {"a", "b"}}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"model", {{"class_names", {"a", "a"}}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"model", {{"capsules", 0}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"model", {{"input_size", 8}}}}), ConfigError);
}

TEST(Config, BatchAndClasses) {
  const RunConfig a = parse_config(json{{"train", {{"batch", "auto"}}}, {"model", {{"input_size", 300}}}});
  EXPECT_TRUE(a.batch_auto);
  EXPECT_EQ(a.batch(), default_batch_size(300));
  const RunConfig b = parse_config(json{{"train", {{"batch", 16}}}});
  EXPECT_EQ(b.resolved_train().batch, 16u);
  const RunConfig four = parse_config(json{{"model", {{"classes", 4}}}});
  EXPECT_EQ(four.class_names.size(), 4u);
}

TEST(Config, PathsResolveAgainstConfigDir) {
  const auto dir = std::filesystem::temp_directory_path() / "capsfor_cfg_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "run.json") << R"({"data": {"manifest": "m.jsonl"}, "io": {"weights": "/abs/w.bin"}})";
  }
  const RunConfig c = load_config(dir / "run.json");
  EXPECT_EQ(c.data.manifest, dir / "m.jsonl");
  EXPECT_EQ(c.io.weights, std::filesystem::path("/abs/w.bin"));
  EXPECT_EQ(c.io.checkpoint_dir, dir / "runs/checkpoints");
  { std::ofstream(dir / "bad.json") << "{not json"; }
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
  std::filesystem::remove_all(dir);
}
