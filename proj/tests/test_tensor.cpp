#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "capsfor/rng.hpp"
#include "capsfor/tensor.hpp"
#include "capsfor/weights.hpp"

using namespace capsfor;

TEST(Tensor, ShapeAndIndexing) {
  Tensor<float> t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  t.at(1, 2, 3) = 5.f;
  EXPECT_EQ(t[23], 5.f);
  EXPECT_THROW(t.at(2, 0, 0), DimensionError);
  EXPECT_THROW(t.at(0, 0), DimensionError);
  EXPECT_THROW(t.dim(3), DimensionError);
}

TEST(Tensor, RejectsZeroExtentAndBadReshape) {
  EXPECT_THROW(Tensor<float>(Shape{0, 3}), DimensionError);
  EXPECT_THROW(Tensor<float>(Shape{2}, std::vector<float>{1, 2, 3}), DimensionError);
  Tensor<float> t(Shape{2, 6});
  EXPECT_EQ(t.reshaped(Shape{3, 4}).shape(), (Shape{3, 4}));
  EXPECT_THROW(t.reshaped(Shape{5}), DimensionError);
  EXPECT_THROW(Tensor<float>(Shape{2}).item(), DimensionError);
}

TEST(Tensor, FiniteCheckAndErrors) {
  Tensor<double> t(Shape{3}, 1.0);
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
  Tensor<double> a = Tensor<double>::vector({1, 2}), b = Tensor<double>::vector({1, 2, 3});
  EXPECT_THROW(a += b, DimensionError);
  EXPECT_THROW(max_abs_diff(a, b), DimensionError);
}

TEST(Tensor, RelativeErrorUsesFloor) {
  auto a = Tensor<double>::vector({1.0, 0.0}), b = Tensor<double>::vector({1.1, 1e-9});
  EXPECT_NEAR(max_rel_error(a, b), 0.1 / 1.1, 1e-12);
  EXPECT_NEAR(max_rel_error(Tensor<double>::vector({0.0}), Tensor<double>::vector({1e-9})), 1e-3, 1e-12);
}

TEST(Rng, SplitIsDeterministicAndIndependentOfDraws) {
  RngStream a(42), b(42);
  a.uniform();
  a.normal();
  EXPECT_EQ(a.split(3).next_u64(), b.split(3).next_u64());
  EXPECT_NE(b.split(3).next_u64(), b.split(4).next_u64());
  RngStream c(7), d(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(c.normal(), d.normal());
}

TEST(Weights, RoundTripIsBitExact) {
  RngStream rng(1);
  WeightList w;
  for (int k = 0; k < 3; ++k) {
    Tensor<float> t(Shape{2, static_cast<std::size_t>(k + 1), 3});
    for (auto& v : t.data()) v = static_cast<float>(rng.normal());
    w.push_back({"layer" + std::to_string(k), t});
  }
  const std::string bytes = encode_weights(w);
  const WeightList back = decode_weights(bytes);
  ASSERT_EQ(back.size(), w.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    EXPECT_EQ(back[k].name, w[k].name);
    EXPECT_EQ(back[k].tensor, w[k].tensor);
  }
  EXPECT_EQ(encode_weights(back), bytes);
}

TEST(Weights, MalformedInputRaisesFormatError) {
  WeightList w{{"a", Tensor<float>(Shape{4}, 1.f)}};
  std::string bytes = encode_weights(w);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_weights(bad), FormatError);
  EXPECT_THROW(decode_weights(bytes.substr(0, bytes.size() - 3)), FormatError);
  w.push_back({"a", Tensor<float>(Shape{1})});
  EXPECT_THROW(encode_weights(w), FormatError);
}
