// SPDX-License-Identifier: Apache-2.0

#include <condnet/tensor.hpp>

#include <gtest/gtest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

using namespace condnet;

TEST(Tensor, ShapeAndStorageAgree) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(shape_numel(t.shape()), t.numel());
  EXPECT_EQ(shape_string(t.shape()), "[2x3x4]");
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), DimensionError);
}

TEST(Tensor, RowMajorIndexing) {
  Tensor<double> t({2, 3});
  for (std::size_t i = 0; i < 6; ++i)
    t[i] = double(i);
  EXPECT_EQ((t.at({1, 2})), 5.0);
  EXPECT_EQ((t.at({0, 1})), 1.0);
  EXPECT_THROW((t.at({2, 0})), DimensionError);
}

TEST(Tensor, ReshapeKeepsDataAndRowsSlice) {
  Tensor<float> t({4, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  const Tensor<float> r = t.reshape({2, 4});
  EXPECT_EQ(r.storage(), t.storage());
  EXPECT_THROW(t.reshape({3, 3}), DimensionError);
  const Tensor<float> s = t.rows(1, 3);
  EXPECT_EQ(s.shape(), (Shape{2, 2}));
  EXPECT_EQ(s.storage(), (std::vector<float>{2, 3, 4, 5}));
}

TEST(Tensor, FiniteCheck) {
  Tensor<double> t({2}, {1.0, 2.0});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(TensorIo, BinaryLayoutIsRankDimsThenValues) {
  const Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 8u + 2 * 8u + 6 * 4u);
  std::uint64_t rank = 0, d0 = 0;
  std::memcpy(&rank, bytes.data(), 8);
  std::memcpy(&d0, bytes.data() + 8, 8);
  EXPECT_EQ(rank, 2u);
  EXPECT_EQ(d0, 2u);
  float first = 0;
  std::memcpy(&first, bytes.data() + 24, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(TensorIo, RoundTripAndWidthConversion) {
  const Tensor<double> t({3}, {0.1, -2.5, 1e-300});
  std::stringstream ss;
  write_tensor(ss, t);
  std::stringstream again(ss.str());
  EXPECT_EQ(read_tensor<double>(again), t);
  std::stringstream widened(ss.str());
  const Tensor<float> f = read_tensor<float>(widened);
  EXPECT_EQ(f[0], 0.1f);
  EXPECT_EQ(f[1], -2.5f);
}

TEST(TensorIo, TruncatedPayloadIsAFormatError) {
  const Tensor<float> t({4}, {1, 2, 3, 4});
  std::stringstream ss;
  write_tensor(ss, t);
  std::string bytes = ss.str();
  bytes.pop_back();
  std::stringstream cut(bytes);
  EXPECT_THROW(read_tensor<float>(cut), FormatError);
}
