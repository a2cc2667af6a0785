// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Labeled datasets: the CIFAR-10 binary reader and synthetic sets.
 */
#pragma once

#include <condnet/tensor.hpp>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace condnet {

struct Dataset {
  /// [N x features] or [N x C x H x W], values in [0, 1].
  Tensor<float> images;
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  /// Per-sample shape (images without the batch dimension).
  Shape sample_shape() const;
  Dataset subset(const std::vector<std::size_t> &indices) const;
  /// Throws DataError unless labels and images agree and labels < classes.
  void check() const;
};

/// Reads CIFAR-10 binary records (1 label byte + 3072 channel-planar pixel
/// bytes). `path` is a batch file or a directory; for a directory the files
/// data_batch_1..5.bin (or test_batch.bin when `test` is set) are read in
/// order. limit = 0 reads everything.
Dataset load_cifar10(const std::filesystem::path &path, std::size_t limit = 0,
                     bool test = false);

enum class SyntheticKind { TwoClusters, BlockClasses };
SyntheticKind parse_synthetic_kind(const std::string &name);

struct SyntheticOptions {
  // block_classes
  std::size_t channels = 4;
  std::size_t size = 8;
  std::size_t classes = 4;
  std::size_t groups = 2;
  float noise = 0.3f;
};

/// two_clusters: 2-D points around (0.25, 0.25) and (0.75, 0.75), Gaussian
/// with sigma 0.08 truncated at radius 0.2, so the classes are separable.
/// block_classes: images whose channel block (label mod groups) carries a
/// class pattern (horizontal bar for label / groups even, vertical otherwise)
/// over uniform noise; other blocks hold noise only.
Dataset gen_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed,
                      const SyntheticOptions &opt = {});

struct SplitSpec {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  /// Throws ArgumentError unless the sets are disjoint and cover [0, n).
  void check(std::size_t n) const;
};

/// Shuffled split with n_val / n_test samples; the rest is training data.
SplitSpec make_split(std::size_t n, std::size_t n_val, std::size_t n_test,
                     std::uint64_t seed);

/// Random horizontal mirror and up to `shift` pixels of zero-filled
/// translation per sample (the crop analog). Feature vectors pass through.
Tensor<float> augment(const Tensor<float> &images, std::mt19937_64 &rng,
                      std::size_t shift = 2);

/// Image shifted by (dy, dx) with zero fill, optionally mirrored; x is
/// [N x C x H x W].
Tensor<float> shift_image(const Tensor<float> &x, long dy, long dx, bool mirror);

/// Directory named by CONDNET_DATA, or empty when unset.
std::filesystem::path data_directory();

} // namespace condnet
