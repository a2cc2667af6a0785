// SPDX-License-Identifier: Apache-2.0

#include <condnet/data.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <numeric>

namespace condnet {

Shape Dataset::sample_shape() const {
  Shape s(images.shape().begin() + 1, images.shape().end());
  return s;
}

Dataset Dataset::subset(const std::vector<std::size_t> &indices) const {
  Dataset out;
  out.classes = classes;
  out.provenance = provenance;
  Shape s = images.shape();
  const std::size_t stride = images.numel() / std::max<std::size_t>(1, s[0]);
  s[0] = indices.size();
  std::vector<float> data;
  data.reserve(indices.size() * stride);
  for (std::size_t i : indices) {
    if (i >= size())
      throw ArgumentError("subset index " + std::to_string(i) + " out of range");
    data.insert(data.end(), images.ptr() + i * stride,
                images.ptr() + (i + 1) * stride);
    out.labels.push_back(labels[i]);
  }
  out.images = Tensor<float>(std::move(s), std::move(data));
  return out;
}

void Dataset::check() const {
  if (labels.empty())
    throw DataError("dataset is empty");
  if (images.rank() < 2 || images.dim(0) != labels.size())
    throw DataError("dataset has " + std::to_string(labels.size()) +
                    " labels for images " + shape_string(images.shape()));
  for (std::size_t l : labels)
    if (l >= classes)
      throw DataError("label " + std::to_string(l) + " outside [0, " +
                      std::to_string(classes) + ")");
}

// ---- CIFAR-10 ---------------------------------------------------------------------

namespace {

constexpr std::size_t kCifarPixels = 3 * 32 * 32;
constexpr std::size_t kCifarRecord = 1 + kCifarPixels;

void read_cifar_file(const std::filesystem::path &file, std::size_t limit,
                     std::vector<float> &pixels, std::vector<std::size_t> &labels) {
  std::ifstream in(file, std::ios::binary);
  if (!in)
    throw DataError("cannot open CIFAR-10 file " + file.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() % kCifarRecord)
    throw FormatError(file.string() + ": truncated record at byte offset " +
                      std::to_string(buf.size() - buf.size() % kCifarRecord) +
                      " (file size " + std::to_string(buf.size()) +
                      " is not a multiple of 3073)");
  const std::size_t records = buf.size() / kCifarRecord;
  for (std::size_t r = 0; r < records && (limit == 0 || labels.size() < limit); ++r) {
    const unsigned char *rec = buf.data() + r * kCifarRecord;
    if (rec[0] > 9)
      throw FormatError(file.string() + ": label " + std::to_string(rec[0]) +
                        " at byte offset " + std::to_string(r * kCifarRecord));
    labels.push_back(rec[0]);
    for (std::size_t p = 0; p < kCifarPixels; ++p)
      pixels.push_back(static_cast<float>(rec[1 + p]) / 255.0f);
  }
}

} // namespace

Dataset load_cifar10(const std::filesystem::path &path, std::size_t limit,
                     bool test) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    if (test) {
      files.push_back(path / "test_batch.bin");
    } else {
      for (int i = 1; i <= 5; ++i)
        files.push_back(path / ("data_batch_" + std::to_string(i) + ".bin"));
    }
  } else {
    files.push_back(path);
  }
  std::vector<float> pixels;
  std::vector<std::size_t> labels;
  for (const auto &f : files) {
    if (limit != 0 && labels.size() >= limit)
      break;
    read_cifar_file(f, limit, pixels, labels);
  }
  if (labels.empty())
    throw DataError("no CIFAR-10 records in " + path.string());
  Dataset d;
  d.images = Tensor<float>({labels.size(), 3, 32, 32}, std::move(pixels));
  d.labels = std::move(labels);
  d.classes = 10;
  d.provenance = "cifar10:" + path.string();
  return d;
}

// ---- synthetic ----------------------------------------------------------------------

SyntheticKind parse_synthetic_kind(const std::string &name) {
  if (name == "two_clusters")
    return SyntheticKind::TwoClusters;
  if (name == "block_classes")
    return SyntheticKind::BlockClasses;
  throw ArgumentError("unknown synthetic dataset '" + name +
                      "' (expected two_clusters or block_classes)");
}

Dataset gen_synthetic(SyntheticKind kind, std::size_t n, std::uint64_t seed,
                      const SyntheticOptions &opt) {
  if (n < 2)
    throw ArgumentError("synthetic datasets need n >= 2");
  std::mt19937_64 rng(seed);
  Dataset d;
  d.provenance = "synthetic:" + std::string(kind == SyntheticKind::TwoClusters
                                                ? "two_clusters"
                                                : "block_classes") +
                 ":seed=" + std::to_string(seed);
  if (kind == SyntheticKind::TwoClusters) {
    std::normal_distribution<double> noise(0.0, 0.08);
    std::vector<float> pts;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t label = i % 2;
      const double c = label ? 0.75 : 0.25;
      double dx, dy;
      do {
        dx = noise(rng);
        dy = noise(rng);
      } while (dx * dx + dy * dy > 0.2 * 0.2);
      pts.push_back(static_cast<float>(c + dx));
      pts.push_back(static_cast<float>(c + dy));
      d.labels.push_back(label);
    }
    d.images = Tensor<float>({n, 2}, std::move(pts));
    d.classes = 2;
    return d;
  }

  const std::size_t C = opt.channels, S = opt.size, K = opt.classes, G = opt.groups;
  if (G == 0 || C % G || K < G || S < 4)
    throw ArgumentError("block_classes needs groups dividing channels, classes >= "
                        "groups and size >= 4");
  const std::size_t block = C / G;
  std::uniform_real_distribution<float> u(0.0f, opt.noise);
  std::uniform_int_distribution<std::size_t> pos(1, S - 3);
  Tensor<float> img({n, C, S, S});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % K;
    d.labels.push_back(label);
    float *x = img.ptr() + i * C * S * S;
    for (std::size_t p = 0; p < C * S * S; ++p)
      x[p] = u(rng);
    const std::size_t g = label % G;
    const bool horizontal = (label / G) % 2 == 0;
    const std::size_t at = pos(rng);
    for (std::size_t c = g * block; c < (g + 1) * block; ++c)
      for (std::size_t a = 0; a < S; ++a)
        for (std::size_t w = at; w < at + 2; ++w) {
          const std::size_t yy = horizontal ? w : a, xx = horizontal ? a : w;
          x[(c * S + yy) * S + xx] = std::min(1.0f, x[(c * S + yy) * S + xx] + 0.7f);
        }
  }
  d.images = std::move(img);
  d.classes = K;
  return d;
}

void SplitSpec::check(std::size_t n) const {
  std::vector<std::uint8_t> seen(n, 0);
  for (const auto *set : {&train, &val, &test})
    for (std::size_t i : *set) {
      if (i >= n)
        throw ArgumentError("split index " + std::to_string(i) + " out of range");
      if (seen[i]++)
        throw ArgumentError("split sets overlap at index " + std::to_string(i));
    }
  if (std::count(seen.begin(), seen.end(), 0))
    throw ArgumentError("split sets do not cover the dataset");
}

SplitSpec make_split(std::size_t n, std::size_t n_val, std::size_t n_test,
                     std::uint64_t seed) {
  if (n_val + n_test >= n)
    throw ArgumentError("validation + test sizes leave no training data");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  SplitSpec s;
  s.val.assign(idx.begin(), idx.begin() + n_val);
  s.test.assign(idx.begin() + n_val, idx.begin() + n_val + n_test);
  s.train.assign(idx.begin() + n_val + n_test, idx.end());
  return s;
}

Tensor<float> shift_image(const Tensor<float> &x, long dy, long dx, bool mirror) {
  if (x.rank() != 4)
    return x;
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<float> out(x.shape());
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) {
        const long sy = long(y) - dy;
        long sx = long(xx) - dx;
        if (sy < 0 || sy >= long(H) || sx < 0 || sx >= long(W))
          continue;
        if (mirror)
          sx = long(W) - 1 - sx;
        out[(nc * H + y) * W + xx] = x[(nc * H + sy) * W + sx];
      }
  return out;
}

Tensor<float> augment(const Tensor<float> &images, std::mt19937_64 &rng,
                      std::size_t shift) {
  if (images.rank() != 4)
    return images;
  const std::size_t N = images.dim(0);
  std::uniform_int_distribution<long> off(-long(shift), long(shift));
  std::bernoulli_distribution flip(0.5);
  std::vector<float> data;
  data.reserve(images.numel());
  for (std::size_t i = 0; i < N; ++i) {
    const long dy = off(rng), dx = off(rng);
    const Tensor<float> one = shift_image(images.rows(i, i + 1), dy, dx, flip(rng));
    data.insert(data.end(), one.data().begin(), one.data().end());
  }
  return Tensor<float>(images.shape(), std::move(data));
}

std::filesystem::path data_directory() {
  const char *env = std::getenv("CONDNET_DATA");
  return env ? std::filesystem::path(env) : std::filesystem::path();
}

} // namespace condnet
