#include "l2p/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace l2p {

namespace fs = std::filesystem;

Shape Dataset::sample_shape() const {
  const auto& s = images.shape();
  return Shape(s.begin() + 1, s.end());
}

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("dataset: missing file " + path);
  f.seekg(0, std::ios::end);
  const auto size = f.tellg();
  f.seekg(0);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(size));
  f.read(reinterpret_cast<char*>(buf.data()), size);
  if (!f) throw std::runtime_error("dataset: short read on " + path);
  return buf;
}

constexpr std::size_t kCifarPixels = 3072;

}  // namespace

Dataset load_cifar(const std::string& dir, int variant, const std::string& split) {
  if (variant != 10 && variant != 100)
    throw std::invalid_argument("load_cifar: variant must be 10 or 100");
  if (split != "train" && split != "test")
    throw std::invalid_argument("load_cifar: split must be 'train' or 'test'");

  std::vector<std::string> files;
  if (variant == 10) {
    if (split == "train") {
      for (int i = 1; i <= 5; ++i) {
        const std::string p = dir + "/data_batch_" + std::to_string(i) + ".bin";
        if (fs::exists(p)) files.push_back(p);
      }
      if (files.empty())
        throw std::runtime_error("dataset: missing file " + dir + "/data_batch_1.bin");
    } else {
      files.push_back(dir + "/test_batch.bin");
    }
  } else {
    files.push_back(dir + (split == "train" ? "/train.bin" : "/test.bin"));
  }

  const std::size_t label_bytes = variant == 10 ? 1 : 2;
  const std::size_t record = label_bytes + kCifarPixels;

  std::vector<double> pixels;
  std::vector<int> labels;
  for (const auto& path : files) {
    const auto buf = read_file(path);
    if (buf.size() % record != 0) {
      const std::size_t offset = (buf.size() / record) * record;
      throw std::runtime_error("dataset: " + path + " truncated at byte offset " +
                               std::to_string(offset) + " (record size " +
                               std::to_string(record) + ", file size " +
                               std::to_string(buf.size()) + ")");
    }
    const std::size_t n = buf.size() / record;
    pixels.reserve(pixels.size() + n * kCifarPixels);
    labels.reserve(labels.size() + n);
    for (std::size_t r = 0; r < n; ++r) {
      const std::uint8_t* rec = buf.data() + r * record;
      // CIFAR-100 stores coarse then fine; fine labels are used
      const int label = rec[label_bytes - 1];
      labels.push_back(label);
      for (std::size_t i = 0; i < kCifarPixels; ++i)
        pixels.push_back(static_cast<double>(rec[label_bytes + i]) / 255.0);
    }
  }

  Dataset ds;
  ds.class_count = variant;
  ds.split = split;
  ds.labels = std::move(labels);
  ds.images = Tensor::from_data({static_cast<int>(ds.labels.size()), 3, 32, 32}, std::move(pixels));
  for (int l : ds.labels)
    if (l >= ds.class_count)
      throw std::runtime_error("dataset: label " + std::to_string(l) + " out of range for CIFAR-" +
                               std::to_string(variant));
  return ds;
}

namespace {

std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

}  // namespace

Dataset load_mnist(const std::string& dir, const std::string& split) {
  if (split != "train" && split != "test")
    throw std::invalid_argument("load_mnist: split must be 'train' or 'test'");
  const std::string stem = split == "train" ? "train" : "t10k";
  const auto images = read_file(dir + "/" + stem + "-images-idx3-ubyte");
  const auto labels = read_file(dir + "/" + stem + "-labels-idx1-ubyte");

  if (images.size() < 16 || read_be32(images.data()) != 0x803)
    throw std::runtime_error("dataset: bad idx magic in image file (expected 0x00000803)");
  if (labels.size() < 8 || read_be32(labels.data()) != 0x801)
    throw std::runtime_error("dataset: bad idx magic in label file (expected 0x00000801)");

  const std::uint32_t n = read_be32(images.data() + 4);
  const std::uint32_t rows = read_be32(images.data() + 8);
  const std::uint32_t cols = read_be32(images.data() + 12);
  const std::uint32_t nl = read_be32(labels.data() + 4);
  if (n != nl)
    throw std::runtime_error("dataset: image count " + std::to_string(n) +
                             " != label count " + std::to_string(nl));
  if (images.size() != 16 + static_cast<std::size_t>(n) * rows * cols)
    throw std::runtime_error("dataset: idx image payload truncated at byte offset " +
                             std::to_string(images.size()));
  if (labels.size() != 8 + static_cast<std::size_t>(n))
    throw std::runtime_error("dataset: idx label payload truncated");

  Dataset ds;
  ds.class_count = 10;
  ds.split = split;
  ds.labels.reserve(n);
  std::vector<double> pixels;
  pixels.reserve(static_cast<std::size_t>(n) * rows * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.labels.push_back(labels[8 + i]);
    const std::uint8_t* img = images.data() + 16 + static_cast<std::size_t>(i) * rows * cols;
    for (std::uint32_t p = 0; p < rows * cols; ++p)
      pixels.push_back(static_cast<double>(img[p]) / 255.0);
  }
  ds.images = Tensor::from_data(
      {static_cast<int>(n), 1, static_cast<int>(rows), static_cast<int>(cols)}, std::move(pixels));
  return ds;
}

Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.count())
    throw std::invalid_argument("subset: requested " + std::to_string(n) + " of " +
                                std::to_string(ds.count()) + " items");
  // group per class, shuffle within class, take proportionally
  std::vector<std::vector<std::size_t>> per_class(static_cast<std::size_t>(ds.class_count));
  for (std::size_t i = 0; i < ds.count(); ++i)
    per_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  RngStream rng(derive_seed(seed, "subset"));
  for (auto& v : per_class)
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);

  std::vector<std::size_t> take(per_class.size(), 0);
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    take[c] = std::min(per_class[c].size(), n * per_class[c].size() / ds.count());
    assigned += take[c];
  }
  for (std::size_t c = 0; assigned < n; c = (c + 1) % per_class.size()) {
    if (take[c] < per_class[c].size()) {
      ++take[c];
      ++assigned;
    }
  }

  std::vector<std::size_t> chosen;
  chosen.reserve(n);
  for (std::size_t c = 0; c < per_class.size(); ++c)
    chosen.insert(chosen.end(), per_class[c].begin(), per_class[c].begin() + take[c]);
  for (std::size_t i = chosen.size(); i > 1; --i)
    std::swap(chosen[i - 1],
              chosen[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);

  const auto sample = ds.sample_shape();
  const std::size_t stride = shape_numel(sample);
  std::vector<double> pixels;
  pixels.reserve(n * stride);
  Dataset out;
  out.class_count = ds.class_count;
  out.split = ds.split;
  out.labels.reserve(n);
  const auto src = ds.images.data();
  for (std::size_t idx : chosen) {
    out.labels.push_back(ds.labels[idx]);
    const double* s = src.data() + idx * stride;
    pixels.insert(pixels.end(), s, s + stride);
  }
  Shape shape = sample;
  shape.insert(shape.begin(), static_cast<int>(n));
  out.images = Tensor::from_data(std::move(shape), std::move(pixels));
  return out;
}

std::vector<std::uint8_t> encode_cifar_records(const Dataset& ds, int variant) {
  const auto sample = ds.sample_shape();
  if (sample != Shape{3, 32, 32})
    throw std::invalid_argument("encode_cifar_records: expected [3x32x32] samples, got " +
                                shape_str(sample));
  const std::size_t label_bytes = variant == 10 ? 1 : 2;
  std::vector<std::uint8_t> out;
  out.reserve(ds.count() * (label_bytes + kCifarPixels));
  const auto px = ds.images.data();
  for (std::size_t i = 0; i < ds.count(); ++i) {
    const int fine = ds.labels[i];
    if (variant == 100) out.push_back(static_cast<std::uint8_t>(fine / 5));
    out.push_back(static_cast<std::uint8_t>(fine));
    const double* s = px.data() + i * kCifarPixels;
    for (std::size_t p = 0; p < kCifarPixels; ++p)
      out.push_back(static_cast<std::uint8_t>(std::llround(s[p] * 255.0)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches

BatchIterator::BatchIterator(const Dataset& ds, const BatchPlan& plan, int epoch)
    : ds_(&ds), plan_(plan), rng_(derive_seed(plan.shuffle_seed, "epoch" + std::to_string(epoch))) {
  if (plan_.batch_size < 1) throw std::invalid_argument("BatchIterator: batch_size must be >= 1");
  order_.resize(ds.count());
  std::iota(order_.begin(), order_.end(), 0);
  for (std::size_t i = order_.size(); i > 1; --i)
    std::swap(order_[i - 1],
              order_[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(i) - 1))]);
}

std::size_t BatchIterator::batch_count() const {
  return (order_.size() + static_cast<std::size_t>(plan_.batch_size) - 1) /
         static_cast<std::size_t>(plan_.batch_size);
}

bool BatchIterator::next(Tensor& x, std::vector<int>& y) {
  if (pos_ >= order_.size()) return false;
  const std::size_t take = std::min(static_cast<std::size_t>(plan_.batch_size),
                                    order_.size() - pos_);
  const auto sample = ds_->sample_shape();
  const std::size_t stride = shape_numel(sample);
  std::vector<double> pixels(take * stride);
  y.resize(take);
  const auto src = ds_->images.data();
  const bool spatial = sample.size() == 3;
  const int C = spatial ? sample[0] : 0;
  const int H = spatial ? sample[1] : 0;
  const int W = spatial ? sample[2] : 0;
  for (std::size_t k = 0; k < take; ++k) {
    const std::size_t idx = order_[pos_ + k];
    y[k] = ds_->labels[idx];
    double* dst = pixels.data() + k * stride;
    std::copy_n(src.data() + idx * stride, stride, dst);
    if (spatial && plan_.flip && rng_.uniform() < 0.5) {
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i) {
          double* row = dst + (static_cast<std::size_t>(c) * H + i) * W;
          std::reverse(row, row + W);
        }
    }
    if (spatial && plan_.pad_crop) {
      const int pad = 4;
      const int dy = rng_.uniform_int(-pad, pad);
      const int dx = rng_.uniform_int(-pad, pad);
      std::vector<double> shifted(stride, 0.0);
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i) {
          const int si = i + dy;
          if (si < 0 || si >= H) continue;
          for (int j = 0; j < W; ++j) {
            const int sj = j + dx;
            if (sj < 0 || sj >= W) continue;
            shifted[(static_cast<std::size_t>(c) * H + i) * W + j] =
                dst[(static_cast<std::size_t>(c) * H + si) * W + sj];
          }
        }
      std::copy(shifted.begin(), shifted.end(), dst);
    }
  }
  pos_ += take;
  Shape shape = sample;
  shape.insert(shape.begin(), static_cast<int>(take));
  x = Tensor::from_data(std::move(shape), std::move(pixels));
  return true;
}

// ---------------------------------------------------------------------------
// Synthetic stand-in

namespace {

// Smooth per-class pattern: coarse seeded grid, bilinearly upsampled.
std::vector<double> class_pattern(int cls, std::uint64_t seed) {
  constexpr int kGrid = 8, kSize = 32;
  RngStream rng(derive_seed(seed, "class" + std::to_string(cls)));
  double grid[3][kGrid][kGrid];
  for (auto& ch : grid)
    for (auto& row : ch)
      for (auto& v : row) v = rng.uniform();
  std::vector<double> out(3 * kSize * kSize);
  const double scale = static_cast<double>(kGrid) / kSize;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < kSize; ++i)
      for (int j = 0; j < kSize; ++j) {
        const double gy = (i + 0.5) * scale - 0.5;
        const double gx = (j + 0.5) * scale - 0.5;
        const int y0 = std::clamp(static_cast<int>(std::floor(gy)), 0, kGrid - 1);
        const int x0 = std::clamp(static_cast<int>(std::floor(gx)), 0, kGrid - 1);
        const int y1 = std::min(y0 + 1, kGrid - 1);
        const int x1 = std::min(x0 + 1, kGrid - 1);
        const double fy = std::clamp(gy - y0, 0.0, 1.0);
        const double fx = std::clamp(gx - x0, 0.0, 1.0);
        const double v = grid[c][y0][x0] * (1 - fy) * (1 - fx) + grid[c][y1][x0] * fy * (1 - fx) +
                         grid[c][y0][x1] * (1 - fy) * fx + grid[c][y1][x1] * fy * fx;
        out[(static_cast<std::size_t>(c) * kSize + i) * kSize + j] = v;
      }
  return out;
}

void write_records(const std::string& path, int n, int classes, std::uint64_t seed,
                   const std::vector<std::vector<double>>& patterns, const char* tag) {
  RngStream rng(derive_seed(seed, tag));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("synthetic dataset: cannot write " + path);
  const double contrast = 0.8, noise = 0.15;
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % classes;
  for (std::size_t i = labels.size(); i > 1; --i)
    std::swap(labels[i - 1],
              labels[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  for (int i = 0; i < n; ++i) {
    const int cls = labels[static_cast<std::size_t>(i)];
    f.put(static_cast<char>(cls));
    for (double p : patterns[static_cast<std::size_t>(cls)]) {
      const double v =
          std::clamp(0.5 + contrast * (p - 0.5) + noise * rng.normal(), 0.0, 1.0);
      f.put(static_cast<char>(std::llround(v * 255.0)));
    }
  }
}

}  // namespace

void write_synthetic_cifar10(const std::string& dir, int train_n, int test_n, int classes,
                             std::uint64_t seed) {
  if (classes < 2 || classes > 10)
    throw std::invalid_argument("synthetic dataset: classes must be in [2,10]");
  fs::create_directories(dir);
  std::vector<std::vector<double>> patterns;
  for (int c = 0; c < classes; ++c) patterns.push_back(class_pattern(c, seed));
  write_records(dir + "/data_batch_1.bin", train_n, classes, seed, patterns, "train");
  write_records(dir + "/test_batch.bin", test_n, classes, seed, patterns, "test");
}

}  // namespace l2p
