#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "l2p/tensor.hpp"

namespace l2p {

/// Immutable-after-load image dataset; pixels scaled to [0,1] by 1/255.
struct Dataset {
  Tensor images;  // [N,C,H,W]
  std::vector<int> labels;
  int class_count = 0;
  std::string split;

  std::size_t count() const { return labels.size(); }
  Shape sample_shape() const;
};

/// CIFAR binary batches: 1 label byte (2 for CIFAR-100: coarse then fine) +
/// 3072 pixel bytes per record. variant is 10 or 100; split "train" or "test".
Dataset load_cifar(const std::string& dir, int variant, const std::string& split);

/// MNIST idx files (train-images-idx3-ubyte etc.); split "train" or "test".
Dataset load_mnist(const std::string& dir, const std::string& split);

/// Class-stratified deterministic sample of n items (n == count gives a
/// permutation). Rejects n > count.
Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed);

/// Byte-faithful re-encode of a CIFAR-layout dataset (round-trip checks).
/// For variant 100 the coarse byte is fine_label / 5 (as produced by the
/// synthetic writer); real coarse labels are not retained by the loader.
std::vector<std::uint8_t> encode_cifar_records(const Dataset& ds, int variant);

struct BatchPlan {
  int batch_size = 128;
  std::uint64_t shuffle_seed = 0;
  bool flip = false;      // random horizontal flip
  bool pad_crop = false;  // 4-pixel zero pad + random crop
};

/// Yields ceil(N/B) batches covering every index exactly once per epoch; the
/// per-epoch permutation and any augmentation draws are functions of
/// (shuffle_seed, epoch) only.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, const BatchPlan& plan, int epoch);
  bool next(Tensor& x, std::vector<int>& y);
  std::size_t batch_count() const;

 private:
  const Dataset* ds_;
  BatchPlan plan_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  RngStream rng_;
};

/// Writes a deterministic class-conditional synthetic dataset in the exact
/// CIFAR-10 binary layout (data_batch_1.bin.., test_batch.bin), loadable by
/// load_cifar. Stand-in for environments without the real archive.
void write_synthetic_cifar10(const std::string& dir, int train_n, int test_n, int classes,
                             std::uint64_t seed);

}  // namespace l2p
