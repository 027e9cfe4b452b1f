#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dagnas/rng.hpp"
#include "dagnas/tensor.hpp"

namespace dagnas {

// Base of every dataset problem: unreadable files, malformed containers,
// label ranges, splitting preconditions.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public DataError {
 public:
  FormatError(const std::string& path, std::size_t offset, const std::string& what);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct Dataset {
  Tensor<float> images;  // (N, C, H, W), raw values in [0, 1]
  std::vector<int> labels;
  int classes = 0;

  int size() const { return static_cast<int>(labels.size()); }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }

  Dataset subset(std::span<const std::size_t> indices) const;
  std::vector<int> class_counts() const;
  // FNV-1a over shape, pixel bytes and labels.
  std::uint64_t fingerprint() const;
  // Throws DataError unless shapes agree and every label is in [0, classes).
  void check() const;
};

Dataset concat(const Dataset& a, const Dataset& b);

// Split tags keep the three roles apart at compile time: fitness evaluation
// only accepts Valid, final testing only Test.
enum class Split { Train, Valid, Test };

template <Split S>
struct SplitData {
  Dataset data;
};

using TrainSet = SplitData<Split::Train>;
using ValidSet = SplitData<Split::Valid>;
using TestSet = SplitData<Split::Test>;

// IDX container pair: images magic 0x00000803 (N, H, W), labels magic
// 0x00000801 (N), big-endian dimensions. classes <= 0 infers max label + 1.
Dataset load_idx(const std::string& images_path, const std::string& labels_path, int classes = 0);
// Writes 8-bit IDX files; pixel values are rounded from [0, 1] to [0, 255].
void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path);

// Records of 1 label byte followed by 3 * H * W channel-major pixel bytes.
Dataset load_raw_rgb(const std::string& path, int h, int w, int classes = 10);

// Class-conditional shape patterns (bars, blobs, crosses, rings) at random
// positions with random polarity plus Gaussian noise (sigma 0.2), clamped to
// [0, 1]. Class k receives n / classes samples, the first n % classes classes
// one more. Every pattern is symmetric under horizontal flips.
Dataset synthetic(std::uint64_t seed, int n, int classes, int h, int w);

// Stratified, seeded 80/20 split; every class needs at least 5 samples.
std::pair<TrainSet, ValidSet> split_80_20(const Dataset& d, std::uint64_t seed);

// Per-channel mean and standard deviation, fitted on training data only.
struct Normalizer {
  std::vector<float> mean;
  std::vector<float> stdev;

  static Normalizer fit(const TrainSet& train);
  void apply(Tensor<float>& images) const;
};

// Eval pipeline: normalization only. The tag is preserved.
template <Split S>
SplitData<S> normalized(const SplitData<S>& split, const Normalizer& norm) {
  SplitData<S> out{split.data};
  norm.apply(out.data.images);
  return out;
}

// Zero-pads one (C, H, W) image by `pad` and crops the original size at
// offset (oy, ox) of the padded image; (pad, pad) is the identity.
void pad_crop(const float* src, float* dst, int c, int h, int w, int pad, int oy, int ox);
void flip_horizontal(float* img, int c, int h, int w);

// Training augmentation on a raw batch: pad 4, random crop, horizontal flip
// with probability 0.5, independently per image.
void augment(Tensor<float>& batch, Rng& rng, int pad = 4);

// Seeded epoch order over n samples. Each epoch is a fresh permutation cut
// into batches of `batch`; the short tail is kept, except that a tail of a
// single sample joins the previous batch (batch statistics need two).
class BatchStream {
 public:
  BatchStream(std::size_t n, int batch, Rng rng);

  std::vector<std::vector<std::size_t>> next_epoch();
  std::size_t batches_per_epoch() const;
  std::size_t size() const { return n_; }
  int batch_size() const { return batch_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }

 private:
  std::size_t n_;
  int batch_;
  Rng rng_;
};

struct Batch {
  Tensor<float> images;
  std::vector<int> labels;
};

// Gathers samples into a batch tensor.
Batch gather(const Dataset& d, std::span<const std::size_t> indices);

// Training-side data pipeline: batch order, augmentation, normalization.
class TrainFeed {
 public:
  TrainFeed(const TrainSet& train, const Normalizer& norm, int batch, bool augment, Rng order_rng, Rng augment_rng);

  std::vector<Batch> next_epoch();
  std::size_t batches_per_epoch() const { return stream_.batches_per_epoch(); }
  const Dataset& data() const { return train_->data; }

  Rng& order_rng() { return stream_.rng(); }
  Rng& augment_rng() { return augment_rng_; }
  const Rng& order_rng() const { return stream_.rng(); }
  const Rng& augment_rng() const { return augment_rng_; }

 private:
  const TrainSet* train_;
  Normalizer norm_;
  BatchStream stream_;
  bool augment_;
  Rng augment_rng_;
};

enum class DataSource { Synthetic, Idx, RawRgb };

// Where the data comes from. Synthetic pools and test sets are generated from
// independent streams of data_seed; file sources need train and test paths.
struct DataSpec {
  DataSource source = DataSource::Synthetic;
  int classes = 3;
  int height = 16;
  int width = 16;
  int synthetic_n = 3000;
  int synthetic_test_n = 1000;
  std::uint64_t data_seed = 1;
  std::string train_images, train_labels, test_images, test_labels;  // idx
  std::string train_file, test_file;                                 // raw_rgb
};

// The pool is split 80/20 into train and valid; full_train is their union,
// used only once the search is over.
struct DataBundle {
  TrainSet train;
  ValidSet valid;
  TestSet test;
  TrainSet full_train;
};

DataBundle load_bundle(const DataSpec& spec);

}  // namespace dagnas
