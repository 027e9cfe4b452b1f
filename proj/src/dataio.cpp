#include "dagnas/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dagnas {

FormatError::FormatError(const std::string& path, std::size_t offset, const std::string& what)
    : DataError(path + ": byte offset " + std::to_string(offset) + ": " + what), offset_(offset) {}

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot create file");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(path + ": write failed");
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw FormatError(path, b.size(), "truncated header");
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) | (std::uint32_t(b[off + 2]) << 8) |
         std::uint32_t(b[off + 3]);
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

std::string hex_magic(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

void check_labels(const std::vector<int>& labels, int classes, const std::string& path, std::size_t first_offset,
                  std::size_t stride) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw DataError(path + ": label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                      " (byte offset " + std::to_string(first_offset + i * stride) + ") is outside [0, " +
                      std::to_string(classes) + ")");
    }
  }
}

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.classes = classes;
  const int c = channels(), h = height(), w = width();
  const std::size_t per = static_cast<std::size_t>(c) * h * w;
  out.images = Tensor<float>({static_cast<int>(indices.size()), c, h, w});
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= labels.size()) throw std::out_of_range("Dataset::subset: index " + std::to_string(src));
    std::copy_n(images.data() + src * per, per, out.images.data() + i * per);
    out.labels.push_back(labels[src]);
  }
  return out;
}

std::vector<int> Dataset::class_counts() const {
  std::vector<int> counts(static_cast<std::size_t>(std::max(classes, 0)), 0);
  for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

std::uint64_t Dataset::fingerprint() const {
  std::uint64_t h = kFnvOffset;
  for (int d : images.shape()) fnv(h, &d, sizeof d);
  fnv(h, images.data(), images.size() * sizeof(float));
  fnv(h, labels.data(), labels.size() * sizeof(int));
  fnv(h, &classes, sizeof classes);
  return h;
}

void Dataset::check() const {
  if (images.rank() != 4) throw DataError("dataset images must be (N, C, H, W)");
  if (images.dim(0) != size()) throw DataError("dataset image and label counts differ");
  if (classes < 1) throw DataError("dataset class count must be positive");
  for (int l : labels) {
    if (l < 0 || l >= classes) {
      throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.classes != b.classes || a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width()) {
    throw DataError("concat: datasets differ in classes or image shape");
  }
  Dataset out;
  out.classes = a.classes;
  out.images = Tensor<float>({a.size() + b.size(), a.channels(), a.height(), a.width()});
  std::copy_n(a.images.data(), a.images.size(), out.images.data());
  std::copy_n(b.images.data(), b.images.size(), out.images.data() + a.images.size());
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, int classes) {
  const auto ib = read_file(images_path);
  const auto lb = read_file(labels_path);
  const std::uint32_t im = read_be32(ib, 0, images_path);
  if (im != 0x00000803) {
    throw FormatError(images_path, 0, "bad magic " + hex_magic(im) + ", expected 0x00000803");
  }
  const std::uint32_t lm = read_be32(lb, 0, labels_path);
  if (lm != 0x00000801) {
    throw FormatError(labels_path, 0, "bad magic " + hex_magic(lm) + ", expected 0x00000801");
  }
  const std::uint32_t n = read_be32(ib, 4, images_path);
  const std::uint32_t h = read_be32(ib, 8, images_path);
  const std::uint32_t w = read_be32(ib, 12, images_path);
  const std::uint32_t nl = read_be32(lb, 4, labels_path);
  if (nl != n) {
    throw FormatError(labels_path, 4,
                      "label count " + std::to_string(nl) + " differs from image count " + std::to_string(n));
  }
  if (h == 0 || w == 0 || h > 65536 || w > 65536) throw FormatError(images_path, 8, "implausible image size");
  const std::size_t pixels = static_cast<std::size_t>(n) * h * w;
  if (ib.size() < 16 + pixels) {
    throw FormatError(images_path, ib.size(),
                      "truncated: expected " + std::to_string(16 + pixels) + " bytes for " + std::to_string(n) +
                          " images of " + std::to_string(h) + "x" + std::to_string(w));
  }
  if (ib.size() > 16 + pixels) throw FormatError(images_path, 16 + pixels, "trailing bytes after the last image");
  if (lb.size() < 8 + static_cast<std::size_t>(n)) {
    throw FormatError(labels_path, lb.size(), "truncated: expected " + std::to_string(8 + n) + " bytes");
  }
  if (lb.size() > 8 + static_cast<std::size_t>(n)) {
    throw FormatError(labels_path, 8 + static_cast<std::size_t>(n), "trailing bytes after the last label");
  }
  Dataset d;
  d.images = Tensor<float>({static_cast<int>(n), 1, static_cast<int>(h), static_cast<int>(w)});
  for (std::size_t i = 0; i < pixels; ++i) d.images[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  d.labels.resize(n);
  int max_label = -1;
  for (std::uint32_t i = 0; i < n; ++i) {
    d.labels[i] = lb[8 + i];
    max_label = std::max(max_label, d.labels[i]);
  }
  d.classes = classes > 0 ? classes : max_label + 1;
  check_labels(d.labels, d.classes, labels_path, 8, 1);
  return d;
}

void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
  if (d.channels() != 1) throw DataError("write_idx: IDX images hold a single channel");
  std::vector<unsigned char> ib, lb;
  put_be32(ib, 0x00000803);
  put_be32(ib, static_cast<std::uint32_t>(d.size()));
  put_be32(ib, static_cast<std::uint32_t>(d.height()));
  put_be32(ib, static_cast<std::uint32_t>(d.width()));
  for (float v : d.images.values()) {
    ib.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  put_be32(lb, 0x00000801);
  put_be32(lb, static_cast<std::uint32_t>(d.size()));
  for (int l : d.labels) {
    if (l < 0 || l > 255) throw DataError("write_idx: label " + std::to_string(l) + " does not fit a byte");
    lb.push_back(static_cast<unsigned char>(l));
  }
  write_file(images_path, ib);
  write_file(labels_path, lb);
}

Dataset load_raw_rgb(const std::string& path, int h, int w, int classes) {
  if (h < 1 || w < 1) throw DataError("load_raw_rgb: image size must be positive");
  const auto b = read_file(path);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t rec = 1 + 3 * plane;
  if (b.empty()) throw FormatError(path, 0, "empty file");
  if (b.size() % rec != 0) {
    throw FormatError(path, b.size() - b.size() % rec,
                      "size " + std::to_string(b.size()) + " is not a multiple of the record length " +
                          std::to_string(rec));
  }
  const int n = static_cast<int>(b.size() / rec);
  Dataset d;
  d.classes = classes;
  d.images = Tensor<float>({n, 3, h, w});
  d.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * rec;
    d.labels[static_cast<std::size_t>(i)] = b[off];
    float* dst = d.images.data() + static_cast<std::size_t>(i) * 3 * plane;
    for (std::size_t p = 0; p < 3 * plane; ++p) dst[p] = static_cast<float>(b[off + 1 + p]) / 255.0f;
  }
  check_labels(d.labels, classes, path, 0, rec);
  return d;
}

namespace {

// Pattern mask of one sample, values in [0, 1].
void draw_pattern(std::vector<float>& mask, int kind, int variant, int h, int w, Rng& rng) {
  std::fill(mask.begin(), mask.end(), 0.0f);
  auto set = [&](int y, int x) {
    if (y >= 0 && y < h && x >= 0 && x < w) mask[static_cast<std::size_t>(y) * w + x] = 1.0f;
  };
  const int m = std::min(h, w);
  const int thick = 1 + variant;
  switch (kind) {
    case 0:
    case 1: {  // horizontal / vertical bar
      const int len = uniform_int(rng, std::max(2, m / 2), std::max(2, (3 * m) / 4));
      const bool horiz = kind == 0;
      const int along = horiz ? w : h, across = horiz ? h : w;
      const int a0 = uniform_int(rng, 0, along - std::min(len, along));
      const int c0 = uniform_int(rng, 0, across - std::min(thick, across));
      for (int a = a0; a < a0 + len; ++a)
        for (int t = c0; t < c0 + thick; ++t) horiz ? set(t, a) : set(a, t);
      break;
    }
    case 2: {  // filled disk
      const double r = 1.5 + variant + uniform01(rng);
      const int cy = uniform_int(rng, 0, h - 1), cx = uniform_int(rng, 0, w - 1);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) set(y, x);
      break;
    }
    case 3: {  // plus sign
      const int arm = uniform_int(rng, std::max(1, m / 5), std::max(1, m / 4));
      const int cy = uniform_int(rng, 0, h - 1), cx = uniform_int(rng, 0, w - 1);
      for (int d = -arm; d <= arm; ++d)
        for (int t = 0; t < thick; ++t) {
          set(cy + d, cx + t);
          set(cy + t, cx + d);
        }
      break;
    }
    default: {  // hollow square
      const int side = uniform_int(rng, std::max(3, m / 3), std::max(3, m / 2));
      const int y0 = uniform_int(rng, 0, std::max(0, h - side)), x0 = uniform_int(rng, 0, std::max(0, w - side));
      for (int i = 0; i < side; ++i)
        for (int t = 0; t < thick; ++t) {
          set(y0 + t, x0 + i);
          set(y0 + side - 1 - t, x0 + i);
          set(y0 + i, x0 + t);
          set(y0 + i, x0 + side - 1 - t);
        }
      break;
    }
  }
}

}  // namespace

Dataset synthetic(std::uint64_t seed, int n, int classes, int h, int w) {
  if (classes < 2) throw DataError("synthetic: classes must be at least 2");
  if (n < 1 || h < 4 || w < 4) throw DataError("synthetic: need n >= 1 and images of at least 4x4");
  constexpr int kKinds = 5;
  Rng rng(seed);
  Dataset d;
  d.classes = classes;
  d.images = Tensor<float>({n, 1, h, w});
  d.labels.resize(static_cast<std::size_t>(n));
  std::vector<float> mask(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < n; ++i) {
    const int label = i % classes;
    d.labels[static_cast<std::size_t>(i)] = label;
    draw_pattern(mask, label % kKinds, label / kKinds, h, w, rng);
    const float polarity = uniform01(rng) < 0.5 ? -1.0f : 1.0f;
    float* img = d.images.data() + static_cast<std::size_t>(i) * h * w;
    for (std::size_t p = 0; p < mask.size(); ++p) {
      const double v = 0.5 + polarity * 0.35 * mask[p] + 0.2 * standard_normal(rng);
      img[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return d;
}

std::pair<TrainSet, ValidSet> split_80_20(const Dataset& d, std::uint64_t seed) {
  d.check();
  if (d.size() < 5) throw DataError("split_80_20: need at least 5 samples, got " + std::to_string(d.size()));
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(d.classes));
  for (std::size_t i = 0; i < d.labels.size(); ++i) by_class[static_cast<std::size_t>(d.labels[i])].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> train, valid;
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& idx = by_class[k];
    if (idx.empty()) continue;
    if (idx.size() < 5) {
      throw DataError("split_80_20: class " + std::to_string(k) + " has " + std::to_string(idx.size()) +
                      " samples; stratification needs at least 5");
    }
    shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n_valid = (2 * idx.size() + 5) / 10;
    valid.insert(valid.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_valid));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_valid), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(valid.begin(), valid.end());
  return {TrainSet{d.subset(train)}, ValidSet{d.subset(valid)}};
}

Normalizer Normalizer::fit(const TrainSet& train) {
  const Dataset& d = train.data;
  if (d.size() == 0) throw DataError("Normalizer::fit: empty training split");
  const int c = d.channels();
  const std::size_t hw = static_cast<std::size_t>(d.height()) * d.width();
  Normalizer out;
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0, sq = 0;
    for (int s = 0; s < d.size(); ++s) {
      const float* p = d.images.data() + (static_cast<std::size_t>(s) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) sum += p[i];
    }
    const double count = static_cast<double>(hw) * d.size();
    const double mean = sum / count;
    for (int s = 0; s < d.size(); ++s) {
      const float* p = d.images.data() + (static_cast<std::size_t>(s) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) sq += (p[i] - mean) * (p[i] - mean);
    }
    const double sd = std::sqrt(sq / count);
    out.mean.push_back(static_cast<float>(mean));
    out.stdev.push_back(static_cast<float>(sd > 1e-12 ? sd : 1.0));
  }
  return out;
}

void Normalizer::apply(Tensor<float>& images) const {
  const int n = images.dim(0), c = images.dim(1);
  if (static_cast<std::size_t>(c) != mean.size()) {
    throw DataError("Normalizer: fitted on " + std::to_string(mean.size()) + " channels, got " + std::to_string(c));
  }
  const std::size_t hw = static_cast<std::size_t>(images.dim(2)) * images.dim(3);
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      float* p = images.data() + (static_cast<std::size_t>(s) * c + ch) * hw;
      const float m = mean[static_cast<std::size_t>(ch)], sd = stdev[static_cast<std::size_t>(ch)];
      for (std::size_t i = 0; i < hw; ++i) p[i] = (p[i] - m) / sd;
    }
  }
}

void pad_crop(const float* src, float* dst, int c, int h, int w, int pad, int oy, int ox) {
  for (int ch = 0; ch < c; ++ch) {
    const float* s = src + static_cast<std::size_t>(ch) * h * w;
    float* d = dst + static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < h; ++y) {
      const int sy = y + oy - pad;
      for (int x = 0; x < w; ++x) {
        const int sx = x + ox - pad;
        d[static_cast<std::size_t>(y) * w + x] =
            (sy >= 0 && sy < h && sx >= 0 && sx < w) ? s[static_cast<std::size_t>(sy) * w + sx] : 0.0f;
      }
    }
  }
}

void flip_horizontal(float* img, int c, int h, int w) {
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y) {
      float* row = img + (static_cast<std::size_t>(ch) * h + y) * w;
      std::reverse(row, row + w);
    }
}

void augment(Tensor<float>& batch, Rng& rng, int pad) {
  const int n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const std::size_t per = static_cast<std::size_t>(c) * h * w;
  std::vector<float> tmp(per);
  for (int s = 0; s < n; ++s) {
    float* img = batch.data() + static_cast<std::size_t>(s) * per;
    const int oy = uniform_int(rng, 0, 2 * pad), ox = uniform_int(rng, 0, 2 * pad);
    const bool flip = uniform01(rng) < 0.5;
    pad_crop(img, tmp.data(), c, h, w, pad, oy, ox);
    std::copy(tmp.begin(), tmp.end(), img);
    if (flip) flip_horizontal(img, c, h, w);
  }
}

BatchStream::BatchStream(std::size_t n, int batch, Rng rng) : n_(n), batch_(batch), rng_(std::move(rng)) {
  if (batch < 1) throw std::invalid_argument("BatchStream: batch size must be positive");
}

std::size_t BatchStream::batches_per_epoch() const {
  const std::size_t b = static_cast<std::size_t>(batch_);
  std::size_t count = (n_ + b - 1) / b;
  if (count > 1 && n_ % b == 1) --count;
  return count;
}

std::vector<std::vector<std::size_t>> BatchStream::next_epoch() {
  std::vector<std::size_t> order(n_);
  for (std::size_t i = 0; i < n_; ++i) order[i] = i;
  shuffle(order.begin(), order.end(), rng_);
  std::vector<std::vector<std::size_t>> out;
  const std::size_t b = static_cast<std::size_t>(batch_);
  for (std::size_t start = 0; start < n_; start += b) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(start + b, n_)));
  }
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

Batch gather(const Dataset& d, std::span<const std::size_t> indices) {
  Dataset sub = d.subset(indices);
  return {std::move(sub.images), std::move(sub.labels)};
}

TrainFeed::TrainFeed(const TrainSet& train, const Normalizer& norm, int batch, bool augment, Rng order_rng,
                     Rng augment_rng)
    : train_(&train),
      norm_(norm),
      stream_(static_cast<std::size_t>(train.data.size()), batch, std::move(order_rng)),
      augment_(augment),
      augment_rng_(std::move(augment_rng)) {}

std::vector<Batch> TrainFeed::next_epoch() {
  std::vector<Batch> out;
  for (const auto& idx : stream_.next_epoch()) {
    Batch b = gather(train_->data, idx);
    if (augment_) augment(b.images, augment_rng_);
    norm_.apply(b.images);
    out.push_back(std::move(b));
  }
  return out;
}

DataBundle load_bundle(const DataSpec& spec) {
  Dataset pool, test;
  switch (spec.source) {
    case DataSource::Synthetic:
      pool = synthetic(spec.data_seed, spec.synthetic_n, spec.classes, spec.height, spec.width);
      test = synthetic(spec.data_seed ^ 0x9e3779b97f4a7c15ULL, spec.synthetic_test_n, spec.classes, spec.height,
                       spec.width);
      break;
    case DataSource::Idx:
      pool = load_idx(spec.train_images, spec.train_labels, spec.classes);
      test = load_idx(spec.test_images, spec.test_labels, spec.classes);
      break;
    case DataSource::RawRgb:
      pool = load_raw_rgb(spec.train_file, spec.height, spec.width, spec.classes);
      test = load_raw_rgb(spec.test_file, spec.height, spec.width, spec.classes);
      break;
  }
  pool.check();
  test.check();
  if (pool.channels() != test.channels() || pool.height() != test.height() || pool.width() != test.width()) {
    throw DataError("training and test images differ in shape");
  }
  auto [train, valid] = split_80_20(pool, spec.data_seed);
  return {std::move(train), std::move(valid), TestSet{std::move(test)}, TrainSet{std::move(pool)}};
}

}  // namespace dagnas
