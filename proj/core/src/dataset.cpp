#include "eqsep/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "eqsep/errors.hpp"
#include "eqsep/rng.hpp"

namespace eqsep {

ImageDataset::ImageDataset(Matrix features, std::vector<int> labels, int num_classes,
                           std::size_t image_height, std::size_t image_width)
    : features_(std::move(features)),
      labels_(std::move(labels)),
      num_classes_(num_classes),
      height_(image_height),
      width_(image_width) {
  if (num_classes_ < 1) throw LabelError("dataset needs at least one class");
  if (labels_.size() != features_.rows()) {
    throw DimensionError("dataset has " + std::to_string(features_.rows()) + " rows but " +
                         std::to_string(labels_.size()) + " labels");
  }
  if (height_ * width_ != 0 && height_ * width_ != features_.cols()) {
    throw DimensionError("image geometry does not match feature dimension");
  }
  if (!features_.all_finite()) throw FormatError("dataset features contain non-finite values");
  class_counts_.assign(std::size_t(num_classes_), 0);
  for (int label : labels_) {
    if (label < 0 || label >= num_classes_) {
      throw LabelError("label " + std::to_string(label) + " outside [0, " +
                       std::to_string(num_classes_) + ")");
    }
    ++class_counts_[std::size_t(label)];
  }
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
         (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v >> 24));
  out.push_back(std::uint8_t(v >> 16));
  out.push_back(std::uint8_t(v >> 8));
  out.push_back(std::uint8_t(v));
}

}  // namespace

IdxTensor parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw LengthError("IDX stream shorter than its magic number");
  const std::uint32_t magic = read_be32(bytes, 0);
  std::size_t ndims = 0;
  if (magic == kIdxImagesMagic) {
    ndims = 3;
  } else if (magic == kIdxLabelsMagic) {
    ndims = 1;
  } else {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", magic);
    throw FormatError(std::string("unsupported IDX magic ") + buf);
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) throw LengthError("IDX header truncated");

  IdxTensor t;
  std::size_t payload = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    t.dims.push_back(read_be32(bytes, 4 + 4 * i));
    payload *= t.dims.back();
  }
  if (bytes.size() - header != payload) {
    throw LengthError("IDX payload has " + std::to_string(bytes.size() - header) +
                      " bytes, header promises " + std::to_string(payload));
  }
  t.data.assign(bytes.begin() + std::ptrdiff_t(header), bytes.end());
  return t;
}

std::vector<std::uint8_t> serialize_idx(const IdxTensor& tensor) {
  std::uint32_t magic = 0;
  if (tensor.dims.size() == 3) {
    magic = kIdxImagesMagic;
  } else if (tensor.dims.size() == 1) {
    magic = kIdxLabelsMagic;
  } else {
    throw FormatError("IDX tensors must have 1 or 3 dimensions");
  }
  std::size_t payload = 1;
  for (auto d : tensor.dims) payload *= d;
  if (payload != tensor.data.size()) throw LengthError("IDX tensor data does not match dims");

  std::vector<std::uint8_t> out;
  out.reserve(4 + 4 * tensor.dims.size() + payload);
  write_be32(out, magic);
  for (auto d : tensor.dims) write_be32(out, d);
  out.insert(out.end(), tensor.data.begin(), tensor.data.end());
  return out;
}

ImageDataset dataset_from_idx(const IdxTensor& images, const IdxTensor& labels,
                              int num_classes) {
  if (images.dims.size() != 3 || labels.dims.size() != 1) {
    throw FormatError("expected a 3-d image tensor and a 1-d label tensor");
  }
  const std::size_t n = images.dims[0];
  const std::size_t h = images.dims[1];
  const std::size_t w = images.dims[2];
  if (labels.dims[0] != n) throw DimensionError("image and label counts differ");

  Matrix features(n, h * w);
  for (std::size_t i = 0; i < n * h * w; ++i) features.data()[i] = images.data[i] / 255.0;
  std::vector<int> y(labels.data.begin(), labels.data.end());
  return ImageDataset(std::move(features), std::move(y), num_classes, h, w);
}

// ---------------------------------------------------------------------------
// CIFAR-10

ImageDataset parse_cifar10(std::span<const std::uint8_t> bytes, int channel) {
  if (channel < 0 || channel > 2) {
    throw DimensionError("CIFAR-10 channel must be 0, 1 or 2, got " + std::to_string(channel));
  }
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError("CIFAR-10 stream of " + std::to_string(bytes.size()) +
                      " bytes is not a whole number of 3073-byte records");
  }
  constexpr std::size_t kPlane = kCifarSide * kCifarSide;
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Matrix features(n, kPlane);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto record = bytes.subspan(i * kCifarRecordBytes, kCifarRecordBytes);
    if (record[0] >= 10) {
      throw LabelError("CIFAR-10 record " + std::to_string(i) + " has label " +
                       std::to_string(int(record[0])));
    }
    labels[i] = record[0];
    const auto plane = record.subspan(1 + std::size_t(channel) * kPlane, kPlane);
    for (std::size_t p = 0; p < kPlane; ++p) features(i, p) = plane[p] / 255.0;
  }
  return ImageDataset(std::move(features), std::move(labels), 10, kCifarSide, kCifarSide);
}

// ---------------------------------------------------------------------------
// Resizing

namespace {

// weights[o * in + s]: share of output cell o covered by source cell s.
// Positions are measured in units of 1/out so overlaps are exact integers.
std::vector<double> area_weights(std::size_t in, std::size_t out) {
  std::vector<double> weights(in * out, 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    const std::size_t lo = o * in;
    const std::size_t hi = (o + 1) * in;
    for (std::size_t s = lo / out; s < in && s * out < hi; ++s) {
      const std::size_t a = std::max(lo, s * out);
      const std::size_t b = std::min(hi, (s + 1) * out);
      if (b > a) weights[o * in + s] = double(b - a) / double(in);
    }
  }
  return weights;
}

}  // namespace

std::vector<double> resize_area(std::span<const double> image, std::size_t height,
                                std::size_t width, std::size_t new_height,
                                std::size_t new_width) {
  if (height == 0 || width == 0 || new_height == 0 || new_width == 0) {
    throw DimensionError("resize_area: dimensions must be positive");
  }
  if (image.size() != height * width) throw DimensionError("resize_area: image size mismatch");

  const auto wy = area_weights(height, new_height);
  const auto wx = area_weights(width, new_width);
  // Rows first, then columns.
  std::vector<double> tmp(new_height * width, 0.0);
  for (std::size_t o = 0; o < new_height; ++o) {
    for (std::size_t s = 0; s < height; ++s) {
      const double w = wy[o * height + s];
      if (w == 0.0) continue;
      for (std::size_t x = 0; x < width; ++x) tmp[o * width + x] += w * image[s * width + x];
    }
  }
  std::vector<double> out(new_height * new_width, 0.0);
  for (std::size_t y = 0; y < new_height; ++y) {
    for (std::size_t o = 0; o < new_width; ++o) {
      double acc = 0.0;
      for (std::size_t s = 0; s < width; ++s) acc += wx[o * width + s] * tmp[y * width + s];
      out[y * new_width + o] = acc;
    }
  }
  return out;
}

ImageDataset resize_dataset(const ImageDataset& dataset, std::size_t new_height,
                            std::size_t new_width) {
  const std::size_t h = dataset.image_height();
  const std::size_t w = dataset.image_width();
  if (h == 0 || w == 0) throw DimensionError("resize_dataset: rows are not images");
  if (h == new_height && w == new_width) return dataset;

  Matrix out(dataset.size(), new_height * new_width);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto resized = resize_area(dataset.features().row(i), h, w, new_height, new_width);
    std::copy(resized.begin(), resized.end(), out.row(i).begin());
  }
  return ImageDataset(std::move(out), dataset.labels(), dataset.num_classes(), new_height,
                      new_width);
}

// ---------------------------------------------------------------------------
// Sampling

SamplingSpec SamplingSpec::balanced(int num_classes, std::size_t per_class, std::uint64_t seed) {
  return SamplingSpec{std::vector<std::size_t>(std::size_t(num_classes), per_class), seed};
}

ImageDataset subsample(const ImageDataset& dataset, const SamplingSpec& spec) {
  const auto k_count = std::size_t(dataset.num_classes());
  if (spec.per_class_counts.size() != k_count) {
    throw SamplingError("sampling spec lists " + std::to_string(spec.per_class_counts.size()) +
                        " classes, dataset has " + std::to_string(k_count));
  }
  std::vector<std::vector<std::size_t>> by_class(k_count);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    by_class[std::size_t(dataset.labels()[i])].push_back(i);
  }

  Xoshiro256ss rng(spec.seed);
  std::vector<std::size_t> picked;
  for (std::size_t k = 0; k < k_count; ++k) {
    const std::size_t want = spec.per_class_counts[k];
    auto& pool = by_class[k];
    if (want < 1) throw SamplingError("class " + std::to_string(k) + " requests zero examples");
    if (pool.size() < want) {
      throw SamplingError("class " + std::to_string(k) + " has " + std::to_string(pool.size()) +
                          " examples, " + std::to_string(want) + " requested");
    }
    // Partial Fisher–Yates: the first `want` slots become the sample.
    for (std::size_t i = 0; i < want; ++i) {
      const std::size_t j = i + std::size_t(rng.below(pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
    picked.insert(picked.end(), pool.begin(), pool.begin() + std::ptrdiff_t(want));
  }
  rng.shuffle(std::span<std::size_t>(picked));

  std::vector<int> labels(picked.size());
  for (std::size_t i = 0; i < picked.size(); ++i) labels[i] = dataset.labels()[picked[i]];
  return ImageDataset(dataset.features().gather_rows(picked), std::move(labels),
                      dataset.num_classes(), dataset.image_height(), dataset.image_width());
}

// ---------------------------------------------------------------------------
// Standardization

ImageDataset Standardizer::apply(const ImageDataset& dataset) const {
  const std::size_t d = dataset.feature_dim();
  if (mean.size() != d || stddev.size() != d) {
    throw DimensionError("standardizer fitted on " + std::to_string(mean.size()) +
                         " features applied to " + std::to_string(d));
  }
  Matrix out = dataset.features();
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto row = out.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = stddev[j] > kConstantFeatureStd ? (row[j] - mean[j]) / stddev[j] : 0.0;
    }
  }
  return ImageDataset(std::move(out), dataset.labels(), dataset.num_classes(),
                      dataset.image_height(), dataset.image_width());
}

StandardizeResult standardize(const ImageDataset& dataset) {
  const std::size_t n = dataset.size();
  const std::size_t d = dataset.feature_dim();
  if (n < 2) throw DimensionError("standardize needs at least 2 examples");

  Standardizer t;
  t.mean.assign(d, 0.0);
  t.stddev.assign(d, 0.0);
  const Matrix& x = dataset.features();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) t.mean[j] += x(i, j);
  }
  for (double& m : t.mean) m /= double(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x(i, j) - t.mean[j];
      t.stddev[j] += c * c;
    }
  }
  for (double& s : t.stddev) s = std::sqrt(s / double(n));
  ImageDataset out = t.apply(dataset);
  return {std::move(out), std::move(t)};
}

// ---------------------------------------------------------------------------
// Disk

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), size)) {
    throw IoError("short read on " + path.string());
  }
  return bytes;
}

ImageDataset load_dataset(const std::string& name, const std::filesystem::path& dir,
                          DatasetSplit split, int channel) {
  const bool train = split == DatasetSplit::kTrain;
  if (name == "mnist" || name == "fashion-mnist") {
    const std::string prefix = train ? "train" : "t10k";
    const auto images = parse_idx(read_file(dir / (prefix + "-images-idx3-ubyte")));
    const auto labels = parse_idx(read_file(dir / (prefix + "-labels-idx1-ubyte")));
    return dataset_from_idx(images, labels, 10);
  }
  if (name == "cifar10") {
    std::vector<std::uint8_t> bytes;
    std::vector<std::string> files;
    if (train) {
      for (int b = 1; b <= 5; ++b) files.push_back("data_batch_" + std::to_string(b) + ".bin");
    } else {
      files.push_back("test_batch.bin");
    }
    for (const auto& f : files) {
      auto part = read_file(dir / f);
      bytes.insert(bytes.end(), part.begin(), part.end());
    }
    return parse_cifar10(bytes, channel);
  }
  throw ConfigError("unknown dataset '" + name + "' (expected mnist, fashion-mnist or cifar10)");
}

}  // namespace eqsep
