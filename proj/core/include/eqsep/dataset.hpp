#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "eqsep/linalg.hpp"

namespace eqsep {

/// Feature rows with integer class labels. Immutable once built; the
/// constructor enforces the invariants (labels in range, finite features,
/// one label per row).
class ImageDataset {
 public:
  ImageDataset() = default;
  ImageDataset(Matrix features, std::vector<int> labels, int num_classes,
               std::size_t image_height = 0, std::size_t image_width = 0);

  std::size_t size() const noexcept { return features_.rows(); }
  std::size_t feature_dim() const noexcept { return features_.cols(); }
  int num_classes() const noexcept { return num_classes_; }
  const Matrix& features() const noexcept { return features_; }
  const std::vector<int>& labels() const noexcept { return labels_; }
  const std::vector<std::size_t>& class_counts() const noexcept { return class_counts_; }
  /// Image geometry for resizing; zero when rows are not images.
  std::size_t image_height() const noexcept { return height_; }
  std::size_t image_width() const noexcept { return width_; }

  friend bool operator==(const ImageDataset&, const ImageDataset&) = default;

 private:
  Matrix features_;
  std::vector<int> labels_;
  int num_classes_ = 0;
  std::vector<std::size_t> class_counts_;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
};

// ---------------------------------------------------------------------------
// IDX (MNIST / Fashion-MNIST)

/// Unsigned-byte IDX tensor: dims are the header sizes, data the payload.
struct IdxTensor {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;

  friend bool operator==(const IdxTensor&, const IdxTensor&) = default;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Accepts magic 0x00000803 (3 dims) or 0x00000801 (1 dim). FormatError on any
/// other magic, LengthError when the payload is shorter or longer than the
/// header promises.
IdxTensor parse_idx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_idx(const IdxTensor& tensor);

/// Pairs an image tensor (n x h x w) with a label tensor (n); pixels / 255.
ImageDataset dataset_from_idx(const IdxTensor& images, const IdxTensor& labels,
                              int num_classes = 10);

// ---------------------------------------------------------------------------
// CIFAR-10 binary

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarSide = 32;

/// One channel plane of every 3073-byte record, scaled by 1/255.
ImageDataset parse_cifar10(std::span<const std::uint8_t> bytes, int channel);

// ---------------------------------------------------------------------------
// Transforms

/// Box-filter resampling: each output pixel is the area-weighted mean of the
/// source region it covers.
std::vector<double> resize_area(std::span<const double> image, std::size_t height,
                                std::size_t width, std::size_t new_height,
                                std::size_t new_width);

/// resize_area applied to every row of an image dataset.
ImageDataset resize_dataset(const ImageDataset& dataset, std::size_t new_height,
                            std::size_t new_width);

struct SamplingSpec {
  std::vector<std::size_t> per_class_counts;
  std::uint64_t seed = 0;

  static SamplingSpec balanced(int num_classes, std::size_t per_class, std::uint64_t seed);
};

/// Draws per_class_counts[k] examples of each class without replacement, then
/// shuffles the class-blocked result, all from one seeded stream.
ImageDataset subsample(const ImageDataset& dataset, const SamplingSpec& spec);

/// Per-feature affine map fitted on a training split.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;  // population std; 0 marks a constant feature

  ImageDataset apply(const ImageDataset& dataset) const;
};

inline constexpr double kConstantFeatureStd = 1e-12;

struct StandardizeResult {
  ImageDataset dataset;
  Standardizer transform;
};

StandardizeResult standardize(const ImageDataset& dataset);

// ---------------------------------------------------------------------------
// Loading from disk

/// Reads a whole file; IoError if it cannot be opened.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

enum class DatasetSplit { kTrain, kTest };

/// Loads a prepared dataset directory (the layout fetch_dataset produces).
/// `channel` is only used for CIFAR-10.
ImageDataset load_dataset(const std::string& name, const std::filesystem::path& dir,
                          DatasetSplit split, int channel = 1);

}  // namespace eqsep
