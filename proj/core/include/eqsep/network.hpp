#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "eqsep/linalg.hpp"

namespace eqsep {

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// A depth-L network has L-1 hidden blocks (affine -> batch norm -> ReLU)
/// followed by one affine classifier.
struct NetworkSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_widths;
  int num_classes = 0;
  bool batchnorm = true;

  std::size_t depth() const noexcept { return hidden_widths.size() + 1; }
  std::size_t num_blocks() const noexcept { return hidden_widths.size(); }
  /// Width feeding the classifier.
  std::size_t feature_width() const noexcept {
    return hidden_widths.empty() ? input_dim : hidden_widths.back();
  }
  /// DimensionError unless every width is >= 1, depth >= 2, and K >= 2.
  void validate() const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct HiddenBlock {
  Matrix weight;  // out x in
  std::vector<double> bias;
  std::vector<double> gamma;  // batch-norm scale (empty without batch norm)
  std::vector<double> beta;   // batch-norm shift
  std::vector<double> running_mean;
  std::vector<double> running_var;

  friend bool operator==(const HiddenBlock&, const HiddenBlock&) = default;
};

struct Network {
  NetworkSpec spec;
  std::vector<HiddenBlock> blocks;
  Matrix classifier_weight;  // K x width
  std::vector<double> classifier_bias;

  /// Trainable scalars (weights, biases, batch-norm scale and shift).
  std::size_t parameter_count() const;

  /// Trainable tensors in declaration order: per block W, b, gamma, beta;
  /// then the classifier W, b.
  std::vector<std::span<double>> parameters();
  std::vector<std::span<const double>> parameters() const;
  /// For each tensor of parameters(), the layer that owns it: block index, or
  /// num_blocks() for the classifier.
  std::vector<std::size_t> parameter_layers() const;

  bool all_finite() const;

  friend bool operator==(const Network&, const Network&) = default;
};

/// He-normal weights N(0, 2 / fan_in) drawn with Box–Muller from
/// Xoshiro256ss(seed); zero biases; gamma = 1, beta = 0; running mean 0 and
/// running variance 1.
Network init_network(const NetworkSpec& spec, std::uint64_t seed);

/// Features at every capture point: index 0 is the network input, index l
/// the post-ReLU output of hidden block l.
struct ForwardTrace {
  std::vector<Matrix> layers;
};

enum class Mode { kTrain, kEval };

struct BlockCache {
  Matrix normalized;            // x-hat
  std::vector<double> inv_std;  // 1 / sqrt(var + eps) actually used
  bool batch_statistics = false;
};

struct ForwardResult {
  Matrix logits;
  ForwardTrace trace;
  std::vector<BlockCache> cache;  // filled in train mode
};

/// One entry per layer (blocks then classifier); nonzero freezes the layer.
/// An empty span means nothing is frozen.
using FrozenLayers = std::span<const std::uint8_t>;

/// Train mode normalizes with batch statistics and updates running
/// statistics (momentum 0.1); frozen blocks behave as in eval mode. Eval mode
/// uses running statistics only. DimensionError on a width mismatch,
/// DegenerateError for a train-mode batch of one.
ForwardResult forward(Network& net, const Matrix& batch, Mode mode, FrozenLayers frozen = {});
ForwardResult forward(const Network& net, const Matrix& batch);

struct LossAndGrads {
  double loss = 0.0;                        // mean softmax cross-entropy
  std::size_t correct = 0;                  // argmax hits in the batch
  std::vector<std::vector<double>> grads;   // aligned with Network::parameters()
};

/// Backpropagation through the classifier, ReLU, batch norm (batch-statistics
/// path, or the affine running-statistics path for frozen blocks) and the
/// affine maps. Gradients of frozen layers are left at zero. LabelError for
/// labels outside [0, K).
LossAndGrads loss_and_grads(const Network& net, const ForwardResult& fwd,
                            std::span<const int> labels, FrozenLayers frozen = {});

/// Mean cross-entropy and accuracy of eval-mode logits.
struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};
Evaluation evaluate(const Network& net, const Matrix& features, std::span<const int> labels,
                    std::size_t batch_size = 256);

/// Eval-mode forward pass over all rows, batch by batch, collecting every
/// capture point. trace.layers[0] is a copy of `features`.
ForwardTrace probe_features(const Network& net, const Matrix& features,
                            std::size_t batch_size = 256);

// Checkpoint file: "EQNW", u32 version, u32 input_dim, u32 num_classes,
// u32 batchnorm, u32 num_blocks, u32 widths[num_blocks], then f64 values in
// declaration order (per block W, b, gamma, beta, running mean, running var;
// classifier W, b). All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::vector<std::uint8_t> encode_checkpoint(const Network& net);
Network decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace eqsep
