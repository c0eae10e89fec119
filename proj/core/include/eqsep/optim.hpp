#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eqsep/dataset.hpp"
#include "eqsep/network.hpp"
#include "eqsep/separation.hpp"

namespace eqsep {

enum class OptimizerKind { kSgd, kMomentum, kAdam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& name);

/// Defaults follow the training protocol: weight decay 5e-4 (coupled L2),
/// momentum 0.9, Adam (0.9, 0.999, 1e-8), 600 epochs, batch size 128.
struct OptimConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double base_lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int epochs = 600;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;

  /// ConfigError unless lr > 0, 0 <= momentum < 1, epochs >= 1, batch >= 1.
  void validate() const;
};

/// Step schedule: base_lr before epochs/3, x0.1 until 2*epochs/3, x0.01 after
/// (integer division).
double lr_at(const OptimConfig& config, int epoch);

/// Per-layer freeze flags: one per hidden block plus one for the classifier.
/// Frozen layers receive no updates and their batch-norm statistics stay put.
class FreezeMask {
 public:
  FreezeMask() = default;
  explicit FreezeMask(std::size_t num_layers, bool frozen = false) : flags_(num_layers, frozen) {}
  static FreezeMask none(const Network& net) { return FreezeMask(net.blocks.size() + 1); }
  /// Layers [begin, end) frozen, the rest trainable.
  static FreezeMask range(const Network& net, std::size_t begin, std::size_t end);

  std::size_t size() const noexcept { return flags_.size(); }
  bool frozen(std::size_t layer) const { return flags_.at(layer) != 0; }
  void set(std::size_t layer, bool frozen) { flags_.at(layer) = frozen; }
  FrozenLayers view() const noexcept { return flags_; }

 private:
  std::vector<std::uint8_t> flags_;
};

/// Optimizer state for one network. Weight decay is added to the gradient
/// (g' = g + wd * w) before the method update for every trainable tensor.
class Optimizer {
 public:
  Optimizer(const OptimConfig& config, const Network& net);

  /// Updates the tensors of `net` whose layer is not frozen. DivergenceError
  /// (epoch -1) if a gradient is not finite.
  void step(Network& net, const std::vector<std::vector<double>>& grads, double lr,
            const FreezeMask& mask);

  /// Raw single-tensor update, exposed for unit tests.
  void step_tensor(std::size_t index, std::span<double> w, std::span<const double> g, double lr);

 private:
  OptimConfig config_;
  std::vector<std::vector<double>> first_;   // velocity or Adam m
  std::vector<std::vector<double>> second_;  // Adam v
  std::vector<long> steps_;                  // per tensor, for bias correction
};

struct EpochLog {
  int stage = 0;  // 0 for single-stage training; 1, 2 for frozen training
  int epoch = 0;  // 1-based index of the finished epoch within its stage
  double lr = 0.0;
  double loss = 0.0;            // mean train-mode loss over the epoch
  double train_accuracy = 0.0;  // train-mode accuracy over the epoch
};

struct Snapshot {
  int epoch = 0;  // number of completed epochs
  Network network;
  std::optional<ForwardTrace> probe;  // eval-mode probe of the training data
};

struct TrainRecord {
  OptimConfig config;
  std::vector<EpochLog> log;
  std::vector<Snapshot> snapshots;
  Network final_network;
  Evaluation final_train;  // eval-mode loss/accuracy on the training data
};

struct TrainOptions {
  std::vector<int> snapshot_epochs;  // sorted, within [0, epochs]
  bool keep_probes = false;          // store the probe inside each Snapshot
  /// Called at each snapshot with the probe of the training data.
  std::function<void(int epoch, const Network&, const ForwardTrace&)> on_snapshot;
};

/// Minibatch training: per epoch a seeded shuffle, batches of batch_size
/// (short final batch kept), train-mode forward/backward and an optimizer
/// step on the unfrozen layers. DivergenceError if the loss turns non-finite.
TrainRecord train(Network network, const ImageDataset& data, const OptimConfig& config,
                  const FreezeMask& mask, const TrainOptions& options = {});

/// Law fit of the training-data profile of a trained network.
struct SweepEntry {
  double lr = 0.0;
  bool failed = false;
  std::string failure;
  std::optional<LawFit> fit;
  double final_fuzziness = 0.0;  // D at the last capture point
  Evaluation final_train;
};

struct SweepResult {
  std::size_t best = 0;  // index into entries
  TrainRecord best_record;
  std::vector<SweepEntry> entries;
};

inline const std::vector<double> kSgdLearningRates = {0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0};
inline const std::vector<double> kAdamLearningRates = {3e-5, 1e-4, 3e-4, 1e-3, 3e-3};

/// Most negative Pearson r wins; ties go to the smaller final fuzziness.
/// Failed entries never win. Exposed so the rule can be tested alone.
std::size_t select_best(std::span<const SweepEntry> entries);

/// Trains one network per learning rate (all from init seed `init_seed`) and
/// keeps the one with the best last-epoch law on the training data.
/// SweepError if every run fails. `threads` > 1 runs grid points concurrently.
SweepResult sweep_select(const ImageDataset& data, const NetworkSpec& spec,
                         std::span<const double> lr_grid, const OptimConfig& config,
                         std::uint64_t init_seed, const TrainOptions& options = {},
                         double rel_tol = kDefaultRelTol, unsigned threads = 1);

/// The same selection around any training procedure (frozen training, say).
/// Every grid point starts from a copy of `initial`.
using Trainer = std::function<TrainRecord(Network initial, const OptimConfig& config)>;
SweepResult sweep_select(const ImageDataset& data, const Network& initial, std::span<const double> lr_grid,
                         const OptimConfig& config, const Trainer& trainer,
                         double rel_tol = kDefaultRelTol, unsigned threads = 1);

/// Two stages, each with the full schedule and a fresh optimizer: first the
/// layers [0, split) train while the rest are frozen, then the reverse.
TrainRecord frozen_train(Network network, const ImageDataset& data, const OptimConfig& config,
                         std::size_t split, const TrainOptions& options = {});

/// Keeps the first `keep_blocks` blocks of `pretrained` (frozen), appends
/// freshly initialized blocks of `extra_widths` and a new classifier, and
/// trains only the new part.
Network extend_network(const Network& pretrained, std::size_t keep_blocks,
                       std::span<const std::size_t> extra_widths, std::uint64_t seed);
TrainRecord pretrain_extend(const Network& pretrained, std::size_t keep_blocks,
                            std::span<const std::size_t> extra_widths, const ImageDataset& data,
                            const OptimConfig& config, std::uint64_t init_seed,
                            const TrainOptions& options = {});

}  // namespace eqsep
