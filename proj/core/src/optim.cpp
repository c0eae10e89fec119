#include "eqsep/optim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

#include "eqsep/errors.hpp"
#include "eqsep/rng.hpp"

namespace eqsep {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kMomentum: return "momentum";
    case OptimizerKind::kAdam: return "adam";
  }
  return "?";
}

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "momentum") return OptimizerKind::kMomentum;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd, momentum or adam)");
}

void OptimConfig::validate() const {
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("learning rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must be in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
}

double lr_at(const OptimConfig& config, int epoch) {
  if (epoch < config.epochs / 3) return config.base_lr;
  if (epoch < 2 * config.epochs / 3) return config.base_lr * 0.1;
  return config.base_lr * 0.01;
}

FreezeMask FreezeMask::range(const Network& net, std::size_t begin, std::size_t end) {
  FreezeMask m = none(net);
  if (begin > end || end > m.size()) {
    throw IndexError("freeze range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + std::to_string(m.size()) + " layers");
  }
  for (std::size_t l = begin; l < end; ++l) m.set(l, true);
  return m;
}

// ---------------------------------------------------------------------------
// Optimizer

Optimizer::Optimizer(const OptimConfig& config, const Network& net) : config_(config) {
  for (auto p : net.parameters()) {
    first_.emplace_back(p.size(), 0.0);
    if (config_.kind == OptimizerKind::kAdam) second_.emplace_back(p.size(), 0.0);
    steps_.push_back(0);
  }
}

void Optimizer::step_tensor(std::size_t index, std::span<double> w, std::span<const double> g, double lr) {
  if (index >= first_.size() || first_[index].size() != w.size() || g.size() != w.size()) {
    throw DimensionError("optimizer: tensor " + std::to_string(index) + " does not match its state");
  }
  const double wd = config_.weight_decay;
  auto& m = first_[index];
  switch (config_.kind) {
    case OptimizerKind::kSgd:
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] + wd * w[i]);
      break;
    case OptimizerKind::kMomentum:
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = config_.momentum * m[i] + g[i] + wd * w[i];
        w[i] -= lr * m[i];
      }
      break;
    case OptimizerKind::kAdam: {
      auto& v = second_[index];
      const long t = ++steps_[index];
      const double c1 = 1.0 - std::pow(config_.beta1, double(t));
      const double c2 = 1.0 - std::pow(config_.beta2, double(t));
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] + wd * w[i];
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
        w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
      }
      break;
    }
  }
}

void Optimizer::step(Network& net, const std::vector<std::vector<double>>& grads, double lr,
                     const FreezeMask& mask) {
  auto params = net.parameters();
  const auto layers = net.parameter_layers();
  if (grads.size() != params.size()) {
    throw DimensionError("optimizer: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " tensors");
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (mask.size() != 0 && mask.frozen(layers[t])) continue;
    for (double g : grads[t]) {
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient", -1);
    }
    step_tensor(t, params[t], grads[t], lr);
  }
}

// ---------------------------------------------------------------------------
// Training

namespace {

constexpr std::uint64_t kShuffleStream = 1;

void check_snapshots(const std::vector<int>& epochs, int total) {
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    if (epochs[i] < 0 || epochs[i] > total) {
      throw ConfigError("snapshot epoch " + std::to_string(epochs[i]) + " outside [0, " +
                        std::to_string(total) + "]");
    }
    if (i > 0 && epochs[i] <= epochs[i - 1]) throw ConfigError("snapshot epochs must increase strictly");
  }
}

void take_snapshot(TrainRecord& record, const Network& net, const ImageDataset& data, int epoch,
                   const TrainOptions& options) {
  Snapshot snap{epoch, net, std::nullopt};
  if (options.keep_probes || options.on_snapshot) {
    ForwardTrace probe = probe_features(net, data.features());
    if (options.on_snapshot) options.on_snapshot(epoch, net, probe);
    if (options.keep_probes) snap.probe = std::move(probe);
  }
  record.snapshots.push_back(std::move(snap));
}

// Batch boundaries for n samples. A trailing batch of one cannot be
// batch-normalized, so it joins the previous batch.
std::vector<std::size_t> batch_starts(std::size_t n, std::size_t batch) {
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s < n; s += batch) starts.push_back(s);
  if (starts.size() > 1 && n - starts.back() == 1) starts.pop_back();
  starts.push_back(n);
  return starts;
}

}  // namespace

TrainRecord train(Network network, const ImageDataset& data, const OptimConfig& config,
                  const FreezeMask& mask, const TrainOptions& options) {
  config.validate();
  check_snapshots(options.snapshot_epochs, config.epochs);
  if (mask.size() != 0 && mask.size() != network.blocks.size() + 1) {
    throw DimensionError("freeze mask has " + std::to_string(mask.size()) + " entries, network has " +
                         std::to_string(network.blocks.size() + 1) + " layers");
  }
  if (data.feature_dim() != network.spec.input_dim) {
    throw DimensionError("training data has " + std::to_string(data.feature_dim()) +
                         " features, network expects " + std::to_string(network.spec.input_dim));
  }
  if (data.size() < 2) throw DegenerateError("training needs at least 2 examples");

  TrainRecord record;
  record.config = config;
  Optimizer optimizer(config, network);
  Xoshiro256ss rng(derive_seed(config.seed, kShuffleStream));
  const std::size_t n = data.size();
  const auto starts = batch_starts(n, config.batch_size);
  std::vector<std::size_t> order(n);
  std::vector<int> batch_labels;
  auto next_snapshot = options.snapshot_epochs.begin();

  if (next_snapshot != options.snapshot_epochs.end() && *next_snapshot == 0) {
    take_snapshot(record, network, data, 0, options);
    ++next_snapshot;
  }

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b + 1 < starts.size(); ++b) {
      const std::span<const std::size_t> idx(order.data() + starts[b], starts[b + 1] - starts[b]);
      const Matrix batch = data.features().gather_rows(idx);
      batch_labels.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) batch_labels[i] = data.labels()[idx[i]];

      const ForwardResult fwd = forward(network, batch, Mode::kTrain, mask.view());
      const LossAndGrads lg = loss_and_grads(network, fwd, batch_labels, mask.view());
      if (!std::isfinite(lg.loss)) {
        throw DivergenceError("training loss became non-finite in epoch " + std::to_string(epoch + 1),
                              epoch + 1);
      }
      try {
        optimizer.step(network, lg.grads, lr, mask);
      } catch (const DivergenceError&) {
        throw DivergenceError("non-finite gradient in epoch " + std::to_string(epoch + 1), epoch + 1);
      }
      loss_sum += lg.loss * double(idx.size());
      correct += lg.correct;
    }
    record.log.push_back({0, epoch + 1, lr, loss_sum / double(n), double(correct) / double(n)});

    if (next_snapshot != options.snapshot_epochs.end() && *next_snapshot == epoch + 1) {
      take_snapshot(record, network, data, epoch + 1, options);
      ++next_snapshot;
    }
  }

  if (!network.all_finite()) {
    throw DivergenceError("parameters became non-finite", config.epochs);
  }
  record.final_train = evaluate(network, data.features(), data.labels());
  record.final_network = std::move(network);
  return record;
}

// ---------------------------------------------------------------------------
// Sweeps

std::size_t select_best(std::span<const SweepEntry> entries) {
  std::size_t best = entries.size();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const SweepEntry& e = entries[i];
    if (e.failed || !e.fit) continue;
    if (best == entries.size()) {
      best = i;
      continue;
    }
    const double r = e.fit->pearson_r;
    const double rb = entries[best].fit->pearson_r;
    if (r < rb || (r == rb && e.final_fuzziness < entries[best].final_fuzziness)) best = i;
  }
  if (best == entries.size()) throw SweepError("every learning rate of the sweep failed");
  return best;
}

SweepResult sweep_select(const ImageDataset& data, const NetworkSpec& spec, std::span<const double> lr_grid,
                         const OptimConfig& config, std::uint64_t init_seed, const TrainOptions& options,
                         double rel_tol, unsigned threads) {
  const Trainer standard = [&](Network initial, const OptimConfig& cfg) {
    const FreezeMask mask = FreezeMask::none(initial);
    return train(std::move(initial), data, cfg, mask, options);
  };
  return sweep_select(data, init_network(spec, init_seed), lr_grid, config, standard, rel_tol, threads);
}

SweepResult sweep_select(const ImageDataset& data, const Network& initial, std::span<const double> lr_grid,
                         const OptimConfig& config, const Trainer& trainer, double rel_tol, unsigned threads) {
  if (lr_grid.empty()) throw ConfigError("learning-rate grid is empty");

  std::vector<SweepEntry> entries(lr_grid.size());
  std::vector<std::optional<TrainRecord>> records(lr_grid.size());

  auto run_one = [&](std::size_t i) {
    SweepEntry& e = entries[i];
    e.lr = lr_grid[i];
    OptimConfig cfg = config;
    cfg.base_lr = lr_grid[i];
    try {
      TrainRecord rec = trainer(initial, cfg);
      const ForwardTrace probe = probe_features(rec.final_network, data.features());
      const SeparationProfile profile = separation_profile(probe, data.labels(), rel_tol, data.num_classes());
      e.fit = fit_law(profile);
      e.final_fuzziness = profile.values.back();
      e.final_train = rec.final_train;
      records[i] = std::move(rec);
    } catch (const NumericalError& err) {
      e.failed = true;
      e.failure = err.what();
      e.fit.reset();
    }
  };

  if (threads <= 1 || lr_grid.size() == 1) {
    for (std::size_t i = 0; i < lr_grid.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const unsigned count = std::min<unsigned>(threads, unsigned(lr_grid.size()));
    for (unsigned t = 0; t < count; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < lr_grid.size(); i = next++) run_one(i);
      });
    }
    for (auto& th : pool) th.join();
  }

  SweepResult result;
  result.best = select_best(entries);
  result.best_record = std::move(*records[result.best]);
  result.entries = std::move(entries);
  return result;
}

// ---------------------------------------------------------------------------
// Frozen and pretrained variants

TrainRecord frozen_train(Network network, const ImageDataset& data, const OptimConfig& config,
                         std::size_t split, const TrainOptions& options) {
  const std::size_t layers = network.blocks.size() + 1;
  if (split < 1 || split >= layers) {
    throw IndexError("frozen-training split " + std::to_string(split) + " must lie in [1, " +
                     std::to_string(layers - 1) + "]");
  }
  // Stage 1 trains [0, split); stage 2 trains [split, layers). Snapshots
  // refer to stage 2, whose end is the finished network.
  const FreezeMask tail = FreezeMask::range(network, split, layers);
  const FreezeMask head = FreezeMask::range(network, 0, split);
  TrainRecord first = train(std::move(network), data, config, tail);

  OptimConfig second_config = config;
  second_config.seed = derive_seed(config.seed, 2);
  TrainRecord record = train(std::move(first.final_network), data, second_config, head, options);
  for (auto& e : first.log) e.stage = 1;
  for (auto& e : record.log) e.stage = 2;
  first.log.insert(first.log.end(), record.log.begin(), record.log.end());
  record.log = std::move(first.log);
  record.config = config;
  return record;
}

Network extend_network(const Network& pretrained, std::size_t keep_blocks,
                       std::span<const std::size_t> extra_widths, std::uint64_t seed) {
  if (keep_blocks > pretrained.blocks.size()) {
    throw DimensionError("cannot keep " + std::to_string(keep_blocks) + " blocks of a network with " +
                         std::to_string(pretrained.blocks.size()));
  }
  NetworkSpec spec = pretrained.spec;
  spec.hidden_widths.resize(keep_blocks);
  spec.hidden_widths.insert(spec.hidden_widths.end(), extra_widths.begin(), extra_widths.end());
  Network net = init_network(spec, seed);
  for (std::size_t b = 0; b < keep_blocks; ++b) net.blocks[b] = pretrained.blocks[b];
  return net;
}

TrainRecord pretrain_extend(const Network& pretrained, std::size_t keep_blocks,
                            std::span<const std::size_t> extra_widths, const ImageDataset& data,
                            const OptimConfig& config, std::uint64_t init_seed, const TrainOptions& options) {
  Network net = extend_network(pretrained, keep_blocks, extra_widths, init_seed);
  const FreezeMask mask = FreezeMask::range(net, 0, keep_blocks);
  return train(std::move(net), data, config, mask, options);
}

}  // namespace eqsep
