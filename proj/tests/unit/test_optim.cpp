#include <doctest.h>

#include <cmath>
#include <vector>

#include "eqsep/errors.hpp"
#include "eqsep/optim.hpp"
#include "support.hpp"

using namespace eqsep;

namespace {

// Two well-separated Gaussian blobs per class in 6 dimensions.
ImageDataset blobs(std::size_t per_class, int k, std::uint64_t seed) {
  Xoshiro256ss rng(seed);
  const std::size_t n = per_class * std::size_t(k);
  Matrix x(n, 6);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = int(i % std::size_t(k));
    for (std::size_t j = 0; j < 6; ++j) x(i, j) = rng.normal() + (j == std::size_t(y[i]) ? 3.0 : 0.0);
  }
  return ImageDataset(std::move(x), std::move(y), k);
}

OptimConfig quick(OptimizerKind kind, double lr, int epochs = 6) {
  OptimConfig c;
  c.kind = kind;
  c.base_lr = lr;
  c.epochs = epochs;
  c.batch_size = 16;
  c.seed = 3;
  return c;
}

Network one_tensor_net() { return init_network(NetworkSpec{1, {1}, 2, false}, 0); }

}  // namespace

TEST_CASE("learning-rate schedule") {
  OptimConfig c;
  c.base_lr = 0.1;
  c.epochs = 600;
  CHECK(lr_at(c, 0) == 0.1);
  CHECK(lr_at(c, 199) == 0.1);
  CHECK(lr_at(c, 200) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(lr_at(c, 399) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(lr_at(c, 400) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(lr_at(c, 599) == doctest::Approx(0.001).epsilon(1e-15));
  c.epochs = 10;  // 10/3 = 3, 20/3 = 6
  CHECK(lr_at(c, 2) == 0.1);
  CHECK(lr_at(c, 3) == doctest::Approx(0.01));
  CHECK(lr_at(c, 6) == doctest::Approx(0.001));
}

TEST_CASE("config validation and names") {
  OptimConfig c;
  CHECK_NOTHROW(c.validate());
  c.base_lr = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = OptimConfig{};
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = OptimConfig{};
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = OptimConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  for (auto k : {OptimizerKind::kSgd, OptimizerKind::kMomentum, OptimizerKind::kAdam}) {
    CHECK(parse_optimizer_kind(to_string(k)) == k);
  }
  CHECK_THROWS_AS(parse_optimizer_kind("rmsprop"), ConfigError);
}

TEST_CASE("single-tensor updates") {
  const Network net = one_tensor_net();
  std::vector<double> w = {1.0};
  const std::vector<double> g = {0.5};

  SUBCASE("sgd with coupled weight decay") {
    OptimConfig c = quick(OptimizerKind::kSgd, 0.1);
    c.weight_decay = 0.01;
    Optimizer opt(c, net);
    opt.step_tensor(0, w, g, 0.1);
    CHECK(w[0] == doctest::Approx(0.949).epsilon(1e-15));
  }
  SUBCASE("momentum accumulates decayed gradients") {
    OptimConfig c = quick(OptimizerKind::kMomentum, 0.1);
    c.weight_decay = 0.01;
    Optimizer opt(c, net);
    opt.step_tensor(0, w, g, 0.1);
    CHECK(w[0] == doctest::Approx(0.949).epsilon(1e-15));
    opt.step_tensor(0, w, g, 0.1);
    // m = 0.9 * 0.51 + 0.5 + 0.01 * 0.949
    CHECK(w[0] == doctest::Approx(0.949 - 0.1 * 0.96849).epsilon(1e-14));
  }
  SUBCASE("adam with bias correction") {
    OptimConfig c = quick(OptimizerKind::kAdam, 0.1);
    c.weight_decay = 0.0;
    Optimizer opt(c, net);
    opt.step_tensor(0, w, g, 0.1);
    CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-15));
    const std::vector<double> g2 = {-1.0};
    opt.step_tensor(0, w, g2, 0.1);
    const double m = 0.9 * 0.05 + 0.1 * -1.0;
    const double v = 0.999 * 0.00025 + 0.001 * 1.0;
    const double mh = m / (1 - 0.81);
    const double vh = v / (1 - 0.999 * 0.999);
    CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-14));
  }
  SUBCASE("shape mismatch") {
    Optimizer opt(quick(OptimizerKind::kSgd, 0.1), net);
    std::vector<double> two = {1.0, 2.0};
    CHECK_THROWS_AS(opt.step_tensor(0, two, g, 0.1), DimensionError);
  }
}

TEST_CASE("weight decay alone contracts weights") {
  Network net = init_network(NetworkSpec{3, {4}, 2, true}, 1);
  const Network before = net;
  OptimConfig c = quick(OptimizerKind::kSgd, 0.5);
  c.weight_decay = 0.1;
  Optimizer opt(c, net);
  std::vector<std::vector<double>> zero;
  for (auto p : net.parameters()) zero.emplace_back(p.size(), 0.0);
  opt.step(net, zero, 0.5, FreezeMask::none(net));
  const auto a = before.parameters();
  const auto b = net.parameters();
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t i = 0; i < a[t].size(); ++i) CHECK(b[t][i] == doctest::Approx(0.95 * a[t][i]).epsilon(1e-15));

  zero[0][0] = NAN;
  CHECK_THROWS_AS(opt.step(net, zero, 0.5, FreezeMask::none(net)), DivergenceError);
}

TEST_CASE("freeze masks") {
  const Network net = init_network(NetworkSpec{3, {4, 4, 4}, 2, true}, 1);
  const FreezeMask m = FreezeMask::range(net, 1, 3);
  CHECK(m.size() == 4);
  CHECK_FALSE(m.frozen(0));
  CHECK(m.frozen(1));
  CHECK(m.frozen(2));
  CHECK_FALSE(m.frozen(3));
  CHECK_THROWS_AS(FreezeMask::range(net, 2, 5), IndexError);
  CHECK_THROWS_AS(FreezeMask::range(net, 3, 2), IndexError);
}

TEST_CASE("training is deterministic and learns") {
  const ImageDataset data = blobs(20, 3, 4);
  const NetworkSpec spec{6, {8, 8}, 3, true};
  TrainOptions opts;
  opts.snapshot_epochs = {0, 15, 30};
  opts.keep_probes = true;
  const OptimConfig cfg = quick(OptimizerKind::kAdam, 0.01, 30);
  const TrainRecord a = train(init_network(spec, 1), data, cfg, FreezeMask(), opts);
  const TrainRecord b = train(init_network(spec, 1), data, cfg, FreezeMask(), opts);
  CHECK(a.final_network == b.final_network);
  REQUIRE(a.snapshots.size() == 3);
  CHECK(a.snapshots[0].network == init_network(spec, 1));
  CHECK(a.snapshots[2].network == a.final_network);
  CHECK(a.snapshots[1].probe->layers.size() == 3);
  CHECK(a.log.size() == 30);
  CHECK(a.log.back().loss < a.log.front().loss);
  CHECK(a.final_train.accuracy > 0.9);

  OptimConfig other_seed = cfg;
  other_seed.seed = 4;
  CHECK_FALSE(train(init_network(spec, 1), data, other_seed, FreezeMask()).final_network == a.final_network);

  int calls = 0;
  TrainOptions cb;
  cb.snapshot_epochs = {6};
  cb.on_snapshot = [&](int epoch, const Network&, const ForwardTrace& t) {
    CHECK(epoch == 6);
    CHECK(t.layers.size() == 3);
    ++calls;
  };
  train(init_network(spec, 1), data, quick(OptimizerKind::kAdam, 0.01), FreezeMask(), cb);
  CHECK(calls == 1);
}

TEST_CASE("training argument checks") {
  const ImageDataset data = blobs(5, 3, 4);
  const NetworkSpec spec{6, {8}, 3, true};
  TrainOptions bad;
  bad.snapshot_epochs = {3, 2};
  CHECK_THROWS_AS(train(init_network(spec, 1), data, quick(OptimizerKind::kSgd, 0.1), FreezeMask(), bad), ConfigError);
  bad.snapshot_epochs = {7};
  CHECK_THROWS_AS(train(init_network(spec, 1), data, quick(OptimizerKind::kSgd, 0.1), FreezeMask(), bad), ConfigError);
  CHECK_THROWS_AS(train(init_network(spec, 1), data, quick(OptimizerKind::kSgd, 0.1), FreezeMask(5)), DimensionError);
  CHECK_THROWS_AS(train(init_network(NetworkSpec{5, {8}, 3, true}, 1), data, quick(OptimizerKind::kSgd, 0.1), FreezeMask()),
                  DimensionError);
}

TEST_CASE("a trailing batch of one is merged") {
  // 17 samples with batch 16 would leave a batch of one for batch norm
  const ImageDataset data = blobs(17, 1, 4);
  const NetworkSpec spec{6, {4}, 2, true};
  CHECK_NOTHROW(train(init_network(spec, 1), data, quick(OptimizerKind::kSgd, 0.1, 2), FreezeMask()));
}

TEST_CASE("divergence is reported with its epoch") {
  const ImageDataset data = blobs(20, 3, 4);
  const NetworkSpec spec{6, {8, 8}, 3, false};
  try {
    train(init_network(spec, 1), data, quick(OptimizerKind::kSgd, 1e6, 4), FreezeMask());
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.epoch() >= 1);
    CHECK(e.epoch() <= 4);
  }
}

TEST_CASE("frozen layers stay bitwise unchanged") {
  const ImageDataset data = blobs(20, 3, 5);
  const Network start = init_network(NetworkSpec{6, {8, 8, 8}, 3, true}, 2);
  const FreezeMask mask = FreezeMask::range(start, 0, 2);
  const TrainRecord r = train(start, data, quick(OptimizerKind::kMomentum, 0.05), mask);
  CHECK(r.final_network.blocks[0] == start.blocks[0]);
  CHECK(r.final_network.blocks[1] == start.blocks[1]);
  CHECK_FALSE(r.final_network.blocks[2] == start.blocks[2]);
  CHECK_FALSE(r.final_network.classifier_weight == start.classifier_weight);
}

TEST_CASE("frozen two-stage training") {
  const ImageDataset data = blobs(20, 3, 6);
  const Network start = init_network(NetworkSpec{6, {8, 8, 8}, 3, true}, 2);
  TrainOptions opts;
  opts.snapshot_epochs = {0, 4};
  const TrainRecord r = frozen_train(start, data, quick(OptimizerKind::kAdam, 0.01, 4), 2, opts);
  REQUIRE(r.log.size() == 8);
  CHECK(r.log[0].stage == 1);
  CHECK(r.log[4].stage == 2);
  CHECK(r.log[4].lr == 0.01);  // stage 2 restarts the schedule
  // each layer was trained in exactly one stage
  for (std::size_t b = 0; b < 3; ++b) CHECK_FALSE(r.final_network.blocks[b] == start.blocks[b]);
  // stage 2 begins where stage 1 ended: its first snapshot has the trained head
  // and the untouched tail
  REQUIRE(r.snapshots.size() == 2);
  CHECK_FALSE(r.snapshots[0].network.blocks[0] == start.blocks[0]);
  CHECK(r.snapshots[0].network.blocks[2] == start.blocks[2]);
  CHECK(r.final_network.blocks[0] == r.snapshots[0].network.blocks[0]);
  CHECK_THROWS_AS(frozen_train(start, data, quick(OptimizerKind::kAdam, 0.01, 1), 0), IndexError);
  CHECK_THROWS_AS(frozen_train(start, data, quick(OptimizerKind::kAdam, 0.01, 1), 4), IndexError);
}

TEST_CASE("pretrain and extend") {
  const ImageDataset data = blobs(20, 3, 7);
  const Network base = init_network(NetworkSpec{6, {8, 8, 8}, 3, true}, 2);
  const std::vector<std::size_t> extra = {5, 5};
  const Network ext = extend_network(base, 2, extra, 9);
  CHECK(ext.spec.hidden_widths == std::vector<std::size_t>{8, 8, 5, 5});
  CHECK(ext.blocks[1] == base.blocks[1]);
  const TrainRecord r = pretrain_extend(base, 2, extra, data, quick(OptimizerKind::kAdam, 0.01, 3), 9);
  CHECK(r.final_network.blocks[0] == base.blocks[0]);
  CHECK(r.final_network.blocks[1] == base.blocks[1]);
  CHECK_FALSE(r.final_network.blocks[2] == ext.blocks[2]);
  CHECK_THROWS_AS(extend_network(base, 4, extra, 9), DimensionError);
}

TEST_CASE("sweep selection rule") {
  auto entry = [](double r, double d, bool failed = false) {
    SweepEntry e;
    e.failed = failed;
    if (!failed) {
      LawFit f;
      f.pearson_r = r;
      e.fit = f;
    }
    e.final_fuzziness = d;
    return e;
  };
  std::vector<SweepEntry> es = {entry(-0.9, 1.0), entry(-0.99, 2.0), entry(0, 0, true), entry(-0.99, 1.5)};
  CHECK(select_best(es) == 3);
  es = {entry(0, 0, true), entry(0, 0, true)};
  CHECK_THROWS_AS(select_best(es), SweepError);
}

TEST_CASE("sweep runs every grid point from one initialization") {
  const ImageDataset data = blobs(20, 3, 8);
  const NetworkSpec spec{6, {8, 8}, 3, true};
  const std::vector<double> grid = {1e-3, 1e-2, 1e9};
  const SweepResult s = sweep_select(data, spec, grid, quick(OptimizerKind::kAdam, 1, 4), 5);
  REQUIRE(s.entries.size() == 3);
  CHECK(s.entries[0].lr == 1e-3);
  CHECK_FALSE(s.entries[s.best].failed);
  const TrainRecord direct = train(init_network(spec, 5), data, [&] {
    OptimConfig c = quick(OptimizerKind::kAdam, grid[s.best], 4);
    return c;
  }(), FreezeMask());
  CHECK(direct.final_network == s.best_record.final_network);

  const SweepResult threaded = sweep_select(data, spec, grid, quick(OptimizerKind::kAdam, 1, 4), 5, {}, kDefaultRelTol, 3);
  CHECK(threaded.best == s.best);
  CHECK(threaded.best_record.final_network == s.best_record.final_network);
  CHECK(threaded.entries[1].fit == s.entries[1].fit);
}
