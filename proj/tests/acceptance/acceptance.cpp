// Acceptance checks. One PASS/FAIL line per criterion; exit status 0 only if
// every selected criterion passes. The stochastic criteria train real
// networks on downloaded data and take tens of minutes on one core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "eqsep/dataset.hpp"
#include "eqsep/errors.hpp"
#include "eqsep/harness.hpp"
#include "eqsep/network.hpp"
#include "eqsep/separation.hpp"
#include "gradcheck.hpp"
#include "support.hpp"

using namespace eqsep;
namespace fs = std::filesystem;
using nlohmann::json;
using testsupport::rel_diff;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [miss]");
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Context {
  fs::path data;
  fs::path work;
};

// ---------------------------------------------------------------------------
// Experiment helpers

json base_config(const Context& ctx, const std::string& dataset, std::size_t depth, const std::string& optimizer,
                 std::uint64_t seed) {
  return {
      {"name", dataset + "-d" + std::to_string(depth) + "-" + optimizer + "-s" + std::to_string(seed)},
      {"seed", seed},
      {"dataset", {{"name", dataset}, {"dir", (ctx.data / dataset).string()}, {"resize", 10}, {"per_class", {100}}}},
      {"network", {{"depth", depth}, {"width", 100}}},
      {"training", {{"optimizer", optimizer}, {"sweep", true}}},
      {"analysis", {{"classwise", false}}},
  };
}

ExperimentResult run(const Context& ctx, const json& doc) {
  const ExperimentConfig cfg = parse_config(doc);
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentResult r = run_experiment(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  emit_report(r.report, ctx.work / cfg.name);
  std::printf("    %s: %.0f s\n", cfg.name.c_str(), secs);
  std::fflush(stdout);
  return r;
}

// The train-split layer profile at `epoch` (-1: the last one).
const ProfileRecord& layer_profile(const Report& r, int epoch = -1, const std::string& split = "train") {
  const ProfileRecord* found = nullptr;
  for (const auto& p : r.profiles) {
    if (p.profile.split != split || p.profile.grouping != "layer") continue;
    if (epoch < 0 ? (found == nullptr || p.profile.epoch > found->profile.epoch) : p.profile.epoch == epoch) found = &p;
  }
  if (found == nullptr || !found->fit) throw NumericalError("no fitted " + split + " profile in report");
  return *found;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome law_reproduction(const Context& ctx) {
  Outcome o;
  struct Case {
    const char* optimizer;
    double bound;
  };
  for (const Case c : {Case{"adam", -0.98}, Case{"sgd", -0.97}, Case{"momentum", -0.97}}) {
    const auto t0 = std::chrono::steady_clock::now();
    const ExperimentResult res = run(ctx, base_config(ctx, "fashion-mnist", 8, c.optimizer, 0));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double r = layer_profile(res.report).fit->pearson_r;
    o.require(r <= c.bound, std::string(c.optimizer) + " r=" + fmt("%.4f", r) + " (<= " + fmt("%.2f", c.bound) + ")");
    if (std::string(c.optimizer) == "adam") o.require(secs <= 900.0, "adam sweep " + fmt("%.0f", secs) + " s (<= 900)");
  }
  return o;
}

// Criteria 2 and 9 share the depth-20 Adam run.
struct Depth20 {
  std::optional<ExperimentResult> result;
};

const ExperimentResult& depth20(const Context& ctx, Depth20& cache) {
  if (!cache.result) {
    json doc = base_config(ctx, "fashion-mnist", 20, "adam", 0);
    doc["training"]["snapshot_epochs"] = {0};
    cache.result = run(ctx, doc);
  }
  return *cache.result;
}

Outcome decay_ratio(const Context& ctx, Depth20& cache) {
  Outcome o;
  const LawFit& f = *layer_profile(depth20(ctx, cache).report).fit;
  o.require(f.rho >= 0.70 && f.rho <= 0.92, "rho=" + fmt("%.4f", f.rho) + " (in [0.70, 0.92])");
  const double hl = f.half_life.value_or(INFINITY);
  o.require(hl >= 2.0 && hl <= 6.0, "half-life=" + fmt("%.3f", hl) + " (in [2, 6])");
  o.detail += "; r=" + fmt("%.4f", f.pearson_r);
  return o;
}

Outcome epoch_dynamics(const Context& ctx, Depth20& cache) {
  Outcome o;
  const Report& r = depth20(ctx, cache).report;
  const double r0 = layer_profile(r, 0).fit->pearson_r;
  const double rl = layer_profile(r).fit->pearson_r;
  o.require(std::abs(rl) - std::abs(r0) >= 0.1,
            "|r| epoch 0 = " + fmt("%.4f", std::abs(r0)) + " (r=" + fmt("%+.4f", r0) + "), last epoch = " +
                fmt("%.4f", std::abs(rl)) + " (r=" + fmt("%+.4f", rl) + "), gain " +
                fmt("%.4f", std::abs(rl) - std::abs(r0)) + " (>= 0.1)");
  return o;
}

Outcome frozen_ordering(const Context& ctx) {
  Outcome o;
  int test_wins = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Report reports[2];
    for (int frozen = 0; frozen < 2; ++frozen) {
      json doc = base_config(ctx, "cifar10", 20, "adam", seed);
      doc["name"] = std::string("cifar10-d20-") + (frozen ? "frozen" : "standard") + "-s" + std::to_string(seed);
      doc["dataset"]["channel"] = 1;
      doc["dataset"]["test"] = true;
      doc["training"]["procedure"] = frozen ? "frozen" : "standard";
      doc["training"]["frozen_split"] = 10;
      reports[frozen] = run(ctx, doc).report;
    }
    const double rs = layer_profile(reports[0]).fit->pearson_r;
    const double rf = layer_profile(reports[1]).fit->pearson_r;
    const double as = *reports[0].metrics.train_accuracy;
    const double af = *reports[1].metrics.train_accuracy;
    const double ts = *reports[0].metrics.test_accuracy;
    const double tf = *reports[1].metrics.test_accuracy;
    const std::string s = "seed " + std::to_string(seed) + ": ";
    o.require(as >= 0.99 && af >= 0.99, s + "train acc " + fmt("%.3f", as) + "/" + fmt("%.3f", af) + " (>= 0.99)");
    o.require(std::abs(rs) > std::abs(rf), s + "r standard " + fmt("%.4f", rs) + " vs frozen " + fmt("%.4f", rf));
    o.detail += "; " + s + "test acc " + fmt("%.4f", ts) + " vs " + fmt("%.4f", tf);
    if (ts >= tf) ++test_wins;
  }
  o.require(test_wins >= 2, "standard test acc >= frozen in " + std::to_string(test_wins) + " of 3 seeds (>= 2)");
  return o;
}

Outcome oracle_equivalence(const Context&) {
  Outcome o;
  Xoshiro256ss rng(20240601);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 20 + rng.below(481);
    const std::size_t d = 1 + rng.below(50);
    const int k = 2 + int(rng.below(9));
    Matrix x = testsupport::random_matrix(n, d, rng);
    const auto labels = testsupport::random_labels(n, k, rng);
    for (std::size_t i = 0; i < n; ++i) x(i, std::size_t(labels[i]) % d) += 1.0 + 0.2 * double(labels[i]);
    worst = std::max(worst, rel_diff(fuzziness(x, labels).value, fuzziness_direct(x, labels)));
  }
  o.require(worst <= 1e-8, "50 instances, worst relative gap " + fmt("%.2e", worst) + " (<= 1e-8)");
  const Matrix line = Matrix::from_rows({{0}, {2}, {4}, {6}});
  const double hand = fuzziness(line, std::vector<int>{0, 0, 1, 1}).value;
  o.require(std::abs(hand - 0.25) <= 1e-12, "1-D example D=" + fmt("%.17g", hand));
  return o;
}

Outcome invariance(const Context&) {
  Outcome o;
  Xoshiro256ss rng(77);
  double trans = 0, rot = 0, scl = 0, add = 0, collapsed = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 30 + rng.below(200);
    const std::size_t d = 2 + rng.below(30);
    const int k = 2 + int(rng.below(9));
    Matrix x = testsupport::random_matrix(n, d, rng);
    const auto labels = testsupport::random_labels(n, k, rng);
    const double d0 = fuzziness(x, labels).value;

    Matrix shifted = x;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) shifted(i, j) += 5.0 - double(j);
    trans = std::max(trans, rel_diff(fuzziness(shifted, labels).value, d0));
    rot = std::max(rot, rel_diff(fuzziness(matmul(x, testsupport::random_orthogonal(d, rng)), labels).value, d0));
    scl = std::max(scl, rel_diff(fuzziness(scale(x, 0.01 + 50 * rng.uniform()), labels).value, d0));

    const auto parts = classwise_fuzziness(x, labels);
    add = std::max(add, rel_diff(std::accumulate(parts.begin(), parts.end(), 0.0), d0));

    Matrix means = testsupport::random_matrix(std::size_t(k), d, rng);
    Matrix c(n, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) c(i, j) = means(std::size_t(labels[i]), j);
    collapsed = std::max(collapsed, std::abs(fuzziness(c, labels).value));
  }
  o.require(trans <= 1e-9, "translation " + fmt("%.1e", trans));
  o.require(rot <= 1e-9, "rotation " + fmt("%.1e", rot));
  o.require(scl <= 1e-9, "scaling " + fmt("%.1e", scl));
  o.require(collapsed <= 1e-12, "collapsed D " + fmt("%.1e", collapsed));
  o.require(add <= 1e-10, "class-wise sum " + fmt("%.1e", add));
  return o;
}

Outcome gradients(const Context&) {
  Outcome o;
  Xoshiro256ss rng(6);
  const Matrix x = testsupport::random_matrix(16, 7, rng);
  std::vector<int> y(16);
  for (std::size_t i = 0; i < 16; ++i) y[i] = int(i % 3);
  const Network net = init_network(NetworkSpec{7, {5, 5}, 3, true}, 11);
  const auto g = testsupport::check_gradients(net, x, y);
  o.require(g.checked == net.parameter_count() && g.max_rel_error <= 1e-4,
            std::to_string(g.checked) + " parameters, worst relative error " + fmt("%.2e", g.max_rel_error));
  return o;
}

Outcome fit_correctness(const Context&) {
  Outcome o;
  std::vector<double> geo;
  for (int l = 0; l < 10; ++l) geo.push_back(4.0 * std::pow(0.73, l));
  const LawFit f = fit_law(geo);
  o.require(std::abs(f.pearson_r + 1.0) <= 1e-12, "exact r=" + fmt("%.15f", f.pearson_r));
  o.require(std::abs(f.rho - 0.73) <= 1e-12, "exact rho gap " + fmt("%.1e", std::abs(f.rho - 0.73)));

  Xoshiro256ss rng(9);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const double rho = 0.5 + 0.45 * rng.uniform();
    const int len = 8 + int(rng.below(13));
    std::vector<double> v;
    for (int l = 0; l < len; ++l) v.push_back(2.0 * std::pow(rho, l) * (1.0 + 0.01 * (2 * rng.uniform() - 1)));
    worst = std::max(worst, std::abs(fit_law(v).rho / rho - 1.0));
  }
  o.require(worst <= 0.01, "noisy rho worst relative error " + fmt("%.2e", worst) + " (<= 1e-2)");
  return o;
}

Outcome perturbation(const Context&) {
  Outcome o;
  Xoshiro256ss rng(12);
  int beaten = 0;
  double margin = INFINITY;
  for (int trial = 0; trial < 1000; ++trial) {
    const int len = 3 + int(rng.below(18));
    const double d0 = 0.1 + 10 * rng.uniform();
    const double dl = d0 * (0.001 + 0.9 * rng.uniform());
    std::vector<double> geo(static_cast<std::size_t>(len));
    for (int l = 0; l < len; ++l) geo[std::size_t(l)] = d0 * std::pow(dl / d0, double(l) / (len - 1));
    std::vector<double> rnd = geo;
    for (int l = 1; l + 1 < len; ++l) rnd[std::size_t(l)] = d0 * std::exp(std::log(dl / d0) * 1.5 * rng.uniform() + 0.3 * rng.normal());
    const double cg = perturbation_coefficient(geo).coefficient;
    const double cr = perturbation_coefficient(rnd).coefficient;
    if (cr < cg * (1 - 1e-12)) ++beaten;
    margin = std::min(margin, cr / cg - 1);
  }
  o.require(beaten == 0, "1000 random profiles, " + std::to_string(beaten) + " beat the geometric one (smallest excess " +
                             fmt("%.1e", margin) + ")");
  return o;
}

Outcome formats(const Context& ctx) {
  Outcome o;
  const std::vector<std::uint8_t> images = {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 64, 128, 255};
  const std::vector<std::uint8_t> labels = {0, 0, 8, 1, 0, 0, 0, 3, 0, 5, 9};
  const IdxTensor ti = parse_idx(images);
  const IdxTensor tl = parse_idx(labels);
  o.require(ti.dims == std::vector<std::uint32_t>{1, 2, 2} && ti.data == std::vector<std::uint8_t>{0, 64, 128, 255} &&
                tl.data == std::vector<std::uint8_t>{0, 5, 9} && serialize_idx(ti) == images &&
                serialize_idx(tl) == labels,
            "IDX fixtures");

  std::vector<std::uint8_t> rec(kCifarRecordBytes, 0);
  rec[0] = 3;
  std::fill(rec.begin() + 1 + 1024, rec.begin() + 1 + 2048, std::uint8_t(7));
  const ImageDataset c = parse_cifar10(rec, 1);
  bool all7 = c.labels() == std::vector<int>{3};
  for (double v : c.features().values()) all7 = all7 && v == 7.0 / 255.0;
  o.require(all7, "CIFAR-10 fixture");

  Xoshiro256ss rng(5);
  std::vector<Matrix> layers = {testsupport::random_matrix(33, 9, rng), testsupport::random_matrix(33, 4, rng)};
  const auto lab = testsupport::random_labels(33, 5, rng);
  const ActivationDump dump = make_dump(layers, lab, 5);
  const auto bytes = encode_dump(dump);
  const ActivationDump back = decode_dump(bytes);
  bool bitwise = encode_dump(back) == bytes && back == dump;
  for (std::size_t l = 0; l < dump.layers.size(); ++l)
    bitwise = bitwise && std::memcmp(back.layers[l].values.data(), dump.layers[l].values.data(),
                                     dump.layers[l].values.size() * sizeof(float)) == 0;
  o.require(bitwise, "activation dump round trip");

  // Two full runs on real data with one seed must emit identical bytes.
  json doc = base_config(ctx, "fashion-mnist", 5, "adam", 42);
  doc["training"] = {{"optimizer", "adam"}, {"sweep", false}, {"lr", 3e-3}, {"epochs", 8}, {"snapshot_epochs", {0, 4}}};
  doc["dataset"]["test"] = true;
  doc["dataset"]["test_per_class"] = {20};
  doc["analysis"] = {{"classwise", true}, {"pca", true}};
  doc["name"] = "stability";
  bool same = true;
  std::vector<std::string> first;
  for (int rep = 0; rep < 2; ++rep) {
    const ExperimentResult r = run(ctx, doc);
    const auto dir = ctx.work / ("stability-bytes-" + std::to_string(rep));
    std::size_t i = 0;
    for (const auto& path : emit_report(r.report, dir)) {
      std::ifstream in(path, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      if (rep == 0) first.push_back(ss.str());
      else same = same && first[i] == ss.str();
      ++i;
    }
    fs::remove_all(dir);
  }
  o.require(same, "report files byte-identical across reruns");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  Context ctx;
  std::string data = "data", work = "acceptance-work";
  std::vector<int> only;
  app.add_option("--data", data, "Dataset parent directory (fetched on demand)");
  app.add_option("--work", work, "Directory for run reports");
  app.add_option("--only", only, "Run just these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  ctx.data = data;
  ctx.work = work;
  fs::create_directories(ctx.work);

  Depth20 d20;
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, [&] { return law_reproduction(ctx); }},   {2, [&] { return decay_ratio(ctx, d20); }},
      {3, [&] { return frozen_ordering(ctx); }},    {4, [&] { return oracle_equivalence(ctx); }},
      {5, [&] { return invariance(ctx); }},         {6, [&] { return gradients(ctx); }},
      {7, [&] { return fit_correctness(ctx); }},    {8, [&] { return perturbation(ctx); }},
      {9, [&] { return epoch_dynamics(ctx, d20); }}, {10, [&] { return formats(ctx); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  // Cheap deterministic checks first so they report even if a long run dies.
  const std::vector<int> order = {4, 5, 6, 7, 8, 10, 1, 2, 9, 3};

  int failed = 0;
  for (int id : order) {
    if (!selected.empty() && !selected.count(id)) continue;
    const auto& fn = criteria[std::size_t(id - 1)].second;
    std::printf("criterion %d: running\n", id);
    std::fflush(stdout);
    Outcome out;
    try {
      out = fn();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("error: ") + e.what();
    }
    if (!out.pass) ++failed;
    std::printf("criterion %d: %s  %s\n", id, out.pass ? "PASS" : "FAIL", out.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
