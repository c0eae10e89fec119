#include "eqsep/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include "binary_io.hpp"
#include "eqsep/errors.hpp"
#include "eqsep/fetch.hpp"
#include "eqsep/rng.hpp"

namespace eqsep {

using nlohmann::json;

std::string to_string(Procedure p) {
  switch (p) {
    case Procedure::kStandard: return "standard";
    case Procedure::kFrozen: return "frozen";
    case Procedure::kPretrain: return "pretrain";
  }
  return "?";
}

namespace {

Procedure parse_procedure(const std::string& s) {
  if (s == "standard") return Procedure::kStandard;
  if (s == "frozen") return Procedure::kFrozen;
  if (s == "pretrain") return Procedure::kPretrain;
  throw ConfigError("unknown training procedure '" + s + "' (expected standard, frozen or pretrain)");
}

constexpr int kDatasetClasses = 10;

// ---------------------------------------------------------------------------
// Strict JSON reading

template <class T>
T convert(const json& v, const std::string& where) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(where + ": expected true or false");
    return v.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_unsigned()) return T(v.get<std::uint64_t>());
      if (v.get<std::int64_t>() < 0) throw ConfigError(where + ": must not be negative");
      return T(v.get<std::int64_t>());
    } else {
      return T(v.get<std::int64_t>());
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(where + ": expected a number");
    return v.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(where + ": expected a string");
    return v.get<std::string>();
  } else {
    if (!v.is_array()) throw ConfigError(where + ": expected an array");
    T out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
    }
    return out;
  }
}

class ObjectReader {
 public:
  ObjectReader(const json& doc, std::string where) : doc_(doc), where_(std::move(where)) {
    if (!doc_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it != doc_.end()) out = convert<T>(*it, where_ + "." + key);
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown field '" + it.key() + "'");
    }
  }

 private:
  const json& doc_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

NetworkSpec ExperimentConfig::network_spec(std::size_t input_dim, int num_classes) const {
  NetworkSpec spec;
  spec.input_dim = input_dim;
  spec.num_classes = num_classes;
  spec.batchnorm = network.batchnorm;
  spec.hidden_widths = network.hidden_widths;
  if (spec.hidden_widths.empty() && network.depth >= 2) spec.hidden_widths.assign(network.depth - 1, network.width);
  return spec;
}

std::vector<double> ExperimentConfig::resolved_lr_grid() const {
  if (!training.lr_grid.empty()) return training.lr_grid;
  return training.optim.kind == OptimizerKind::kAdam ? kAdamLearningRates : kSgdLearningRates;
}

void ExperimentConfig::validate() const {
  const std::string& ds = dataset.name;
  if (ds != "mnist" && ds != "fashion-mnist" && ds != "cifar10") {
    throw ConfigError("dataset.name must be mnist, fashion-mnist or cifar10, got '" + ds + "'");
  }
  if (dataset.channel < 0 || dataset.channel > 2) throw ConfigError("dataset.channel must be 0, 1 or 2");
  auto check_counts = [](const std::vector<std::size_t>& counts, const char* field, bool allow_empty) {
    if (counts.empty() && allow_empty) return;
    if (counts.size() != 1 && counts.size() != std::size_t(kDatasetClasses)) {
      throw ConfigError(std::string(field) + " needs 1 or " + std::to_string(kDatasetClasses) + " entries");
    }
  };
  check_counts(dataset.per_class, "dataset.per_class", false);
  check_counts(dataset.test_per_class, "dataset.test_per_class", true);

  if (network.hidden_widths.empty()) {
    if (network.depth < 2) throw ConfigError("network.depth must be >= 2");
    if (network.width < 1) throw ConfigError("network.width must be >= 1");
  }
  for (std::size_t w : network.hidden_widths) {
    if (w < 1) throw ConfigError("network.hidden_widths entries must be >= 1");
  }
  const std::size_t blocks = network_spec(1, kDatasetClasses).num_blocks();

  training.optim.validate();
  for (std::size_t i = 0; i < training.snapshot_epochs.size(); ++i) {
    const int e = training.snapshot_epochs[i];
    if (e < 0 || e > training.optim.epochs) {
      throw ConfigError("training.snapshot_epochs entry " + std::to_string(e) + " outside [0, epochs]");
    }
  }
  for (double lr : training.lr_grid) {
    if (!(lr > 0.0)) throw ConfigError("training.lr_grid entries must be > 0");
  }
  if (training.procedure == Procedure::kFrozen &&
      (training.frozen_split < 1 || training.frozen_split > blocks)) {
    throw ConfigError("training.frozen_split must lie in [1, " + std::to_string(blocks) + "]");
  }
  if (training.procedure == Procedure::kPretrain) {
    if (training.keep_blocks > blocks) {
      throw ConfigError("training.keep_blocks exceeds the " + std::to_string(blocks) + " blocks of the network");
    }
    for (std::size_t w : training.extra_widths) {
      if (w < 1) throw ConfigError("training.extra_widths entries must be >= 1");
    }
    if (training.keep_blocks + training.extra_widths.size() < 1) {
      throw ConfigError("pretrain extension needs at least one hidden block");
    }
  }
  if (training.threads < 1) throw ConfigError("training.threads must be >= 1");
  if (!(analysis.rel_tol >= 0.0 && analysis.rel_tol < 1.0)) throw ConfigError("analysis.rel_tol must be in [0, 1)");
  const auto& b = analysis.block_boundaries;
  if (!b.empty()) {
    if (b.front() != 0) throw ConfigError("analysis.block_boundaries must start at 0");
    for (std::size_t i = 1; i < b.size(); ++i) {
      if (b[i] <= b[i - 1]) throw ConfigError("analysis.block_boundaries must increase strictly");
    }
  }
}

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig c;
  ObjectReader top(doc, "config");
  top.get("name", c.name);
  top.get("seed", c.seed);
  top.get("out", c.out);

  if (const json* d = top.child("dataset")) {
    ObjectReader r(*d, "dataset");
    r.get("name", c.dataset.name);
    r.get("dir", c.dataset.dir);
    r.get("fetch", c.dataset.fetch);
    r.get("resize", c.dataset.resize);
    r.get("channel", c.dataset.channel);
    r.get("per_class", c.dataset.per_class);
    r.get("standardize", c.dataset.standardize);
    r.get("test", c.dataset.test);
    r.get("test_per_class", c.dataset.test_per_class);
    r.finish();
  }
  if (const json* n = top.child("network")) {
    ObjectReader r(*n, "network");
    r.get("depth", c.network.depth);
    r.get("width", c.network.width);
    r.get("hidden_widths", c.network.hidden_widths);
    r.get("batchnorm", c.network.batchnorm);
    r.finish();
  }
  if (const json* t = top.child("training")) {
    ObjectReader r(*t, "training");
    std::string procedure = to_string(c.training.procedure);
    std::string optimizer = to_string(c.training.optim.kind);
    r.get("procedure", procedure);
    r.get("optimizer", optimizer);
    c.training.procedure = parse_procedure(procedure);
    c.training.optim.kind = parse_optimizer_kind(optimizer);
    r.get("lr", c.training.optim.base_lr);
    r.get("momentum", c.training.optim.momentum);
    r.get("weight_decay", c.training.optim.weight_decay);
    r.get("beta1", c.training.optim.beta1);
    r.get("beta2", c.training.optim.beta2);
    r.get("epsilon", c.training.optim.epsilon);
    r.get("epochs", c.training.optim.epochs);
    r.get("batch_size", c.training.optim.batch_size);
    r.get("sweep", c.training.sweep);
    r.get("lr_grid", c.training.lr_grid);
    r.get("snapshot_epochs", c.training.snapshot_epochs);
    r.get("frozen_split", c.training.frozen_split);
    r.get("keep_blocks", c.training.keep_blocks);
    r.get("extra_widths", c.training.extra_widths);
    r.get("threads", c.training.threads);
    r.finish();
  }
  if (const json* a = top.child("analysis")) {
    ObjectReader r(*a, "analysis");
    r.get("rel_tol", c.analysis.rel_tol);
    r.get("classwise", c.analysis.classwise);
    r.get("pca", c.analysis.pca);
    r.get("block_boundaries", c.analysis.block_boundaries);
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

json config_to_json(const ExperimentConfig& c) {
  const auto& o = c.training.optim;
  return json{
      {"name", c.name},
      {"seed", c.seed},
      {"out", c.out},
      {"dataset",
       {{"name", c.dataset.name},
        {"dir", c.dataset.dir},
        {"fetch", c.dataset.fetch},
        {"resize", c.dataset.resize},
        {"channel", c.dataset.channel},
        {"per_class", c.dataset.per_class},
        {"standardize", c.dataset.standardize},
        {"test", c.dataset.test},
        {"test_per_class", c.dataset.test_per_class}}},
      {"network",
       {{"depth", c.network.depth},
        {"width", c.network.width},
        {"hidden_widths", c.network.hidden_widths},
        {"batchnorm", c.network.batchnorm}}},
      {"training",
       {{"procedure", to_string(c.training.procedure)},
        {"optimizer", to_string(o.kind)},
        {"lr", o.base_lr},
        {"momentum", o.momentum},
        {"weight_decay", o.weight_decay},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"epsilon", o.epsilon},
        {"epochs", o.epochs},
        {"batch_size", o.batch_size},
        {"sweep", c.training.sweep},
        {"lr_grid", c.training.lr_grid},
        {"snapshot_epochs", c.training.snapshot_epochs},
        {"frozen_split", c.training.frozen_split},
        {"keep_blocks", c.training.keep_blocks},
        {"extra_widths", c.training.extra_widths},
        {"threads", c.training.threads}}},
      {"analysis",
       {{"rel_tol", c.analysis.rel_tol},
        {"classwise", c.analysis.classwise},
        {"pca", c.analysis.pca},
        {"block_boundaries", c.analysis.block_boundaries}}},
  };
}

RunSeeds derive_run_seeds(std::uint64_t seed) {
  return {derive_seed(seed, 1), derive_seed(seed, 2), derive_seed(seed, 3), derive_seed(seed, 4),
          derive_seed(seed, 5)};
}

// ---------------------------------------------------------------------------
// Activation dumps

Matrix ActivationDump::layer_matrix(std::size_t l) const {
  const DumpLayer& layer = layers.at(l);
  std::vector<double> values(layer.values.begin(), layer.values.end());
  return Matrix(size(), layer.width, std::move(values));
}

std::vector<int> ActivationDump::int_labels() const { return {labels.begin(), labels.end()}; }

ActivationDump make_dump(std::span<const Matrix> layers, std::span<const int> labels, int num_classes) {
  if (num_classes < 1) throw DimensionError("dump needs at least one class");
  ActivationDump dump;
  dump.num_classes = std::uint32_t(num_classes);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw LabelError("dump label " + std::to_string(y) + " out of range");
    dump.labels.push_back(std::uint32_t(y));
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Matrix& m = layers[l];
    if (m.rows() != labels.size()) {
      throw DimensionError("dump layer " + std::to_string(l) + " has " + std::to_string(m.rows()) +
                           " rows for " + std::to_string(labels.size()) + " labels");
    }
    DumpLayer dl;
    dl.width = m.cols();
    dl.values.reserve(m.size());
    for (double v : m.values()) dl.values.push_back(float(v));
    dump.layers.push_back(std::move(dl));
  }
  return dump;
}

std::vector<std::uint8_t> encode_dump(const ActivationDump& dump) {
  detail::ByteWriter w;
  w.bytes("EQSP", 4);
  w.u32(kDumpVersion);
  w.u32(std::uint32_t(dump.layers.size()));
  w.u32(std::uint32_t(dump.size()));
  w.u32(dump.num_classes);
  for (std::uint32_t y : dump.labels) w.u32(y);
  for (const DumpLayer& l : dump.layers) {
    if (l.values.size() != l.width * dump.size()) throw DimensionError("dump layer payload size mismatch");
    w.u32(std::uint32_t(l.width));
    for (float v : l.values) w.f32(v);
  }
  return w.take();
}

ActivationDump decode_dump(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "activation dump");
  const auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), "EQSP")) throw FormatError("not an activation dump (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kDumpVersion) {
    throw FormatError("activation dump version " + std::to_string(version) + " is not supported");
  }
  const std::uint32_t num_layers = r.u32();
  const std::uint32_t n = r.u32();
  ActivationDump dump;
  dump.num_classes = r.u32();
  r.need(std::size_t(n) * 4);
  dump.labels.resize(n);
  for (auto& y : dump.labels) {
    y = r.u32();
    if (y >= dump.num_classes) {
      throw FormatError("dump label " + std::to_string(y) + " not below K = " + std::to_string(dump.num_classes));
    }
  }
  for (std::uint32_t l = 0; l < num_layers; ++l) {
    DumpLayer dl;
    dl.width = r.u32();
    const std::size_t count = dl.width * std::size_t(n);
    r.need(count * 4);
    dl.values.resize(count);
    for (float& v : dl.values) v = r.f32();
    dump.layers.push_back(std::move(dl));
  }
  if (r.remaining() != 0) throw LengthError("activation dump has " + std::to_string(r.remaining()) + " trailing bytes");
  return dump;
}

namespace {

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

}  // namespace

void write_dump(std::span<const Matrix> layers, std::span<const int> labels, int num_classes,
                const std::filesystem::path& path) {
  write_bytes(path, encode_dump(make_dump(layers, labels, num_classes)));
}

ActivationDump read_dump(const std::filesystem::path& path) { return decode_dump(read_file(path)); }

// ---------------------------------------------------------------------------
// Report JSON

ProfileRecord analyze_profile(SeparationProfile profile) {
  ProfileRecord rec;
  try {
    rec.fit = fit_law(profile);
  } catch (const NumericalError& e) {
    rec.fit_error = e.what();
  }
  const bool positive =
      std::all_of(profile.values.begin(), profile.values.end(), [](double v) { return v > 0.0 && std::isfinite(v); });
  if (positive) {
    rec.relative_improvements = relative_improvements(profile.values);
    if (profile.values.size() >= 2) rec.perturbation = perturbation_coefficient(profile.values);
  }
  rec.profile = std::move(profile);
  return rec;
}

namespace {

json optional_number(const std::optional<double>& v) {
  return v && std::isfinite(*v) ? json(*v) : json(nullptr);
}

std::optional<double> read_optional(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<double>();
}

json fit_to_json(const LawFit& f) {
  return {{"slope", f.slope},
          {"intercept", f.intercept},
          {"pearson_r", f.pearson_r},
          {"rho", f.rho},
          {"half_life", optional_number(f.half_life)},
          {"residuals", f.residuals}};
}

LawFit fit_from_json(const json& j) {
  LawFit f;
  f.slope = j.at("slope").get<double>();
  f.intercept = j.at("intercept").get<double>();
  f.pearson_r = j.at("pearson_r").get<double>();
  f.rho = j.at("rho").get<double>();
  f.half_life = read_optional(j, "half_life");
  f.residuals = j.at("residuals").get<std::vector<double>>();
  return f;
}

json optional_fit(const std::optional<LawFit>& f) { return f ? fit_to_json(*f) : json(nullptr); }

std::optional<LawFit> optional_fit_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return fit_from_json(j);
}

}  // namespace

json report_to_json(const Report& r) {
  json profiles = json::array();
  for (const auto& p : r.profiles) {
    json perturbation = nullptr;
    if (p.perturbation) perturbation = {{"ratio", p.perturbation->ratio}, {"coefficient", p.perturbation->coefficient}};
    profiles.push_back({{"epoch", p.profile.epoch},
                        {"split", p.profile.split},
                        {"grouping", p.profile.grouping},
                        {"indices", p.profile.indices},
                        {"values", p.profile.values},
                        {"fit", optional_fit(p.fit)},
                        {"fit_error", p.fit_error},
                        {"relative_improvements", p.relative_improvements},
                        {"perturbation", perturbation}});
  }
  json classwise = json::array();
  for (const auto& c : r.classwise) {
    classwise.push_back({{"epoch", c.epoch}, {"split", c.split}, {"layer", c.layer}, {"class", c.label}, {"value", c.value}});
  }
  json pca = json::array();
  for (const auto& p : r.pca) {
    pca.push_back({{"layer", p.layer}, {"point", p.point}, {"x", p.x}, {"y", p.y}, {"label", p.label}});
  }
  json sweep = json::array();
  for (const auto& s : r.sweep) {
    sweep.push_back({{"lr", s.lr},
                     {"failed", s.failed},
                     {"failure", s.failure},
                     {"fit", optional_fit(s.fit)},
                     {"final_fuzziness", s.final_fuzziness},
                     {"train_accuracy", s.train_accuracy},
                     {"selected", s.selected}});
  }
  json training = json::array();
  for (const auto& t : r.training) {
    training.push_back({{"stage", t.stage}, {"epoch", t.epoch}, {"lr", t.lr}, {"loss", t.loss},
                        {"train_accuracy", t.train_accuracy}});
  }
  return json{{"schema_version", r.schema_version},
              {"tool_version", r.tool_version},
              {"config", r.config},
              {"decisions", r.decisions},
              {"seeds", r.seeds},
              {"profiles", profiles},
              {"classwise", classwise},
              {"pca", pca},
              {"sweep", sweep},
              {"training", training},
              {"metrics",
               {{"train_loss", optional_number(r.metrics.train_loss)},
                {"train_accuracy", optional_number(r.metrics.train_accuracy)},
                {"test_loss", optional_number(r.metrics.test_loss)},
                {"test_accuracy", optional_number(r.metrics.test_accuracy)}}}};
}

Report report_from_json(const json& doc) {
  try {
    Report r;
    r.schema_version = doc.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion) {
      throw FormatError("report schema version " + std::to_string(r.schema_version) + " is not supported");
    }
    r.tool_version = doc.at("tool_version").get<std::string>();
    r.config = doc.at("config");
    r.decisions = doc.at("decisions").get<std::map<std::string, std::string>>();
    r.seeds = doc.at("seeds").get<std::map<std::string, std::uint64_t>>();
    for (const auto& p : doc.at("profiles")) {
      ProfileRecord rec;
      rec.profile.epoch = p.at("epoch").get<int>();
      rec.profile.split = p.at("split").get<std::string>();
      rec.profile.grouping = p.at("grouping").get<std::string>();
      rec.profile.indices = p.at("indices").get<std::vector<std::size_t>>();
      rec.profile.values = p.at("values").get<std::vector<double>>();
      rec.fit = optional_fit_from(p.at("fit"));
      rec.fit_error = p.at("fit_error").get<std::string>();
      rec.relative_improvements = p.at("relative_improvements").get<std::vector<double>>();
      if (const auto& pt = p.at("perturbation"); !pt.is_null()) {
        rec.perturbation = Perturbation{pt.at("ratio").get<double>(), pt.at("coefficient").get<double>()};
      }
      r.profiles.push_back(std::move(rec));
    }
    for (const auto& c : doc.at("classwise")) {
      r.classwise.push_back({c.at("epoch").get<int>(), c.at("split").get<std::string>(),
                             c.at("layer").get<std::size_t>(), c.at("class").get<int>(), c.at("value").get<double>()});
    }
    for (const auto& p : doc.at("pca")) {
      r.pca.push_back({p.at("layer").get<std::size_t>(), p.at("point").get<std::size_t>(), p.at("x").get<double>(),
                       p.at("y").get<double>(), p.at("label").get<int>()});
    }
    for (const auto& s : doc.at("sweep")) {
      r.sweep.push_back({s.at("lr").get<double>(), s.at("failed").get<bool>(), s.at("failure").get<std::string>(),
                         optional_fit_from(s.at("fit")), s.at("final_fuzziness").get<double>(),
                         s.at("train_accuracy").get<double>(), s.at("selected").get<bool>()});
    }
    for (const auto& t : doc.at("training")) {
      r.training.push_back({t.at("stage").get<int>(), t.at("epoch").get<int>(), t.at("lr").get<double>(),
                            t.at("loss").get<double>(), t.at("train_accuracy").get<double>()});
    }
    const json& m = doc.at("metrics");
    r.metrics = {read_optional(m, "train_loss"), read_optional(m, "train_accuracy"), read_optional(m, "test_loss"),
                 read_optional(m, "test_accuracy")};
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// CSV emission

namespace {

std::string num(double v) {
  if (!std::isfinite(v)) return "";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

}  // namespace

std::vector<std::filesystem::path> emit_report(const Report& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  std::ostringstream profiles, fits, classwise, pca, training, sweep;
  profiles << "epoch,split,grouping,layer,D,logD\n";
  fits << "epoch,split,grouping,slope,intercept,pearson_r,rho,half_life\n";
  for (const auto& p : report.profiles) {
    const auto& pr = p.profile;
    for (std::size_t i = 0; i < pr.values.size(); ++i) {
      const double v = pr.values[i];
      profiles << pr.epoch << ',' << pr.split << ',' << pr.grouping << ',' << pr.indices[i] << ',' << num(v) << ','
               << (v > 0.0 ? num(std::log(v)) : std::string()) << '\n';
    }
    if (p.fit) {
      fits << pr.epoch << ',' << pr.split << ',' << pr.grouping << ',' << num(p.fit->slope) << ','
           << num(p.fit->intercept) << ',' << num(p.fit->pearson_r) << ',' << num(p.fit->rho) << ','
           << opt_num(p.fit->half_life) << '\n';
    }
  }
  classwise << "epoch,split,layer,class,D_k\n";
  for (const auto& c : report.classwise) {
    classwise << c.epoch << ',' << c.split << ',' << c.layer << ',' << c.label << ',' << num(c.value) << '\n';
  }
  pca << "layer,point,x,y,label\n";
  for (const auto& p : report.pca) {
    pca << p.layer << ',' << p.point << ',' << num(p.x) << ',' << num(p.y) << ',' << p.label << '\n';
  }
  training << "stage,epoch,lr,loss,train_accuracy\n";
  for (const auto& t : report.training) {
    training << t.stage << ',' << t.epoch << ',' << num(t.lr) << ',' << num(t.loss) << ',' << num(t.train_accuracy)
             << '\n';
  }
  sweep << "lr,failed,pearson_r,rho,final_D,train_accuracy,selected\n";
  for (const auto& s : report.sweep) {
    sweep << num(s.lr) << ',' << (s.failed ? 1 : 0) << ',' << (s.fit ? num(s.fit->pearson_r) : "") << ','
          << (s.fit ? num(s.fit->rho) : "") << ',' << num(s.final_fuzziness) << ',' << num(s.train_accuracy) << ','
          << (s.selected ? 1 : 0) << '\n';
  }

  const std::vector<std::pair<std::string, std::string>> files = {
      {"report.json", report_to_json(report).dump(2) + "\n"},
      {"profiles.csv", profiles.str()},
      {"fits.csv", fits.str()},
      {"classwise.csv", classwise.str()},
      {"pca.csv", pca.str()},
      {"training.csv", training.str()},
      {"sweep.csv", sweep.str()},
  };
  std::vector<std::filesystem::path> written;
  for (const auto& [name, text] : files) {
    write_text(dir / name, text);
    written.push_back(dir / name);
  }
  return written;
}

// ---------------------------------------------------------------------------
// Dump analysis

Report analyze_dump(const ActivationDump& dump, std::span<const std::size_t> boundaries, double rel_tol) {
  Report report;
  report.config = {{"source", "activation dump"},
                   {"layers", dump.layers.size()},
                   {"n", dump.size()},
                   {"num_classes", dump.num_classes},
                   {"rel_tol", rel_tol},
                   {"block_boundaries", std::vector<std::size_t>(boundaries.begin(), boundaries.end())}};
  report.decisions = {{"log", "natural"}, {"pseudoinverse", "eigenvalues above rel_tol * max, at most K - 1"},
                      {"precision", "float32 storage, float64 analysis"}};
  const std::vector<int> labels = dump.int_labels();
  std::vector<Matrix> layers;
  for (std::size_t l = 0; l < dump.layers.size(); ++l) layers.push_back(dump.layer_matrix(l));
  SeparationProfile layer_profile = separation_profile(std::span<const Matrix>(layers), labels, rel_tol,
                                                       int(dump.num_classes));
  if (!boundaries.empty()) {
    report.profiles.push_back(analyze_profile(group_blocks(layer_profile, boundaries)));
  }
  report.profiles.insert(report.profiles.begin(), analyze_profile(std::move(layer_profile)));
  return report;
}

Report analyze_dump(const std::filesystem::path& path, std::span<const std::size_t> boundaries, double rel_tol) {
  return analyze_dump(read_dump(path), boundaries, rel_tol);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

std::filesystem::path data_dir(const DatasetConfig& d) {
  if (!d.dir.empty()) return d.dir;
  if (const char* env = std::getenv("EQSEP_DATA_DIR"); env != nullptr && *env != '\0') {
    return std::filesystem::path(env) / d.name;
  }
  return std::filesystem::path("data") / d.name;
}

SamplingSpec sampling(const std::vector<std::size_t>& per_class, std::uint64_t seed) {
  if (per_class.size() == 1) return SamplingSpec::balanced(kDatasetClasses, per_class.front(), seed);
  return SamplingSpec{per_class, seed};
}

ImageDataset shrink(const ImageDataset& d, std::size_t side) {
  if (side == 0 || (d.image_height() == side && d.image_width() == side)) return d;
  return resize_dataset(d, side, side);
}

template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error&) {
    rethrow_with_context(std::string(name) + ": ");
  }
}

std::map<std::string, std::string> recorded_decisions(const ExperimentConfig& c) {
  return {
      {"loss", "softmax cross-entropy"},
      {"init", "He normal N(0, 2/fan_in) via Box-Muller on xoshiro256**; zero biases"},
      {"batchnorm", "eps 1e-5, running-stat momentum 0.1, biased variance to normalize, unbiased for running stats"},
      {"probe", "eval mode (running statistics), capture after ReLU, input as capture point 0"},
      {"weight_decay", "coupled L2 added to every gradient"},
      {"schedule", "x0.1 at epochs/3 and 2*epochs/3 (integer division)"},
      {"final_batch", "short final batch kept; a trailing batch of one joins the previous batch"},
      {"normalization", c.dataset.standardize ? "x/255, then per-feature standardization with train statistics"
                                              : "x/255"},
      {"resize", "area averaging"},
      {"log", "natural"},
      {"pseudoinverse", "eigenvalues above rel_tol * max, at most K - 1"},
      {"selection", "most negative Pearson r of (l, log D_l) at the last epoch; ties to smaller final D"},
      {"sweep_init", "all grid points share one initialization"},
      {"frozen", "frozen layers keep their batch-norm running statistics"},
      {"pca", "sample covariance (n - 1), power iteration with deflation"},
      {"classwise", "per-class within scatter normalized by the total n"},
  };
}

void add_classwise(Report& report, const ForwardTrace& trace, std::span<const int> labels, int K, int epoch,
                   const std::string& split, double rel_tol) {
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    std::vector<double> values;
    try {
      values = classwise_fuzziness(trace.layers[l], labels, rel_tol, K);
    } catch (const Error&) {
      rethrow_with_context("class-wise, layer " + std::to_string(l) + ": ");
    }
    for (std::size_t k = 0; k < values.size(); ++k) {
      report.classwise.push_back({epoch, split, l, int(k), values[k]});
    }
  }
}

void add_pca(Report& report, const ForwardTrace& trace, std::span<const int> labels) {
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const Matrix& x = trace.layers[l];
    if (x.cols() < 2) continue;
    PrincipalComponents pcs;
    try {
      pcs = top_k_components(x, 2);
    } catch (const DegenerateError&) {
      continue;  // a dead layer has nothing to show
    }
    const Matrix coords = project(x, pcs);
    for (std::size_t i = 0; i < coords.rows(); ++i) {
      report.pca.push_back({l, i, coords(i, 0), coords(i, 1), labels[i]});
    }
  }
}

}  // namespace

PreparedData prepare_data(const ExperimentConfig& config) {
  const DatasetConfig& d = config.dataset;
  const RunSeeds seeds = derive_run_seeds(config.seed);
  const auto dir = data_dir(d);
  if (d.fetch) fetch_dataset(d.name, dir);

  PreparedData out;
  ImageDataset train = subsample(load_dataset(d.name, dir, DatasetSplit::kTrain, d.channel),
                                 sampling(d.per_class, seeds.sample));
  train = shrink(train, d.resize);
  if (d.standardize) {
    StandardizeResult s = standardize(train);
    out.train = std::move(s.dataset);
    out.standardizer = std::move(s.transform);
  } else {
    out.train = std::move(train);
  }
  if (d.test) {
    ImageDataset test = load_dataset(d.name, dir, DatasetSplit::kTest, d.channel);
    if (!d.test_per_class.empty()) test = subsample(test, sampling(d.test_per_class, seeds.test_sample));
    test = shrink(test, d.resize);
    out.test = out.standardizer ? out.standardizer->apply(test) : std::move(test);
  }
  return out;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  stage("config", [&] { config.validate(); });
  ExperimentResult result;
  result.data = stage("ingest", [&] { return prepare_data(config); });
  const ImageDataset& train_data = result.data.train;
  const int K = train_data.num_classes();
  const RunSeeds seeds = derive_run_seeds(config.seed);
  const NetworkSpec spec = config.network_spec(train_data.feature_dim(), K);
  const double rel_tol = config.analysis.rel_tol;

  Report& report = result.report;
  report.config = config_to_json(config);
  report.decisions = recorded_decisions(config);
  report.seeds = {{"run", config.seed},         {"sample", seeds.sample}, {"test_sample", seeds.test_sample},
                  {"init", seeds.init},         {"shuffle", seeds.shuffle}, {"extension", seeds.extension}};

  OptimConfig optim = config.training.optim;
  optim.seed = seeds.shuffle;
  TrainOptions options;
  options.snapshot_epochs = config.training.snapshot_epochs;
  options.snapshot_epochs.push_back(optim.epochs);
  std::sort(options.snapshot_epochs.begin(), options.snapshot_epochs.end());
  options.snapshot_epochs.erase(std::unique(options.snapshot_epochs.begin(), options.snapshot_epochs.end()),
                                options.snapshot_epochs.end());
  const std::vector<double> grid = config.resolved_lr_grid();

  // Runs the chosen procedure from `initial`, sweeping learning rates when
  // configured.
  auto fit_procedure = [&](const Network& initial, const Trainer& trainer) {
    if (!config.training.sweep) return trainer(initial, optim);
    SweepResult sweep = sweep_select(train_data, initial, grid, optim, trainer, rel_tol, config.training.threads);
    for (std::size_t i = 0; i < sweep.entries.size(); ++i) {
      const SweepEntry& e = sweep.entries[i];
      report.sweep.push_back({e.lr, e.failed, e.failure, e.fit, e.final_fuzziness, e.final_train.accuracy,
                              i == sweep.best});
    }
    return std::move(sweep.best_record);
  };

  TrainRecord record = stage("train", [&] {
    const Network initial = init_network(spec, seeds.init);
    switch (config.training.procedure) {
      case Procedure::kStandard:
        return fit_procedure(initial, [&](Network net, const OptimConfig& cfg) {
          const FreezeMask mask = FreezeMask::none(net);
          return train(std::move(net), train_data, cfg, mask, options);
        });
      case Procedure::kFrozen:
        return fit_procedure(initial, [&](Network net, const OptimConfig& cfg) {
          return frozen_train(std::move(net), train_data, cfg, config.training.frozen_split, options);
        });
      case Procedure::kPretrain: {
        TrainRecord base = fit_procedure(initial, [&](Network net, const OptimConfig& cfg) {
          const FreezeMask mask = FreezeMask::none(net);
          return train(std::move(net), train_data, cfg, mask, {});
        });
        const ForwardTrace probe = probe_features(base.final_network, train_data.features());
        SeparationProfile base_profile = separation_profile(probe, train_data.labels(), rel_tol, K);
        base_profile.split = "base";
        base_profile.epoch = optim.epochs;
        report.profiles.push_back(analyze_profile(std::move(base_profile)));
        OptimConfig ext = base.config;
        return pretrain_extend(base.final_network, config.training.keep_blocks, config.training.extra_widths,
                               train_data, ext, seeds.extension, options);
      }
    }
    throw ConfigError("unhandled training procedure");
  });

  for (const EpochLog& e : record.log) {
    report.training.push_back({e.stage, e.epoch, e.lr, e.loss, e.train_accuracy});
  }
  report.metrics.train_loss = record.final_train.loss;
  report.metrics.train_accuracy = record.final_train.accuracy;

  stage("analyze", [&] {
    const Snapshot* last = &record.snapshots.back();
    for (const Snapshot& snap : record.snapshots) {
      const bool final_snapshot = &snap == last;
      const ForwardTrace probe = probe_features(snap.network, train_data.features());
      SeparationProfile profile = separation_profile(probe, train_data.labels(), rel_tol, K);
      profile.epoch = snap.epoch;
      if (final_snapshot && !config.analysis.block_boundaries.empty()) {
        SeparationProfile blocks = group_blocks(profile, config.analysis.block_boundaries);
        report.profiles.push_back(analyze_profile(std::move(profile)));
        report.profiles.push_back(analyze_profile(std::move(blocks)));
      } else {
        report.profiles.push_back(analyze_profile(std::move(profile)));
      }
      if (final_snapshot) {
        if (config.analysis.classwise) add_classwise(report, probe, train_data.labels(), K, snap.epoch, "train", rel_tol);
        if (config.analysis.pca) add_pca(report, probe, train_data.labels());
      }

      if (result.data.test) {
        const ImageDataset& test = *result.data.test;
        const ForwardTrace test_probe = probe_features(snap.network, test.features());
        SeparationProfile tp = separation_profile(test_probe, test.labels(), rel_tol, K);
        tp.epoch = snap.epoch;
        tp.split = "test";
        report.profiles.push_back(analyze_profile(std::move(tp)));
        if (final_snapshot && config.analysis.classwise) {
          add_classwise(report, test_probe, test.labels(), K, snap.epoch, "test", rel_tol);
        }
      }
    }
    if (result.data.test) {
      const Evaluation ev = evaluate(record.final_network, result.data.test->features(), result.data.test->labels());
      report.metrics.test_loss = ev.loss;
      report.metrics.test_accuracy = ev.accuracy;
    }
  });

  result.final_network = std::move(record.final_network);
  return result;
}

}  // namespace eqsep
