#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eqsep/dataset.hpp"
#include "eqsep/linalg.hpp"
#include "eqsep/network.hpp"
#include "eqsep/optim.hpp"
#include "eqsep/separation.hpp"

namespace eqsep {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kReportSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Experiment configuration (one JSON document per run)

struct DatasetConfig {
  std::string name = "fashion-mnist";
  std::string dir;          // empty: $EQSEP_DATA_DIR, else ./data/<name>
  bool fetch = true;        // download when the files are missing
  std::size_t resize = 10;  // square side after area resizing; 0 keeps the native size
  int channel = 1;          // CIFAR-10 only
  /// One entry: that many per class. K entries: per-class counts.
  std::vector<std::size_t> per_class = {100};
  bool standardize = true;
  bool test = false;                        // also probe the test split
  std::vector<std::size_t> test_per_class;  // empty: the whole test split
};

struct NetworkConfig {
  std::size_t depth = 8;    // used when hidden_widths is empty
  std::size_t width = 100;
  std::vector<std::size_t> hidden_widths;
  bool batchnorm = true;
};

enum class Procedure { kStandard, kFrozen, kPretrain };
std::string to_string(Procedure p);

struct TrainingConfig {
  Procedure procedure = Procedure::kStandard;
  OptimConfig optim;                 // optim.seed is derived from the run seed
  bool sweep = true;
  std::vector<double> lr_grid;       // empty: the default grid of the optimizer
  std::vector<int> snapshot_epochs;  // the final epoch is always added
  std::size_t frozen_split = 10;
  std::size_t keep_blocks = 10;      // pretrain: blocks kept from the base network
  std::vector<std::size_t> extra_widths = {100, 100, 100, 100, 100};
  unsigned threads = 1;
};

struct AnalysisConfig {
  double rel_tol = kDefaultRelTol;
  bool classwise = true;
  bool pca = false;
  std::vector<std::size_t> block_boundaries;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  DatasetConfig dataset;
  NetworkConfig network;
  TrainingConfig training;
  AnalysisConfig analysis;
  std::string out;  // output directory; empty means none

  NetworkSpec network_spec(std::size_t input_dim, int num_classes) const;
  std::vector<double> resolved_lr_grid() const;
  /// ConfigError on inconsistent values.
  void validate() const;
};

/// Strict parse: unknown keys and wrong types are ConfigError.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, defaults included.
nlohmann::json config_to_json(const ExperimentConfig& config);

/// Seeds of the individual random streams of a run.
struct RunSeeds {
  std::uint64_t sample = 0;
  std::uint64_t test_sample = 0;
  std::uint64_t init = 0;
  std::uint64_t shuffle = 0;
  std::uint64_t extension = 0;
};
RunSeeds derive_run_seeds(std::uint64_t seed);

// ---------------------------------------------------------------------------
// Activation dumps

// "EQSP", u32 version, u32 num_layers, u32 n, u32 K, u32 labels[n], then per
// layer u32 d followed by n*d f32 values row-major. Little-endian throughout.
inline constexpr std::uint32_t kDumpVersion = 1;

struct DumpLayer {
  std::size_t width = 0;
  std::vector<float> values;  // n x width

  friend bool operator==(const DumpLayer&, const DumpLayer&) = default;
};

struct ActivationDump {
  std::uint32_t num_classes = 0;
  std::vector<std::uint32_t> labels;
  std::vector<DumpLayer> layers;

  std::size_t size() const noexcept { return labels.size(); }
  /// Layer l widened to 64-bit.
  Matrix layer_matrix(std::size_t l) const;
  std::vector<int> int_labels() const;

  friend bool operator==(const ActivationDump&, const ActivationDump&) = default;
};

ActivationDump make_dump(std::span<const Matrix> layers, std::span<const int> labels, int num_classes);
std::vector<std::uint8_t> encode_dump(const ActivationDump& dump);
/// FormatError for a bad magic, version or label; LengthError on truncation
/// or trailing bytes.
ActivationDump decode_dump(std::span<const std::uint8_t> bytes);
void write_dump(std::span<const Matrix> layers, std::span<const int> labels, int num_classes,
                const std::filesystem::path& path);
ActivationDump read_dump(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Reports

struct ProfileRecord {
  SeparationProfile profile;
  std::optional<LawFit> fit;
  std::string fit_error;  // why `fit` is missing
  std::vector<double> relative_improvements;
  std::optional<Perturbation> perturbation;

  friend bool operator==(const ProfileRecord&, const ProfileRecord&) = default;
};

struct ClasswiseRow {
  int epoch = -1;
  std::string split;
  std::size_t layer = 0;
  int label = 0;
  double value = 0.0;

  friend bool operator==(const ClasswiseRow&, const ClasswiseRow&) = default;
};

struct PcaRow {
  std::size_t layer = 0;
  std::size_t point = 0;
  double x = 0.0;
  double y = 0.0;
  int label = 0;

  friend bool operator==(const PcaRow&, const PcaRow&) = default;
};

struct SweepRow {
  double lr = 0.0;
  bool failed = false;
  std::string failure;
  std::optional<LawFit> fit;
  double final_fuzziness = 0.0;
  double train_accuracy = 0.0;
  bool selected = false;

  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

struct TrainingRow {
  int stage = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double train_accuracy = 0.0;

  friend bool operator==(const TrainingRow&, const TrainingRow&) = default;
};

struct Metrics {
  std::optional<double> train_loss;
  std::optional<double> train_accuracy;
  std::optional<double> test_loss;
  std::optional<double> test_accuracy;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

struct Report {
  int schema_version = kReportSchemaVersion;
  std::string tool_version = kToolVersion;
  nlohmann::json config;  // echo with defaults, or analysis inputs
  std::map<std::string, std::string> decisions;
  std::map<std::string, std::uint64_t> seeds;
  std::vector<ProfileRecord> profiles;
  std::vector<ClasswiseRow> classwise;
  std::vector<PcaRow> pca;
  std::vector<SweepRow> sweep;
  std::vector<TrainingRow> training;
  Metrics metrics;

  friend bool operator==(const Report&, const Report&) = default;
};

/// Profile plus its fit and derived quantities. Fit failures are recorded in
/// fit_error rather than thrown.
ProfileRecord analyze_profile(SeparationProfile profile);

nlohmann::json report_to_json(const Report& report);
Report report_from_json(const nlohmann::json& doc);

/// Writes report.json plus profiles.csv, fits.csv, classwise.csv, pca.csv,
/// training.csv and sweep.csv into `dir`. Output is a pure function of the
/// report. IoError if anything cannot be written.
std::vector<std::filesystem::path> emit_report(const Report& report, const std::filesystem::path& dir);

/// Layer profile of a dump, plus a block profile when boundaries are given.
Report analyze_dump(const ActivationDump& dump, std::span<const std::size_t> boundaries,
                    double rel_tol = kDefaultRelTol);
Report analyze_dump(const std::filesystem::path& path, std::span<const std::size_t> boundaries,
                    double rel_tol = kDefaultRelTol);

// ---------------------------------------------------------------------------
// Pipeline

struct PreparedData {
  ImageDataset train;
  std::optional<ImageDataset> test;
  std::optional<Standardizer> standardizer;
};

/// Ingest: fetch if needed, load, resize, subsample, standardize.
PreparedData prepare_data(const ExperimentConfig& config);

struct ExperimentResult {
  Report report;
  Network final_network;
  PreparedData data;
};

/// Ingest, train (or sweep), probe, analyze. Errors keep their type and gain
/// the pipeline stage in the message.
ExperimentResult run_experiment(const ExperimentConfig& config);

}  // namespace eqsep
