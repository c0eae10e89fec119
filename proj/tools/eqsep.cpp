// eqsep: command-line front end. Exit codes: 0 success, 1 user or
// configuration error, 2 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "eqsep/dataset.hpp"
#include "eqsep/errors.hpp"
#include "eqsep/fetch.hpp"
#include "eqsep/harness.hpp"
#include "eqsep/network.hpp"
#include "eqsep/separation.hpp"

namespace fs = std::filesystem;
using namespace eqsep;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig resolve_config(const Globals& g) {
  ExperimentConfig cfg = g.config.empty() ? parse_config(nlohmann::json::object()) : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.out = g.out;
  return cfg;
}

fs::path require_out(const Globals& g, const ExperimentConfig* cfg = nullptr) {
  if (!g.out.empty()) return g.out;
  if (cfg != nullptr && !cfg->out.empty()) return cfg->out;
  throw ConfigError("no output directory: pass --out or set \"out\" in the config");
}

void print_fit_line(const ProfileRecord& p) {
  std::printf("epoch %4d  %-5s %-5s  points %2zu  ", p.profile.epoch, p.profile.split.c_str(),
              p.profile.grouping.c_str(), p.profile.values.size());
  if (!p.fit) {
    std::printf("no fit: %s\n", p.fit_error.c_str());
    return;
  }
  std::printf("r = %+.4f  rho = %.4f", p.fit->pearson_r, p.fit->rho);
  if (p.fit->half_life) std::printf("  half-life = %.3f", *p.fit->half_life);
  std::printf("\n");
}

void print_summary(const Report& r) {
  for (const auto& s : r.sweep) {
    if (s.failed) {
      std::printf("lr %-8g failed: %s\n", s.lr, s.failure.c_str());
    } else {
      std::printf("lr %-8g r = %+.4f  rho = %.4f  train acc %.4f%s\n", s.lr, s.fit->pearson_r, s.fit->rho,
                  s.train_accuracy, s.selected ? "  <- selected" : "");
    }
  }
  for (const auto& p : r.profiles) print_fit_line(p);
  if (r.metrics.train_accuracy) std::printf("train accuracy %.4f\n", *r.metrics.train_accuracy);
  if (r.metrics.test_accuracy) std::printf("test accuracy  %.4f\n", *r.metrics.test_accuracy);
}

void run_training(const Globals& g, bool sweep) {
  ExperimentConfig cfg = resolve_config(g);
  cfg.training.sweep = sweep;
  const fs::path out = require_out(g, &cfg);
  ExperimentResult result = run_experiment(cfg);
  emit_report(result.report, out);
  save_checkpoint(result.final_network, out / "final.eqnw");
  print_summary(result.report);
  std::printf("wrote %s\n", out.string().c_str());
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + item + "'");
    }
  }
  return values;
}

// Profile values from the D column of a profiles.csv, optionally restricted
// to one epoch/split/grouping.
std::vector<double> values_from_csv(const fs::path& path, int epoch, const std::string& split,
                                    const std::string& grouping) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "epoch,split,grouping,layer,D,logD") throw FormatError(path.string() + " is not a profiles.csv");
  std::vector<double> values;
  int chosen_epoch = epoch;
  std::vector<std::pair<int, double>> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
    if (cols.size() < 5) throw FormatError("short row in " + path.string());
    if (cols[1] != split || cols[2] != grouping) continue;
    rows.emplace_back(std::stoi(cols[0]), std::stod(cols[4]));
  }
  if (chosen_epoch < 0) {
    for (const auto& r : rows) chosen_epoch = std::max(chosen_epoch, r.first);
  }
  for (const auto& r : rows) {
    if (r.first == chosen_epoch) values.push_back(r.second);
  }
  if (values.empty()) throw ConfigError("no matching profile rows in " + path.string());
  return values;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Separation fuzziness across network layers: train, probe, fit, analyze."};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed_value, "Override the run seed");
  app.add_option("--out", g.out, "Output directory");

  auto* fetch = app.add_subcommand("fetch", "Download and verify datasets");
  std::vector<std::string> fetch_names;
  std::string fetch_dir;
  fetch->add_option("datasets", fetch_names, "mnist, fashion-mnist, cifar10")->required();
  fetch->add_option("--dir", fetch_dir, "Parent directory (default $EQSEP_DATA_DIR or ./data)");

  auto* train = app.add_subcommand("train", "Train at the configured learning rate and analyze");
  auto* sweep = app.add_subcommand("sweep", "Sweep the learning-rate grid, keep the best law, analyze");

  auto* probe = app.add_subcommand("probe", "Write an activation dump of a checkpoint on the configured data");
  std::string checkpoint, dump_path, probe_split = "train";
  probe->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  probe->add_option("--dump", dump_path, "Output dump path")->required();
  probe->add_option("--split", probe_split, "train or test")->check(CLI::IsMember({"train", "test"}));

  auto* fit = app.add_subcommand("fit", "Fit the log-linear law to a profile");
  std::string fit_values, fit_csv, fit_split = "train", fit_grouping = "layer";
  int fit_epoch = -1;
  auto* values_opt = fit->add_option("--values", fit_values, "Comma-separated D values");
  auto* csv_opt = fit->add_option("--profiles", fit_csv, "profiles.csv to read")->check(CLI::ExistingFile);
  values_opt->excludes(csv_opt);
  fit->add_option("--epoch", fit_epoch, "Epoch to pick from the CSV (default: last)");
  fit->add_option("--split", fit_split, "Split to pick from the CSV");
  fit->add_option("--grouping", fit_grouping, "layer or block");

  auto* analyze = app.add_subcommand("analyze-dump", "Profile and fit an activation dump");
  std::string analyze_path;
  std::vector<std::size_t> boundaries;
  double rel_tol = kDefaultRelTol;
  analyze->add_option("dump", analyze_path, "Dump file")->required()->check(CLI::ExistingFile);
  analyze->add_option("--boundaries", boundaries, "Block boundary indices, starting at 0")->delimiter(',');
  analyze->add_option("--rel-tol", rel_tol, "Pseudoinverse eigenvalue cutoff");

  auto* report = app.add_subcommand("report", "Regenerate CSV tables from a report.json");
  std::string report_path;
  report->add_option("report", report_path, "report.json")->required()->check(CLI::ExistingFile);

  for (auto* sub : {fetch, train, sweep, probe, fit, analyze, report}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (seed_opt->count() > 0) g.seed = seed_value;

  try {
    if (*fetch) {
      for (const auto& name : fetch_names) {
        fs::path parent = fetch_dir;
        if (parent.empty()) {
          const char* env = std::getenv("EQSEP_DATA_DIR");
          parent = (env != nullptr && *env != '\0') ? fs::path(env) : fs::path("data");
        }
        const FetchResult r = fetch_dataset(name, parent / name);
        for (const auto& f : r.files) std::printf("%s\n", f.string().c_str());
        for (const auto& f : r.repaired) std::fprintf(stderr, "repaired corrupted file %s\n", f.c_str());
      }
    } else if (*train) {
      run_training(g, false);
    } else if (*sweep) {
      run_training(g, true);
    } else if (*probe) {
      const ExperimentConfig cfg = resolve_config(g);
      const PreparedData data = prepare_data(cfg);
      if (probe_split == "test" && !data.test) throw ConfigError("config does not enable the test split");
      const ImageDataset& d = probe_split == "test" ? *data.test : data.train;
      const Network net = load_checkpoint(checkpoint);
      const ForwardTrace trace = probe_features(net, d.features());
      write_dump(trace.layers, d.labels(), d.num_classes(), dump_path);
      std::printf("wrote %s (%zu layers, %zu points)\n", dump_path.c_str(), trace.layers.size(), d.size());
    } else if (*fit) {
      std::vector<double> values;
      if (!fit_values.empty()) {
        values = parse_values(fit_values);
      } else if (!fit_csv.empty()) {
        values = values_from_csv(fit_csv, fit_epoch, fit_split, fit_grouping);
      } else {
        throw ConfigError("fit needs --values or --profiles");
      }
      SeparationProfile profile;
      profile.values = values;
      for (std::size_t i = 0; i < values.size(); ++i) profile.indices.push_back(i);
      fit_law(profile);  // surfaces domain and length errors as exit code 2
      Report r;
      r.config = {{"source", "fit"}, {"values", values}};
      r.profiles.push_back(analyze_profile(profile));
      print_fit_line(r.profiles.back());
      if (!g.out.empty()) emit_report(r, g.out);
    } else if (*analyze) {
      const Report r = analyze_dump(fs::path(analyze_path), boundaries, rel_tol);
      print_summary(r);
      if (!g.out.empty()) emit_report(r, g.out);
    } else if (*report) {
      std::ifstream in(report_path);
      nlohmann::json doc;
      try {
        doc = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(report_path + " is not valid JSON: " + e.what());
      }
      const Report r = report_from_json(doc);
      const fs::path out = g.out.empty() ? fs::path(report_path).parent_path() : fs::path(g.out);
      for (const auto& p : emit_report(r, out)) std::printf("%s\n", p.string().c_str());
    }
  } catch (const UserError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
