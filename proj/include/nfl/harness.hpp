#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "nfl/metrics.hpp"
#include "nfl/nfl.hpp"
#include "nfl/scenarios.hpp"

namespace nfl {

enum class Method { nfl, nfl_plus, finetune, joint, lwf };
enum class DatasetKind { mnist_idx, cifar100_bin, synthetic_blobs };

std::string to_string(Method m);
std::string to_string(DatasetKind d);
std::string to_string(Mode m);

struct RunConfig {
  Method method = Method::nfl;
  DatasetKind dataset = DatasetKind::synthetic_blobs;
  /// Dataset root; falls back to $NFL_DATA_DIR when empty.
  std::filesystem::path data_dir;
  std::size_t num_tasks = 2;
  Mode mode = Mode::task_il;
  std::uint64_t seed = 0;
  std::vector<std::size_t> hidden{400, 400};
  TrainConfig train;
  /// One epoch per training stage.
  bool single_pass = false;
  std::filesystem::path output_dir;
  double ps_eps = kDefaultPsEps;
  std::size_t fwt_baseline_seeds = 5;
  bool fwt = true;
  /// Joint-training accuracy on the last task from an earlier `joint` run.
  std::optional<double> a_star;
  BlobSpec blobs;
  bool subtract_mean = false;
  bool save_params = true;
};

/// Strict parse: unknown keys, wrong types and out-of-range values raise ConfigError.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

/// Records which task's training data is read while each task is being
/// learned. Only joint training may read other tasks.
class ExemplarAudit {
 public:
  void begin_task(std::size_t task, bool joint = false);
  void on_access(std::size_t accessed);
  TrainAccessHook hook();

  std::size_t violations() const { return violations_; }
  std::size_t accesses() const { return accesses_; }

 private:
  std::size_t current_ = 0;
  bool joint_ = false;
  std::size_t violations_ = 0;
  std::size_t accesses_ = 0;
};

struct RunResult {
  AccuracyMatrix A{1};
  MetricsReport metrics;
  nlohmann::json meta;
  std::size_t exemplar_violations = 0;
};

/// Loads the configured dataset and splits it into tasks.
TaskStream build_stream(const RunConfig& cfg);

/// Random-init baseline accuracy b_k for every task.
std::vector<double> baseline_vector(const RunConfig& cfg, const TaskStream& stream);

/// Trains the configured method over all tasks and fills the accuracy matrix.
/// Writes artifacts when output_dir is set.
RunResult run_experiment(const RunConfig& cfg);

/// Writes acc_matrix.csv, metrics.json and run_meta.json into `dir`.
void write_artifacts(const std::filesystem::path& dir, const RunResult& result);

nlohmann::json metrics_to_json(const MetricsReport& m);

struct ComparisonRow {
  std::string run;
  std::string method;
  std::vector<std::optional<double>> values;  // comparison_columns() order
};

/// acc, fwt, bwt, af, intransigence, ps
const std::vector<std::string>& comparison_columns();
std::vector<ComparisonRow> load_comparison(const std::vector<std::filesystem::path>& run_dirs);
/// Aligned text table with deltas against the first run.
std::string format_comparison_text(const std::vector<ComparisonRow>& rows);
std::string format_comparison_csv(const std::vector<ComparisonRow>& rows);

/// Writes `run_dir/acc_curve.csv` with (tasks_seen, acc_so_far) rows and returns its path.
std::filesystem::path plot_data(const std::filesystem::path& run_dir);

/// Maps an exception to the CLI exit code: 2 config, 3 numeric, 4 I/O, 1 otherwise.
int exit_code_for(const std::exception& e);
/// Machine-readable error object for stderr.
std::string error_json(const std::exception& e);

/// Fixed-point rendering with 6 fractional digits.
std::string format_fixed6(double v);

}  // namespace nfl
