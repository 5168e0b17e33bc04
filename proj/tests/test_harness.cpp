#include <sys/wait.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "nfl/harness.hpp"

using namespace nfl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("nfl_harness_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json blob_config(const std::string& method, const fs::path& out) {
  return json{{"method", method},
              {"dataset", "synthetic_blobs"},
              {"num_tasks", 2},
              {"seed", 3},
              {"hidden", {32}},
              {"epochs_per_step", 5},
              {"ae_epochs", 5},
              {"bias_epochs", 5},
              {"fwt_baseline_seeds", 2},
              {"output_dir", out.string()}};
}

fs::path write_config(const fs::path& dir, const json& j) {
  const auto path = dir / "config.json";
  std::ofstream(path) << j.dump(2);
  return path;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(NFL_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config parsing is strict") {
  const auto ok = blob_config("nfl", "");
  CHECK_NOTHROW(parse_run_config(ok));

  auto unknown = ok;
  unknown["learning_rate"] = 0.1;
  CHECK_THROWS_AS(parse_run_config(unknown), ConfigError);

  for (const char* key : {"seed", "method", "dataset"}) {
    auto missing = ok;
    missing.erase(key);
    CHECK_THROWS_AS(parse_run_config(missing), ConfigError);
  }

  auto bad_enum = ok;
  bad_enum["method"] = "ewc";
  CHECK_THROWS_AS(parse_run_config(bad_enum), ConfigError);

  auto bad_type = ok;
  bad_type["num_tasks"] = "two";
  CHECK_THROWS_AS(parse_run_config(bad_type), ConfigError);

  auto bad_nested = ok;
  bad_nested["hyperparams"] = json{{"temperature", 2.0}};
  CHECK_THROWS_AS(parse_run_config(bad_nested), ConfigError);
}

TEST_CASE("config values reach the run settings and round-trip") {
  auto j = blob_config("nfl_plus", "");
  j["mode"] = "class_il";
  j["hyperparams"] = json{{"p", 3.0}, {"tau", 0.2}};
  j["optimizer"] = json{{"lr", 0.05}, {"batch_size", 32}};
  j["step3_warm_start"] = true;
  const auto cfg = parse_run_config(j);
  CHECK(cfg.method == Method::nfl_plus);
  CHECK(cfg.mode == Mode::class_il);
  CHECK(cfg.seed == 3);
  CHECK(cfg.hidden == std::vector<std::size_t>{32});
  CHECK(cfg.train.optimizer.epochs == 5);
  CHECK(cfg.train.optimizer.lr == 0.05);
  CHECK(cfg.train.optimizer.batch_size == 32);
  CHECK(cfg.train.hp.p == 3.0);
  CHECK(cfg.train.hp.tau == 0.2);
  CHECK(cfg.train.step3_warm_start);
  const auto again = parse_run_config(to_json(cfg));
  CHECK(to_json(again) == to_json(cfg));
}

TEST_CASE("exception kinds map to exit codes") {
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(NumericError("x")) == 3);
  CHECK(exit_code_for(IoError("x")) == 4);
  const auto err = json::parse(error_json(IoError("missing file")));
  CHECK(err["exit_code"] == 4);
  CHECK(err["message"] == "missing file");
  CHECK(format_fixed6(0.1234567) == "0.123457");
}

TEST_CASE("exemplar audit flags reads of other tasks' training data") {
  ExemplarAudit audit;
  audit.begin_task(1);
  audit.on_access(1);
  CHECK(audit.violations() == 0);
  audit.on_access(0);
  CHECK(audit.violations() == 1);
  audit.begin_task(2, true);
  audit.on_access(0);
  audit.on_access(2);
  CHECK(audit.violations() == 1);
  audit.on_access(3);
  CHECK(audit.violations() == 2);
  CHECK(audit.accesses() == 5);

  // The hook fires through the stream.
  auto cfg = parse_run_config(blob_config("finetune", ""));
  auto stream = build_stream(cfg);
  ExemplarAudit via_stream;
  stream.set_train_access_hook(via_stream.hook());
  via_stream.begin_task(1);
  (void)stream.tasks[0].train();
  CHECK(via_stream.violations() == 1);
}

TEST_CASE("a short blob run writes its artifacts and is reproducible") {
  const auto dir = scratch("repro");
  const auto started = std::chrono::steady_clock::now();
  auto cfg = parse_run_config(blob_config("finetune", dir / "a"));
  const auto first = run_experiment(cfg);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  CHECK(seconds < 60.0);
  for (const char* f : {"acc_matrix.csv", "metrics.json", "run_meta.json"}) CHECK(fs::exists(dir / "a" / f));
  CHECK(fs::exists(dir / "a" / "params" / "task1"));
  CHECK(first.exemplar_violations == 0);

  cfg.output_dir = dir / "b";
  run_experiment(cfg);
  CHECK(slurp(dir / "a" / "acc_matrix.csv") == slurp(dir / "b" / "acc_matrix.csv"));
  CHECK(slurp(dir / "a" / "metrics.json") == slurp(dir / "b" / "metrics.json"));

  // metrics.json is a function of acc_matrix.csv alone.
  const auto A = AccuracyMatrix::from_csv(slurp(dir / "a" / "acc_matrix.csv"));
  auto metrics = json::parse(slurp(dir / "a" / "metrics.json"));
  CHECK(metrics["method"] == "finetune");
  metrics.erase("method");
  const auto b = metrics["b"].get<std::vector<double>>();
  CHECK(metrics_to_json(compute_metrics(A, b, std::nullopt, cfg.ps_eps)) == metrics);

  const auto meta = json::parse(slurp(dir / "a" / "run_meta.json"));
  CHECK(meta["exemplar_violations"] == 0);
  CHECK(meta["method"] == "finetune");
  CHECK(meta["config"]["seed"] == 3);
}

TEST_CASE("every method runs without touching other tasks' data") {
  for (const char* method : {"nfl", "nfl_plus", "finetune", "joint", "lwf"}) {
    CAPTURE(method);
    auto cfg = parse_run_config(blob_config(method, ""));
    cfg.fwt = false;
    const auto r = run_experiment(cfg);
    CHECK(r.exemplar_violations == 0);
    CHECK(r.A.size() == 2);
  }
}

TEST_CASE("joint runs report the last task's joint accuracy") {
  const auto dir = scratch("joint");
  auto cfg = parse_run_config(blob_config("joint", dir));
  const auto r = run_experiment(cfg);
  REQUIRE(r.metrics.a_star.has_value());
  const auto metrics = json::parse(slurp(dir / "metrics.json"));
  CHECK(metrics["a_star"].get<double>() == doctest::Approx(*r.metrics.a_star).epsilon(1e-6));
  REQUIRE(metrics["intransigence"].is_number());
  CHECK(metrics["intransigence"].get<double>() == doctest::Approx(*r.metrics.a_star - r.A(1, 1)).epsilon(1e-6));
}

TEST_CASE("compare and plot-data") {
  const auto dir = scratch("compare");
  run_experiment(parse_run_config(blob_config("finetune", dir / "ft")));
  run_experiment(parse_run_config(blob_config("lwf", dir / "lwf")));

  const auto same = load_comparison({dir / "ft", dir / "ft"});
  REQUIRE(same.size() == 2);
  CHECK(same[0].values == same[1].values);
  const std::string text = format_comparison_text(same);
  CHECK(text.find("finetune") != std::string::npos);

  const auto rows = load_comparison({dir / "ft", dir / "lwf"});
  CHECK(rows[1].method == "lwf");
  const std::string csv = format_comparison_csv(rows);
  std::string header = "run,method";
  for (const auto& c : comparison_columns()) header += "," + c;
  CHECK(csv.rfind(header, 0) == 0);
  CHECK(comparison_columns() == std::vector<std::string>{"acc", "fwt", "bwt", "af", "intransigence", "ps"});
  CHECK_THROWS_AS(load_comparison({dir / "ft", dir / "missing"}), IoError);

  const auto curve = slurp(plot_data(dir / "ft"));
  const auto A = AccuracyMatrix::from_csv(slurp(dir / "ft" / "acc_matrix.csv"));
  const std::string expect = "tasks_seen,acc_so_far\n1," + format_fixed6(A(0, 0)) + "\n2," +
                             format_fixed6((A(1, 0) + A(1, 1)) / 2.0) + "\n";
  CHECK(curve == expect);
}

TEST_CASE("command-line exit codes") {
  const auto dir = scratch("cli");
  const auto good = write_config(dir, blob_config("finetune", dir / "run"));
  CHECK(run_cli("run --config " + good.string()) == 0);
  CHECK(fs::exists(dir / "run" / "metrics.json"));
  CHECK(run_cli("plot-data " + (dir / "run").string()) == 0);
  CHECK(run_cli("compare " + (dir / "run").string() + " " + (dir / "run").string() + " --csv " + (dir / "cmp.csv").string()) == 0);
  CHECK(slurp(dir / "cmp.csv").rfind("run,method", 0) == 0);

  auto unknown = blob_config("finetune", dir / "bad");
  unknown["colour"] = "blue";
  const auto bad_dir = dir / "unknown";
  fs::create_directories(bad_dir);
  CHECK(run_cli("run --config " + write_config(bad_dir, unknown).string()) == 2);

  auto missing_data = blob_config("finetune", dir / "io");
  missing_data["dataset"] = "mnist_idx";
  missing_data["data_dir"] = (dir / "nowhere").string();
  const auto io_dir = dir / "io_cfg";
  fs::create_directories(io_dir);
  CHECK(run_cli("run --config " + write_config(io_dir, missing_data).string()) == 4);
  CHECK(run_cli("run --config " + (dir / "absent.json").string()) == 4);
  CHECK(run_cli("frobnicate") == 2);
}

TEST_CASE("batch mode runs several configs in parallel") {
  const auto dir = scratch("batch");
  std::string args = "run --jobs 2";
  for (const char* method : {"finetune", "lwf"}) {
    const auto sub = dir / method;
    fs::create_directories(sub);
    args += " --config " + write_config(sub, blob_config(method, sub / "out")).string();
  }
  CHECK(run_cli(args) == 0);
  CHECK(fs::exists(dir / "finetune" / "out" / "acc_matrix.csv"));
  CHECK(fs::exists(dir / "lwf" / "out" / "acc_matrix.csv"));

  // Two configs writing into the same directory are rejected up front.
  const auto clash = dir / "clash";
  fs::create_directories(clash / "x");
  fs::create_directories(clash / "y");
  const auto x = write_config(clash / "x", blob_config("finetune", clash / "same"));
  const auto y = write_config(clash / "y", blob_config("lwf", clash / "same"));
  CHECK(run_cli("run --jobs 2 --config " + x.string() + " --config " + y.string()) == 2);
}
