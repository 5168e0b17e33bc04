// Command-line front end for the experiment harness.
//
//   nfl run --config a.json [--config b.json ...] [--jobs N]
//   nfl compare <dir> <dir> [...] [--csv out.csv]
//   nfl plot-data <dir>
//   nfl baseline-bk --config a.json

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "nfl/harness.hpp"

namespace {

int report(const std::exception& e) {
  std::cerr << nfl::error_json(e) << '\n';
  return nfl::exit_code_for(e);
}

int run_one(const std::string& path) {
  try {
    const auto cfg = nfl::load_run_config(path);
    const auto result = nfl::run_experiment(cfg);
    std::cout << nlohmann::json{{"config", path},
                                {"output_dir", cfg.output_dir.string()},
                                {"metrics", nfl::metrics_to_json(result.metrics)}}
                     .dump()
              << '\n';
    return 0;
  } catch (const std::exception& e) {
    return report(e);
  }
}

// Runs each config in its own child process, at most `jobs` at a time.
// Returns the first nonzero child exit code, or 0.
int run_batch(const std::vector<std::string>& configs, std::size_t jobs) {
  std::set<std::filesystem::path> outputs;
  for (const auto& c : configs) {
    try {
      const auto out = nfl::load_run_config(c).output_dir;
      if (!out.empty() && !outputs.insert(std::filesystem::weakly_canonical(out)).second) {
        throw nfl::ConfigError("output_dir " + out.string() + " is shared by several configs");
      }
    } catch (const std::exception& e) {
      return report(e);
    }
  }
  std::cout.flush();
  int status_out = 0;
  std::size_t running = 0;
  auto reap = [&] {
    int status = 0;
    if (::wait(&status) > 0) {
      --running;
      const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 1;
      if (code != 0 && status_out == 0) status_out = code;
    }
  };
  for (const auto& c : configs) {
    while (running >= jobs) reap();
    const pid_t pid = ::fork();
    if (pid < 0) {
      std::cerr << nlohmann::json{{"error", "internal"}, {"message", "fork failed"}}.dump() << '\n';
      return 1;
    }
    if (pid == 0) {
      const int code = run_one(c);
      std::cout.flush();
      std::_Exit(code);
    }
    ++running;
  }
  while (running > 0) reap();
  return status_out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exemplar-free continual learning experiments"};
  app.require_subcommand(1);

  std::vector<std::string> run_configs;
  std::size_t jobs = 1;
  auto* run = app.add_subcommand("run", "Train a method over a task stream and write artifacts");
  run->add_option("--config", run_configs, "JSON run config (repeatable)")->required();
  run->add_option("--jobs", jobs, "Parallel processes for batch mode")->check(CLI::PositiveNumber);

  std::vector<std::string> compare_dirs;
  std::string compare_csv;
  auto* compare = app.add_subcommand("compare", "Side-by-side metrics of several runs");
  compare->add_option("dirs", compare_dirs, "Run directories")->required()->expected(2, -1);
  compare->add_option("--csv", compare_csv, "Also write the table as CSV");

  std::string plot_dir;
  auto* plot = app.add_subcommand("plot-data", "Write the ACC-so-far curve of a run");
  plot->add_option("dir", plot_dir, "Run directory")->required();

  std::string bk_config;
  auto* bk = app.add_subcommand("baseline-bk", "Print the random-init baseline accuracy per task");
  bk->add_option("--config", bk_config, "JSON run config")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run) {
      if (run_configs.size() == 1 && jobs == 1) return run_one(run_configs.front());
      return run_batch(run_configs, jobs);
    }
    if (*compare) {
      const std::vector<std::filesystem::path> dirs(compare_dirs.begin(), compare_dirs.end());
      const auto rows = nfl::load_comparison(dirs);
      std::cout << nfl::format_comparison_text(rows);
      if (!compare_csv.empty()) {
        std::ofstream out(compare_csv, std::ios::binary | std::ios::trunc);
        if (!out) throw nfl::IoError("cannot write " + compare_csv);
        out << nfl::format_comparison_csv(rows);
      }
      return 0;
    }
    if (*plot) {
      std::cout << nfl::plot_data(plot_dir).string() << '\n';
      return 0;
    }
    if (*bk) {
      const auto cfg = nfl::load_run_config(bk_config);
      const auto stream = nfl::build_stream(cfg);
      nlohmann::json b = nlohmann::json::array();
      for (double v : nfl::baseline_vector(cfg, stream)) b.push_back(std::round(v * 1e6) / 1e6);
      std::cout << nlohmann::json{{"b", b}}.dump() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    return report(e);
  }
  return 0;
}
