#include "nfl/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "nfl/baselines.hpp"
#include "nfl/nfl_plus.hpp"

namespace nfl {

using nlohmann::json;

namespace {

enum Stage : std::uint64_t {
  kModelInit = 11,
  kBaseline = 12,
  kProbe = 13,
};

template <typename E>
E parse_enum(const json& j, const char* key, std::initializer_list<std::pair<const char*, E>> names) {
  if (!j.is_string()) throw ConfigError(std::string(key) + " must be a string");
  const auto s = j.get<std::string>();
  for (const auto& [name, value] : names) {
    if (s == name) return value;
  }
  throw ConfigError(std::string("unknown ") + key + " '" + s + "'");
}

void reject_unknown(const json& j, const char* where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (!keys.contains(key)) throw ConfigError(std::string("unknown key '") + key + "' in " + where);
  }
}

double number(const json& j, const char* key) {
  if (!j.is_number()) throw ConfigError(std::string(key) + " must be a number");
  return j.get<double>();
}

std::size_t count(const json& j, const char* key) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<std::int64_t>() >= 0)) {
    throw ConfigError(std::string(key) + " must be a nonnegative integer");
  }
  return j.get<std::size_t>();
}

bool boolean(const json& j, const char* key) {
  if (!j.is_boolean()) throw ConfigError(std::string(key) + " must be a boolean");
  return j.get<bool>();
}

void read_if(const json& j, const char* key, auto&& assign) {
  if (j.contains(key)) assign(j.at(key), key);
}

double round6(double v) { return std::round(v * 1e6) / 1e6; }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void subtract_channel_means(LabeledSet& train, LabeledSet& test, std::size_t channels) {
  const Eigen::Index plane = train.inputs.cols() / static_cast<Eigen::Index>(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const auto cols = train.inputs.middleCols(static_cast<Eigen::Index>(c) * plane, plane);
    const double mean = cols.mean();
    train.inputs.middleCols(static_cast<Eigen::Index>(c) * plane, plane).array() -= mean;
    test.inputs.middleCols(static_cast<Eigen::Index>(c) * plane, plane).array() -= mean;
  }
}

std::filesystem::path data_root(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return cfg.data_dir;
  if (const char* env = std::getenv("NFL_DATA_DIR"); env != nullptr && *env != '\0') return env;
  throw ConfigError("dataset requires data_dir or NFL_DATA_DIR");
}

// Accuracy on task `next` of the current trunk with a freshly initialized head
// standing in for the not-yet-learned task.
double probe_next_task(const Model& model, const TaskStream& stream, std::size_t next, Mode mode, std::uint64_t seed) {
  Model probe = model;
  probe.add_head(stream.tasks[next].num_classes(), derive_seed(seed, kProbe, next));
  return task_accuracy(probe, stream, next, mode, next + 1);
}

std::size_t stored_parameter_count(const NflState& state) {
  std::size_t n = state.model.parameter_count();
  for (const auto& snap : state.frozen_heads) {
    for (const auto& b : snap.blocks) n += b.parameter_count();
  }
  return n;
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::nfl: return "nfl";
    case Method::nfl_plus: return "nfl_plus";
    case Method::finetune: return "finetune";
    case Method::joint: return "joint";
    case Method::lwf: return "lwf";
  }
  return "unknown";
}

std::string to_string(DatasetKind d) {
  switch (d) {
    case DatasetKind::mnist_idx: return "mnist_idx";
    case DatasetKind::cifar100_bin: return "cifar100_bin";
    case DatasetKind::synthetic_blobs: return "synthetic_blobs";
  }
  return "unknown";
}

std::string to_string(Mode m) { return m == Mode::task_il ? "task_il" : "class_il"; }

RunConfig parse_run_config(const json& j) {
  reject_unknown(j, "config",
                 {"method", "dataset", "data_dir", "num_tasks", "mode", "seed", "hidden", "epochs_per_step",
                  "hyperparams", "optimizer", "step3_warm_start", "single_pass", "ae_epochs", "bias_epochs",
                  "holdout_fraction", "code_dim", "output_dir", "ps_eps", "fwt", "fwt_baseline_seeds", "a_star",
                  "synthetic", "subtract_mean", "save_params"});
  if (!j.contains("seed")) throw ConfigError("seed is mandatory");
  if (!j.contains("method")) throw ConfigError("method is mandatory");
  if (!j.contains("dataset")) throw ConfigError("dataset is mandatory");
  RunConfig cfg;
  cfg.method = parse_enum<Method>(j.at("method"), "method",
                                  {{"nfl", Method::nfl},
                                   {"nfl_plus", Method::nfl_plus},
                                   {"finetune", Method::finetune},
                                   {"joint", Method::joint},
                                   {"lwf", Method::lwf}});
  cfg.dataset = parse_enum<DatasetKind>(j.at("dataset"), "dataset",
                                        {{"mnist_idx", DatasetKind::mnist_idx},
                                         {"cifar100_bin", DatasetKind::cifar100_bin},
                                         {"synthetic_blobs", DatasetKind::synthetic_blobs}});
  cfg.seed = count(j.at("seed"), "seed");
  read_if(j, "data_dir", [&](const json& v, const char* k) {
    if (!v.is_string()) throw ConfigError(std::string(k) + " must be a string");
    cfg.data_dir = v.get<std::string>();
  });
  read_if(j, "num_tasks", [&](const json& v, const char* k) { cfg.num_tasks = count(v, k); });
  read_if(j, "mode", [&](const json& v, const char* k) {
    cfg.mode = parse_enum<Mode>(v, k, {{"task_il", Mode::task_il}, {"class_il", Mode::class_il}});
  });
  read_if(j, "hidden", [&](const json& v, const char* k) {
    if (!v.is_array() || v.empty()) throw ConfigError(std::string(k) + " must be a non-empty array");
    cfg.hidden.clear();
    for (const auto& w : v) cfg.hidden.push_back(count(w, k));
  });
  read_if(j, "epochs_per_step", [&](const json& v, const char* k) { cfg.train.optimizer.epochs = count(v, k); });
  read_if(j, "hyperparams", [&](const json& v, const char*) {
    reject_unknown(v, "hyperparams",
                   {"lambda", "omega", "alpha", "beta", "p", "Omega", "eta", "phi", "rho", "tau"});
    auto& hp = cfg.train.hp;
    read_if(v, "lambda", [&](const json& x, const char* k) { hp.lambda_ = number(x, k); });
    read_if(v, "omega", [&](const json& x, const char* k) { hp.omega = number(x, k); });
    read_if(v, "alpha", [&](const json& x, const char* k) { hp.alpha = number(x, k); });
    read_if(v, "beta", [&](const json& x, const char* k) { hp.beta = number(x, k); });
    read_if(v, "p", [&](const json& x, const char* k) { hp.p = number(x, k); });
    read_if(v, "Omega", [&](const json& x, const char* k) { hp.Omega_ = number(x, k); });
    read_if(v, "eta", [&](const json& x, const char* k) { hp.eta = number(x, k); });
    read_if(v, "phi", [&](const json& x, const char* k) { hp.phi = number(x, k); });
    read_if(v, "rho", [&](const json& x, const char* k) { hp.rho = number(x, k); });
    read_if(v, "tau", [&](const json& x, const char* k) { hp.tau = number(x, k); });
  });
  read_if(j, "optimizer", [&](const json& v, const char*) {
    reject_unknown(v, "optimizer", {"lr", "momentum", "batch_size", "min_improvement", "patience"});
    auto& o = cfg.train.optimizer;
    read_if(v, "lr", [&](const json& x, const char* k) { o.lr = number(x, k); });
    read_if(v, "momentum", [&](const json& x, const char* k) { o.momentum = number(x, k); });
    read_if(v, "batch_size", [&](const json& x, const char* k) { o.batch_size = count(x, k); });
    read_if(v, "min_improvement", [&](const json& x, const char* k) { o.min_improvement = number(x, k); });
    read_if(v, "patience", [&](const json& x, const char* k) { o.patience = count(x, k); });
  });
  read_if(j, "step3_warm_start", [&](const json& v, const char* k) { cfg.train.step3_warm_start = boolean(v, k); });
  read_if(j, "single_pass", [&](const json& v, const char* k) { cfg.single_pass = boolean(v, k); });
  read_if(j, "ae_epochs", [&](const json& v, const char* k) { cfg.train.ae_epochs = count(v, k); });
  read_if(j, "bias_epochs", [&](const json& v, const char* k) { cfg.train.bias_epochs = count(v, k); });
  read_if(j, "holdout_fraction", [&](const json& v, const char* k) { cfg.train.holdout_fraction = number(v, k); });
  read_if(j, "code_dim", [&](const json& v, const char* k) { cfg.train.code_dim = count(v, k); });
  read_if(j, "output_dir", [&](const json& v, const char* k) {
    if (!v.is_string()) throw ConfigError(std::string(k) + " must be a string");
    cfg.output_dir = v.get<std::string>();
  });
  read_if(j, "ps_eps", [&](const json& v, const char* k) { cfg.ps_eps = number(v, k); });
  read_if(j, "fwt", [&](const json& v, const char* k) { cfg.fwt = boolean(v, k); });
  read_if(j, "fwt_baseline_seeds", [&](const json& v, const char* k) { cfg.fwt_baseline_seeds = count(v, k); });
  read_if(j, "a_star", [&](const json& v, const char* k) { cfg.a_star = number(v, k); });
  read_if(j, "synthetic", [&](const json& v, const char*) {
    reject_unknown(v, "synthetic", {"classes", "dim", "train_per_class", "test_per_class", "center_spread", "noise"});
    auto& b = cfg.blobs;
    read_if(v, "classes", [&](const json& x, const char* k) { b.classes = count(x, k); });
    read_if(v, "dim", [&](const json& x, const char* k) { b.dim = count(x, k); });
    read_if(v, "train_per_class", [&](const json& x, const char* k) { b.train_per_class = count(x, k); });
    read_if(v, "test_per_class", [&](const json& x, const char* k) { b.test_per_class = count(x, k); });
    read_if(v, "center_spread", [&](const json& x, const char* k) { b.center_spread = number(x, k); });
    read_if(v, "noise", [&](const json& x, const char* k) { b.noise = number(x, k); });
  });
  read_if(j, "subtract_mean", [&](const json& v, const char* k) { cfg.subtract_mean = boolean(v, k); });
  read_if(j, "save_params", [&](const json& v, const char* k) { cfg.save_params = boolean(v, k); });

  if (cfg.num_tasks < 1) throw ConfigError("num_tasks must be >= 1");
  if (!(cfg.ps_eps > 0.0)) throw ConfigError("ps_eps must be > 0");
  if (cfg.fwt && cfg.fwt_baseline_seeds < 1) throw ConfigError("fwt_baseline_seeds must be >= 1");
  if (cfg.a_star && (*cfg.a_star < 0.0 || *cfg.a_star > 1.0)) throw ConfigError("a_star must lie in [0, 1]");
  for (auto w : cfg.hidden) {
    if (w == 0) throw ConfigError("hidden widths must be positive");
  }
  try {
    cfg.train.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  cfg.train.seed = cfg.seed;
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& cfg) {
  const auto& hp = cfg.train.hp;
  const auto& o = cfg.train.optimizer;
  json j{
      {"method", to_string(cfg.method)},
      {"dataset", to_string(cfg.dataset)},
      {"data_dir", cfg.data_dir.string()},
      {"num_tasks", cfg.num_tasks},
      {"mode", to_string(cfg.mode)},
      {"seed", cfg.seed},
      {"hidden", cfg.hidden},
      {"epochs_per_step", o.epochs},
      {"hyperparams",
       {{"lambda", hp.lambda_}, {"omega", hp.omega}, {"alpha", hp.alpha}, {"beta", hp.beta}, {"p", hp.p},
        {"Omega", hp.Omega_}, {"eta", hp.eta}, {"phi", hp.phi}, {"rho", hp.rho}, {"tau", hp.tau}}},
      {"optimizer",
       {{"lr", o.lr}, {"momentum", o.momentum}, {"batch_size", o.batch_size}, {"min_improvement", o.min_improvement},
        {"patience", o.patience}}},
      {"step3_warm_start", cfg.train.step3_warm_start},
      {"single_pass", cfg.single_pass},
      {"ae_epochs", cfg.train.ae_epochs},
      {"bias_epochs", cfg.train.bias_epochs},
      {"holdout_fraction", cfg.train.holdout_fraction},
      {"code_dim", cfg.train.code_dim},
      {"output_dir", cfg.output_dir.string()},
      {"ps_eps", cfg.ps_eps},
      {"fwt", cfg.fwt},
      {"fwt_baseline_seeds", cfg.fwt_baseline_seeds},
      {"synthetic",
       {{"classes", cfg.blobs.classes}, {"dim", cfg.blobs.dim}, {"train_per_class", cfg.blobs.train_per_class},
        {"test_per_class", cfg.blobs.test_per_class}, {"center_spread", cfg.blobs.center_spread},
        {"noise", cfg.blobs.noise}}},
      {"subtract_mean", cfg.subtract_mean},
      {"save_params", cfg.save_params},
  };
  if (cfg.a_star) j["a_star"] = *cfg.a_star;
  return j;
}

void ExemplarAudit::begin_task(std::size_t task, bool joint) {
  current_ = task;
  joint_ = joint;
}

void ExemplarAudit::on_access(std::size_t accessed) {
  ++accesses_;
  const bool allowed = joint_ ? accessed <= current_ : accessed == current_;
  if (!allowed) ++violations_;
}

TrainAccessHook ExemplarAudit::hook() {
  return [this](std::size_t accessed) { on_access(accessed); };
}

TaskStream build_stream(const RunConfig& cfg) {
  LabeledSet train, test;
  std::size_t channels = 1;
  switch (cfg.dataset) {
    case DatasetKind::mnist_idx: {
      const auto root = data_root(cfg);
      train = load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte");
      test = load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte");
      break;
    }
    case DatasetKind::cifar100_bin: {
      const auto root = data_root(cfg);
      train = load_cifar_binary(root / "train.bin", CifarLabel::fine);
      test = load_cifar_binary(root / "test.bin", CifarLabel::fine);
      channels = 3;
      break;
    }
    case DatasetKind::synthetic_blobs: {
      std::tie(train, test) = make_blobs(cfg.blobs, derive_seed(cfg.seed, 10));
      break;
    }
  }
  train.num_classes = test.num_classes = std::max(train.num_classes, test.num_classes);
  if (cfg.subtract_mean) subtract_channel_means(train, test, channels);
  if (train.num_classes % cfg.num_tasks != 0) {
    throw ConfigError("class count " + std::to_string(train.num_classes) + " is not divisible by num_tasks " +
                      std::to_string(cfg.num_tasks));
  }
  return split_classes(train, test, cfg.num_tasks, cfg.seed, cfg.mode);
}

namespace {

ModelSpec trunk_spec(const RunConfig& cfg, const TaskStream& stream) {
  return ModelSpec::mlp(static_cast<std::size_t>(stream.tasks.front().test().inputs.cols()), cfg.hidden,
                        {stream.tasks.front().num_classes()});
}

}  // namespace

std::vector<double> baseline_vector(const RunConfig& cfg, const TaskStream& stream) {
  const ModelSpec spec = trunk_spec(cfg, stream);
  std::vector<double> b;
  for (std::size_t k = 0; k < stream.size(); ++k) {
    b.push_back(random_baseline_accuracy(spec, stream.tasks[k].test(), stream.tasks[k].num_classes(),
                                         cfg.fwt_baseline_seeds, derive_seed(cfg.seed, kBaseline, k)));
  }
  return b;
}

RunResult run_experiment(const RunConfig& input) {
  const auto started = std::chrono::steady_clock::now();
  RunConfig cfg = input;
  cfg.train.seed = cfg.seed;
  if (cfg.single_pass) {
    cfg.train.optimizer.epochs = 1;
    cfg.train.ae_epochs = 1;
    cfg.train.bias_epochs = 1;
  }
  cfg.train.keep_step_snapshots = cfg.save_params && !cfg.output_dir.empty();
  TaskStream stream = build_stream(cfg);
  ExemplarAudit audit;
  stream.set_train_access_hook(audit.hook());
  const std::size_t T = stream.size();
  const ModelSpec spec = trunk_spec(cfg, stream);
  const std::uint64_t model_seed = derive_seed(cfg.seed, kModelInit);

  RunResult result;
  AccuracyMatrix A(T);
  std::optional<double> a_star = cfg.a_star;
  std::size_t parameter_count = 0;
  std::size_t stored_parameters = 0;
  const std::filesystem::path params_dir =
      cfg.output_dir.empty() || !cfg.save_params ? std::filesystem::path() : cfg.output_dir / "params";

  auto record_row = [&](const Model& model, std::size_t k) {
    A.set_row(k, evaluate(model, stream, k + 1, cfg.mode));
    // The superdiagonal feeds PS as well as FWT, so it is always probed.
    if (k + 1 < T) A.set(k, k + 1, probe_next_task(model, stream, k + 1, cfg.mode, cfg.seed));
  };
  auto save_task = [&](std::size_t k, const NflState& state) {
    if (params_dir.empty()) return;
    const auto dir = params_dir / ("task" + std::to_string(k + 1));
    for (const auto& [tag, snap] : state.step_snapshots) save_snapshot(dir, snap);
    save_snapshot(dir, state.model.snapshot(SnapshotTag::trained));
  };

  if (cfg.method == Method::joint) {
    for (std::size_t k = 0; k < T; ++k) {
      audit.begin_task(k, true);
      auto joint = joint_train(Model(spec, model_seed), stream, k + 1, cfg.mode, cfg.train);
      record_row(joint.model, k);
      a_star = joint.a_star;
      parameter_count = stored_parameters = joint.model.parameter_count();
      if (!params_dir.empty()) {
        save_snapshot(params_dir / ("task" + std::to_string(k + 1)), joint.model.snapshot(SnapshotTag::trained));
      }
    }
  } else if (cfg.method == Method::nfl_plus) {
    std::optional<NflPlusState> state;
    for (std::size_t k = 0; k < T; ++k) {
      audit.begin_task(k);
      if (k == 0) {
        state = train_first_task_plus(Model(spec, model_seed), stream.tasks[0], cfg.train);
      } else {
        learn_task_plus(*state, stream.tasks[k], cfg.train);
      }
      record_row(state->nfl.model, k);
      save_task(k, state->nfl);
      if (!params_dir.empty()) save_nfl_plus_extras(params_dir / ("task" + std::to_string(k + 1)), *state);
      state->nfl.step_snapshots.clear();
    }
    parameter_count = state->nfl.model.parameter_count();
    stored_parameters = stored_parameter_count(state->nfl) + static_cast<std::size_t>(state->ae->enc.size());
  } else {
    std::optional<NflState> state;
    for (std::size_t k = 0; k < T; ++k) {
      audit.begin_task(k);
      if (k == 0) {
        state = train_first_task(Model(spec, model_seed), stream.tasks[0], cfg.train);
      } else if (cfg.method == Method::nfl) {
        learn_task(*state, stream.tasks[k], cfg.train);
      } else if (cfg.method == Method::finetune) {
        finetune_learn_task(*state, stream.tasks[k], cfg.train);
      } else {
        lwf_learn_task(*state, stream.tasks[k], cfg.train);
      }
      record_row(state->model, k);
      save_task(k, *state);
      state->step_snapshots.clear();
    }
    parameter_count = state->model.parameter_count();
    stored_parameters = cfg.method == Method::nfl ? stored_parameter_count(*state) : parameter_count;
  }

  // Metrics are computed from the persisted (6-digit) matrix so that
  // metrics.json is reproducible from acc_matrix.csv.
  result.A = AccuracyMatrix::from_csv(A.to_csv());
  const std::vector<double> b = cfg.fwt ? baseline_vector(cfg, stream) : std::vector<double>{};
  result.metrics = compute_metrics(result.A, b, a_star, cfg.ps_eps);
  result.exemplar_violations = audit.violations();
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  const double bytes = memory_footprint(static_cast<double>(stored_parameters), 0.0, 0.0);
  result.meta = json{
      {"config", to_json(cfg)},
      {"method", to_string(cfg.method)},
      {"wall_time_s", seconds},
      {"parameter_count", parameter_count},
      {"stored_parameter_count", stored_parameters},
      {"memory_bytes", bytes},
      {"memory_mb", to_megabytes(bytes)},
      {"exemplar_count", 0},
      {"train_data_accesses", audit.accesses()},
      {"exemplar_violations", audit.violations()},
  };
  if (a_star) result.meta["a_star"] = round6(*a_star);
  if (!cfg.output_dir.empty()) write_artifacts(cfg.output_dir, result);
  return result;
}

json metrics_to_json(const MetricsReport& m) {
  json j;
  j["acc"] = round6(m.acc);
  j["fwt"] = m.fwt ? json(round6(*m.fwt)) : json(nullptr);
  j["bwt"] = round6(m.bwt);
  j["af"] = round6(m.af);
  j["intransigence"] = m.intransigence ? json(round6(*m.intransigence)) : json(nullptr);
  j["ps"] = m.ps.value ? json(round6(*m.ps.value)) : json("no_forgetting");
  json b = json::array();
  for (double v : m.b) b.push_back(round6(v));
  j["b"] = b;
  j["a_star"] = m.a_star ? json(round6(*m.a_star)) : json(nullptr);
  return j;
}

void write_artifacts(const std::filesystem::path& dir, const RunResult& result) {
  std::filesystem::create_directories(dir);
  write_text(dir / "acc_matrix.csv", result.A.to_csv());
  json metrics = metrics_to_json(result.metrics);
  metrics["method"] = result.meta.value("method", "");
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  write_text(dir / "run_meta.json", result.meta.dump(2) + "\n");
}

const std::vector<std::string>& comparison_columns() {
  static const std::vector<std::string> cols{"acc", "fwt", "bwt", "af", "intransigence", "ps"};
  return cols;
}

std::vector<ComparisonRow> load_comparison(const std::vector<std::filesystem::path>& run_dirs) {
  if (run_dirs.size() < 2) throw ConfigError("compare needs at least two run directories");
  std::vector<ComparisonRow> rows;
  for (const auto& dir : run_dirs) {
    const auto path = dir / "metrics.json";
    if (!std::filesystem::exists(path)) throw IoError("missing " + path.string());
    json m;
    try {
      m = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
      throw IoError("malformed " + path.string() + ": " + e.what());
    }
    ComparisonRow row{dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string(),
                      m.value("method", std::string()),
                      {}};
    for (const auto& col : comparison_columns()) {
      const auto it = m.find(col);
      row.values.push_back(it != m.end() && it->is_number() ? std::optional<double>(it->get<double>()) : std::nullopt);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_fixed6(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 6);
  return std::string(buf, res.ptr);
}

namespace {

std::string cell(const std::optional<double>& v) { return v ? format_fixed6(*v) : "NA"; }

std::optional<double> delta(const std::optional<double>& a, const std::optional<double>& base) {
  if (!a || !base) return std::nullopt;
  return *a - *base;
}

}  // namespace

std::string format_comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::string out = "run,method";
  for (const auto& c : comparison_columns()) out += "," + c;
  for (const auto& c : comparison_columns()) out += ",d_" + c;
  out += '\n';
  for (const auto& r : rows) {
    out += r.run + "," + r.method;
    for (const auto& v : r.values) out += "," + cell(v);
    for (std::size_t i = 0; i < r.values.size(); ++i) out += "," + cell(delta(r.values[i], rows.front().values[i]));
    out += '\n';
  }
  return out;
}

std::string format_comparison_text(const std::vector<ComparisonRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(24) << "run" << std::setw(10) << "method";
  for (const auto& c : comparison_columns()) out << std::right << std::setw(14) << c;
  out << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(24) << r.run << std::setw(10) << r.method;
    for (const auto& v : r.values) out << std::right << std::setw(14) << cell(v);
    out << '\n';
  }
  out << "\ndelta vs " << rows.front().run << '\n';
  for (const auto& r : rows) {
    out << std::left << std::setw(24) << r.run << std::setw(10) << r.method;
    for (std::size_t i = 0; i < r.values.size(); ++i) {
      out << std::right << std::setw(14) << cell(delta(r.values[i], rows.front().values[i]));
    }
    out << '\n';
  }
  return out.str();
}

std::filesystem::path plot_data(const std::filesystem::path& run_dir) {
  const auto csv = run_dir / "acc_matrix.csv";
  if (!std::filesystem::exists(csv)) throw IoError("missing " + csv.string());
  const auto A = AccuracyMatrix::from_csv(read_text(csv));
  std::string out = "tasks_seen,acc_so_far\n";
  for (std::size_t k = 0; k < A.size(); ++k) {
    double sum = 0.0;
    for (std::size_t j = 0; j <= k; ++j) sum += A(k, j);
    out += std::to_string(k + 1) + "," + format_fixed6(sum / static_cast<double>(k + 1)) + "\n";
  }
  const auto path = run_dir / "acc_curve.csv";
  write_text(path, out);
  return path;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr || dynamic_cast<const InvalidArgument*>(&e) != nullptr ||
      dynamic_cast<const json::exception*>(&e) != nullptr) {
    return 2;
  }
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const IoError*>(&e) != nullptr || dynamic_cast<const std::filesystem::filesystem_error*>(&e) != nullptr) {
    return 4;
  }
  return 1;
}

std::string error_json(const std::exception& e) {
  const int code = exit_code_for(e);
  const char* kind = code == 2 ? "config" : code == 3 ? "numeric" : code == 4 ? "io" : "internal";
  return json{{"error", kind}, {"exit_code", code}, {"message", e.what()}}.dump();
}

}  // namespace nfl
