#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "nfl/losses.hpp"
#include "nfl/model.hpp"
#include "nfl/scenarios.hpp"
#include "nfl/training.hpp"

// Stepwise-freezing distillation procedure for learning one new task at a
// time from a model trained on the previous tasks, without stored samples.
//
// For task k+1 the "old heads" are heads 0..k-1. Their logits are always
// handled concatenated in task order, so H, H_tilde and the old-head outputs
// all have sum(c_1..c_k) columns.
namespace nfl {

struct TrainConfig {
  Hyperparams hp;
  OptimizerSettings optimizer;
  std::uint64_t seed = 0;
  /// Continue step 3 from the trained trunk/old heads instead of a fresh
  /// random initialization.
  bool step3_warm_start = false;
  /// Keep full-model snapshots after each step (tags r, u, f, f+) in the state.
  bool keep_step_snapshots = false;

  // NFL+ only.
  std::size_t ae_epochs = 20;
  std::size_t bias_epochs = 20;
  double holdout_fraction = 0.1;
  std::size_t code_dim = 0;  // 0: max(c_old, feature_dim / 8), capped below feature_dim

  void validate() const;
};

struct LogitRecord {
  Matrix H;
  std::optional<Matrix> H_tilde;
  std::optional<Matrix> H_prime;
};

struct NflState {
  Model model;
  /// Copy of every head as it stood when the latest task finished; these are
  /// the heads that produce the next task's soft targets.
  std::vector<ParameterSnapshot> frozen_heads;
  std::size_t task_count = 0;
  std::map<SnapshotTag, ParameterSnapshot> step_snapshots;

  std::vector<std::size_t> old_heads() const;
  std::size_t old_class_count() const;
};

/// Stage id used to seed the initialization of a new task's head.
inline constexpr std::uint64_t kNewHeadStage = 2;

/// Seed used by a training stage of a given task.
std::uint64_t stage_seed(const TrainConfig& cfg, std::size_t task, std::uint64_t stage);

/// Fits the single head and trunk with cross-entropy on the first task.
NflState train_first_task(Model model, const Dataset& data, const TrainConfig& cfg,
                          TrainHistory* history = nullptr);
NflState train_first_task(Model model, const TaskData& task, const TrainConfig& cfg);

/// Concatenated logits of every existing head on X; no mutation.
LogitRecord record_soft_targets(const NflState& state, const Matrix& inputs);

/// The newest head must already exist. Trains it alone with cross-entropy.
TrainHistory step2_train_new_head(NflState& state, const Dataset& data, const TrainConfig& cfg);

/// Re-initializes trunk and old heads (unless warm-started), then trains them
/// with KD toward H plus lambda * CE on the frozen new head.
TrainHistory step3_retrain_shared(NflState& state, const Dataset& data, const Matrix& H, const TrainConfig& cfg);

/// Old heads frozen; trunk and new head trained with KD toward H + omega * CE.
TrainHistory step4_finetune(NflState& state, const Dataset& data, const Matrix& H, const TrainConfig& cfg);

/// Logits of the live trunk composed with the stored head copies.
Matrix recompute_logits(const NflState& state, const Matrix& inputs);

/// Dual distillation: stored head copies on the live trunk match H, live old
/// heads match H_tilde, new head fits the labels. Stored copies stay fixed.
TrainHistory step5_joint_distill(NflState& state, const Dataset& data, const Matrix& H, const Matrix& H_tilde,
                                 const TrainConfig& cfg);

/// Stores copies of all current heads and bumps the task count.
void finish_task(NflState& state);

/// Steps 1-5 for one new task.
void learn_task(NflState& state, const TaskData& task, const TrainConfig& cfg);
void learn_task(NflState& state, const Dataset& data, std::size_t num_classes, const TrainConfig& cfg);

}  // namespace nfl
