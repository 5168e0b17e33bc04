#include "nfl/nfl.hpp"

#include <numeric>

namespace nfl {

namespace {

enum Stage : std::uint64_t {
  kFirstTask = 1,
  kStep2 = 3,
  kStep3Init = 4,
  kStep3 = 5,
  kStep4 = 6,
  kStep5 = 7,
};

void keep(NflState& state, const TrainConfig& cfg, SnapshotTag tag) {
  if (cfg.keep_step_snapshots) state.step_snapshots[tag] = state.model.snapshot(tag);
}

void check_data(const NflState& state, const Dataset& data) {
  require(data.size() > 0, "empty training set");
  require(static_cast<std::size_t>(data.inputs.rows()) == data.size(), "input/label count mismatch");
  require(data.inputs.cols() == static_cast<Eigen::Index>(state.model.spec().input_dim), "input width mismatch");
}

std::size_t new_head(const NflState& state) {
  require(state.model.head_count() == state.task_count + 1, "new head for the incoming task is missing");
  return state.task_count;
}

HeadGroup live_old_heads(const NflState& state, bool with_grads) {
  HeadGroup g;
  for (auto h : state.old_heads()) {
    g.add(state.model.head(h), with_grads ? std::optional<std::size_t>(Model::head_block(h)) : std::nullopt);
  }
  return g;
}

HeadGroup stored_old_heads(const NflState& state) {
  require(state.frozen_heads.size() == state.task_count, "missing stored head snapshot");
  HeadGroup g;
  for (const auto& snap : state.frozen_heads) g.add(snap.blocks.at(0), std::nullopt);
  return g;
}

void check_targets(const NflState& state, const Dataset& data, const Matrix& H) {
  require(H.rows() == static_cast<Eigen::Index>(data.size()) &&
              H.cols() == static_cast<Eigen::Index>(state.old_class_count()),
          "soft targets do not match the old heads");
}

// Shared body of steps 3 and 4: KD toward H on the old heads plus weighted CE
// on the new head. Which blocks move is decided by the caller's mask.
TrainHistory distill_with_ce(NflState& state, const Dataset& data, const Matrix& H, double ce_weight,
                             std::uint64_t seed, const TrainConfig& cfg) {
  const auto& model = state.model;
  const std::size_t nh = new_head(state);
  const bool old_trainable = !state.old_heads().empty() && model.trainable(Model::head_block(0));
  const HeadGroup old_group = live_old_heads(state, old_trainable);
  const bool new_trainable = model.trainable(Model::head_block(nh));
  Hyperparams hp = cfg.hp;
  hp.lambda_ = ce_weight;
  return train_epochs(state.model, data.size(), cfg.optimizer, seed,
                      [&](std::span<const std::size_t> rows, Gradients& grads) {
                        const Matrix x = gather_rows(data.inputs, rows);
                        const Labels y = gather_labels(data.labels, rows);
                        const Matrix target = gather_rows(H, rows);
                        TrunkCache cache;
                        const Matrix f = model.features(x, cache);
                        const Matrix old_logits = old_group.forward(f);
                        const Matrix new_logits = head_logits(model.head(nh), f);
                        const auto loss = loss_L3_grad(target, old_logits, y, new_logits, hp);
                        Matrix df = old_group.backward(f, loss.d_old, grads);
                        df.noalias() += head_backward(model.head(nh), f, loss.d_new,
                                                      new_trainable ? &grads[Model::head_block(nh)] : nullptr);
                        if (model.trainable(Model::trunk_block)) model.trunk_backward(cache, df, grads);
                        return loss.value;
                      });
}

}  // namespace

void TrainConfig::validate() const {
  hp.validate();
  optimizer.validate();
  require(holdout_fraction > 0.0 && holdout_fraction < 1.0, "holdout_fraction must lie in (0, 1)");
}

std::vector<std::size_t> NflState::old_heads() const {
  std::vector<std::size_t> heads(task_count);
  std::iota(heads.begin(), heads.end(), 0);
  return heads;
}

std::size_t NflState::old_class_count() const {
  std::size_t n = 0;
  for (std::size_t h = 0; h < task_count; ++h) n += model.head_dim(h);
  return n;
}

std::uint64_t stage_seed(const TrainConfig& cfg, std::size_t task, std::uint64_t stage) {
  return derive_seed(cfg.seed, task, stage);
}

NflState train_first_task(Model model, const Dataset& data, const TrainConfig& cfg, TrainHistory* history) {
  require(model.head_count() == 1, "first task expects a model with exactly one head");
  NflState state{std::move(model), {}, 0, {}};
  check_data(state, data);
  state.model.train_only({Model::trunk_block, Model::head_block(0)});
  const auto& m = state.model;
  auto h = train_epochs(state.model, data.size(), cfg.optimizer, stage_seed(cfg, 0, kFirstTask),
                        [&](std::span<const std::size_t> rows, Gradients& grads) {
                          const Matrix x = gather_rows(data.inputs, rows);
                          const Labels y = gather_labels(data.labels, rows);
                          TrunkCache cache;
                          const Matrix f = m.features(x, cache);
                          const auto ce = cross_entropy_grad(head_logits(m.head(0), f), y);
                          const Matrix df = head_backward(m.head(0), f, ce.grad, &grads[Model::head_block(0)]);
                          m.trunk_backward(cache, df, grads);
                          return ce.value;
                        });
  if (history != nullptr) *history = std::move(h);
  keep(state, cfg, SnapshotTag::trained);
  finish_task(state);
  return state;
}

NflState train_first_task(Model model, const TaskData& task, const TrainConfig& cfg) {
  return train_first_task(std::move(model), task.train(), cfg);
}

LogitRecord record_soft_targets(const NflState& state, const Matrix& inputs) {
  require(inputs.rows() > 0, "record_soft_targets: empty input");
  return {state.model.forward_concat(inputs, state.old_heads()), std::nullopt, std::nullopt};
}

TrainHistory step2_train_new_head(NflState& state, const Dataset& data, const TrainConfig& cfg) {
  check_data(state, data);
  const std::size_t nh = new_head(state);
  state.model.train_only({Model::head_block(nh)});
  // The trunk is frozen, so features are computed once.
  const Matrix features = state.model.features(data.inputs);
  const auto& m = state.model;
  return train_epochs(state.model, data.size(), cfg.optimizer, stage_seed(cfg, nh, kStep2),
                      [&](std::span<const std::size_t> rows, Gradients& grads) {
                        const Matrix f = gather_rows(features, rows);
                        const auto ce = cross_entropy_grad(head_logits(m.head(nh), f), gather_labels(data.labels, rows));
                        head_backward(m.head(nh), f, ce.grad, &grads[Model::head_block(nh)]);
                        return ce.value;
                      });
}

TrainHistory step3_retrain_shared(NflState& state, const Dataset& data, const Matrix& H, const TrainConfig& cfg) {
  check_data(state, data);
  check_targets(state, data, H);
  const std::size_t nh = new_head(state);
  if (!cfg.step3_warm_start) {
    state.model.reinit_trunk(stage_seed(cfg, nh, kStep3Init));
    for (auto h : state.old_heads()) state.model.reinit_head(h, derive_seed(stage_seed(cfg, nh, kStep3Init), h + 1));
  }
  keep(state, cfg, SnapshotTag::r);
  std::vector<std::size_t> blocks{Model::trunk_block};
  for (auto h : state.old_heads()) blocks.push_back(Model::head_block(h));
  state.model.train_only(blocks);
  auto history = distill_with_ce(state, data, H, cfg.hp.lambda_, stage_seed(cfg, nh, kStep3), cfg);
  keep(state, cfg, SnapshotTag::u);
  return history;
}

TrainHistory step4_finetune(NflState& state, const Dataset& data, const Matrix& H, const TrainConfig& cfg) {
  check_data(state, data);
  check_targets(state, data, H);
  const std::size_t nh = new_head(state);
  state.model.train_only({Model::trunk_block, Model::head_block(nh)});
  auto history = distill_with_ce(state, data, H, cfg.hp.omega, stage_seed(cfg, nh, kStep4), cfg);
  keep(state, cfg, SnapshotTag::f);
  return history;
}

Matrix recompute_logits(const NflState& state, const Matrix& inputs) {
  return stored_old_heads(state).forward(state.model.features(inputs));
}

TrainHistory step5_joint_distill(NflState& state, const Dataset& data, const Matrix& H, const Matrix& H_tilde,
                                 const TrainConfig& cfg) {
  check_data(state, data);
  check_targets(state, data, H);
  check_targets(state, data, H_tilde);
  const std::size_t nh = new_head(state);
  std::vector<std::size_t> blocks{Model::trunk_block, Model::head_block(nh)};
  for (auto h : state.old_heads()) blocks.push_back(Model::head_block(h));
  state.model.train_only(blocks);
  const HeadGroup stored = stored_old_heads(state);
  const HeadGroup live = live_old_heads(state, true);
  const auto& m = state.model;
  auto history = train_epochs(
      state.model, data.size(), cfg.optimizer, stage_seed(cfg, nh, kStep5),
      [&](std::span<const std::size_t> rows, Gradients& grads) {
        const Matrix x = gather_rows(data.inputs, rows);
        const Labels y = gather_labels(data.labels, rows);
        TrunkCache cache;
        const Matrix f = m.features(x, cache);
        const auto loss = loss_L5_grad(gather_rows(H, rows), stored.forward(f), gather_rows(H_tilde, rows),
                                       live.forward(f), y, head_logits(m.head(nh), f), cfg.hp);
        Matrix df = stored.backward(f, loss.d_old, grads);
        df.noalias() += live.backward(f, loss.d_old_updated, grads);
        df.noalias() += head_backward(m.head(nh), f, loss.d_new, &grads[Model::head_block(nh)]);
        m.trunk_backward(cache, df, grads);
        return loss.value;
      });
  keep(state, cfg, SnapshotTag::f_plus);
  return history;
}

void finish_task(NflState& state) {
  state.frozen_heads.clear();
  for (std::size_t h = 0; h < state.model.head_count(); ++h) {
    state.frozen_heads.push_back({SnapshotTag::trained, {state.model.head(h)}});
  }
  state.task_count = state.model.head_count();
  state.model.set_trainable(std::vector<bool>(state.model.block_count(), true));
}

void learn_task(NflState& state, const TaskData& task, const TrainConfig& cfg) {
  learn_task(state, task.train(), task.num_classes(), cfg);
}

void learn_task(NflState& state, const Dataset& data, std::size_t num_classes, const TrainConfig& cfg) {
  cfg.validate();
  check_data(state, data);
  require(state.task_count >= 1, "learn_task: train the first task before learning new ones");
  const Matrix H = record_soft_targets(state, data.inputs).H;
  state.model.add_head(num_classes, stage_seed(cfg, state.task_count, kNewHeadStage));
  step2_train_new_head(state, data, cfg);
  step3_retrain_shared(state, data, H, cfg);
  step4_finetune(state, data, H, cfg);
  const Matrix H_tilde = recompute_logits(state, data.inputs);
  step5_joint_distill(state, data, H, H_tilde, cfg);
  finish_task(state);
}

}  // namespace nfl
