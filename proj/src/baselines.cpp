#include "nfl/baselines.hpp"

#include <numeric>

namespace nfl {

namespace {

enum Stage : std::uint64_t {
  // LwF shares finetuning's batch order, so lambda = 0 reduces it to finetuning exactly.
  kFinetune = 201,
  kLwf = kFinetune,
  kJoint = 203,
};

}  // namespace

std::string to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::finetune: return "finetune";
    case BaselineKind::joint: return "joint";
    case BaselineKind::lwf: return "lwf";
  }
  return "unknown";
}

void finetune_learn_task(NflState& state, const TaskData& task, const TrainConfig& cfg) {
  finetune_learn_task(state, task.train(), task.num_classes(), cfg);
}

void finetune_learn_task(NflState& state, const Dataset& data, std::size_t num_classes, const TrainConfig& cfg) {
  cfg.validate();
  require(state.task_count >= 1, "finetune: train the first task before learning new ones");
  require(data.size() > 0, "finetune: empty training set");
  const std::size_t nh = state.model.add_head(num_classes, stage_seed(cfg, state.task_count, kNewHeadStage));
  state.model.train_only({Model::trunk_block, Model::head_block(nh)});
  const auto& m = state.model;
  train_epochs(state.model, data.size(), cfg.optimizer, stage_seed(cfg, nh, kFinetune),
               [&](std::span<const std::size_t> rows, Gradients& grads) {
                 TrunkCache cache;
                 const Matrix f = m.features(gather_rows(data.inputs, rows), cache);
                 const auto ce = cross_entropy_grad(head_logits(m.head(nh), f), gather_labels(data.labels, rows));
                 m.trunk_backward(cache, head_backward(m.head(nh), f, ce.grad, &grads[Model::head_block(nh)]), grads);
                 return ce.value;
               });
  finish_task(state);
}

void lwf_learn_task(NflState& state, const TaskData& task, const TrainConfig& cfg) {
  lwf_learn_task(state, task.train(), task.num_classes(), cfg);
}

void lwf_learn_task(NflState& state, const Dataset& data, std::size_t num_classes, const TrainConfig& cfg) {
  cfg.validate();
  require(state.task_count >= 1, "lwf: train the first task before learning new ones");
  require(data.size() > 0, "lwf: empty training set");
  const Matrix H = record_soft_targets(state, data.inputs).H;
  const auto old = state.old_heads();
  const std::size_t nh = state.model.add_head(num_classes, stage_seed(cfg, state.task_count, kNewHeadStage));
  state.model.set_trainable(std::vector<bool>(state.model.block_count(), true));
  HeadGroup old_group;
  for (auto h : old) old_group.add(state.model.head(h), Model::head_block(h));
  const auto& m = state.model;
  train_epochs(state.model, data.size(), cfg.optimizer, stage_seed(cfg, nh, kLwf),
               [&](std::span<const std::size_t> rows, Gradients& grads) {
                 TrunkCache cache;
                 const Matrix f = m.features(gather_rows(data.inputs, rows), cache);
                 const auto ce = cross_entropy_grad(head_logits(m.head(nh), f), gather_labels(data.labels, rows));
                 Matrix df = head_backward(m.head(nh), f, ce.grad, &grads[Model::head_block(nh)]);
                 double value = ce.value;
                 if (cfg.hp.lambda_ != 0.0) {
                   const auto kd = kd_loss_grad(gather_rows(H, rows), old_group.forward(f), cfg.hp.p);
                   df.noalias() += old_group.backward(f, cfg.hp.lambda_ * kd.d_current, grads);
                   value += cfg.hp.lambda_ * kd.value;
                 }
                 m.trunk_backward(cache, df, grads);
                 return value;
               });
  finish_task(state);
}

JointResult joint_train(Model model, const TaskStream& stream, std::size_t num_tasks, Mode mode,
                        const TrainConfig& cfg) {
  cfg.validate();
  require(num_tasks >= 1 && num_tasks <= stream.size(), "joint_train: task count out of range");
  require(model.head_count() >= 1, "joint_train: model needs the first task's head");
  for (std::size_t t = model.head_count(); t < num_tasks; ++t) {
    model.add_head(stream.tasks[t].num_classes(), stage_seed(cfg, t, kNewHeadStage));
  }
  require(model.head_count() == num_tasks, "joint_train: model has more heads than tasks");

  // Union of the included tasks' training data, tagged with task and target index.
  std::vector<const Dataset*> parts;
  std::size_t total = 0;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    parts.push_back(&stream.tasks[t].train());
    total += parts.back()->size();
  }
  Matrix inputs(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(model.spec().input_dim));
  std::vector<std::size_t> task_of(total);
  Labels target(total);
  std::size_t row = 0;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    const auto offset = static_cast<int>(stream.class_offset(t));
    const auto& d = *parts[t];
    inputs.middleRows(static_cast<Eigen::Index>(row), d.inputs.rows()) = d.inputs;
    for (std::size_t i = 0; i < d.size(); ++i, ++row) {
      task_of[row] = t;
      target[row] = mode == Mode::task_il ? d.labels[i] : offset + d.labels[i];
    }
  }

  model.set_trainable(std::vector<bool>(model.block_count(), true));
  const auto& m = model;
  const std::uint64_t seed = num_tasks == 1 ? derive_seed(cfg.seed, 0, 1) : stage_seed(cfg, num_tasks, kJoint);
  train_epochs(model, total, cfg.optimizer, seed, [&](std::span<const std::size_t> rows, Gradients& grads) {
    TrunkCache cache;
    const Matrix f = m.features(gather_rows(inputs, rows), cache);
    const Labels y = gather_labels(target, rows);
    if (mode == Mode::class_il) {
      HeadGroup all;
      for (std::size_t h = 0; h < num_tasks; ++h) all.add(m.head(h), Model::head_block(h));
      const auto ce = cross_entropy_grad(all.forward(f), y);
      m.trunk_backward(cache, all.backward(f, ce.grad, grads), grads);
      return ce.value;
    }
    // Task-IL: per-task CE on its own head, weighted by its share of the batch.
    Matrix df = Matrix::Zero(f.rows(), f.cols());
    double value = 0.0;
    const double n = static_cast<double>(rows.size());
    for (std::size_t t = 0; t < num_tasks; ++t) {
      std::vector<std::size_t> local;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (task_of[rows[i]] == t) local.push_back(i);
      }
      if (local.empty()) continue;
      const double w = static_cast<double>(local.size()) / n;
      const Matrix ft = gather_rows(f, local);
      const auto ce = cross_entropy_grad(head_logits(m.head(t), ft), gather_labels(y, local));
      const Matrix dft = head_backward(m.head(t), ft, w * ce.grad, &grads[Model::head_block(t)]);
      for (std::size_t i = 0; i < local.size(); ++i) {
        df.row(static_cast<Eigen::Index>(local[i])) += dft.row(static_cast<Eigen::Index>(i));
      }
      value += w * ce.value;
    }
    m.trunk_backward(cache, df, grads);
    return value;
  });
  const double a_star = task_accuracy(model, stream, num_tasks - 1, mode, num_tasks);
  return {std::move(model), a_star};
}

}  // namespace nfl
