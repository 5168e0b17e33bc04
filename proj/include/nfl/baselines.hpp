#pragma once

#include <cstdint>
#include <string>

#include "nfl/nfl.hpp"
#include "nfl/scenarios.hpp"

// Exemplar-free reference methods. They share the NflState layout (trunk plus
// one head per task) so evaluation goes through the same code path as NFL.
namespace nfl {

enum class BaselineKind { finetune, joint, lwf };

std::string to_string(BaselineKind kind);

/// Lower bound: new head plus trunk trained with CE only. Old heads receive
/// no gradient.
void finetune_learn_task(NflState& state, const TaskData& task, const TrainConfig& cfg);
void finetune_learn_task(NflState& state, const Dataset& data, std::size_t num_classes, const TrainConfig& cfg);

/// Learning without Forgetting: records old-head logits on the new data, then
/// trains trunk and all heads in one phase with CE(new) + lambda * KD(H, old).
void lwf_learn_task(NflState& state, const TaskData& task, const TrainConfig& cfg);
void lwf_learn_task(NflState& state, const Dataset& data, std::size_t num_classes, const TrainConfig& cfg);

struct JointResult {
  Model model;
  double a_star = 0.0;  // accuracy on the last included task
};

/// Upper bound: one multi-head model trained from `model` on the union of
/// tasks [0, num_tasks). The only routine that reads several tasks' training
/// data. Task-IL fits each sample on its own head; Class-IL fits the
/// concatenated heads against the global class index.
JointResult joint_train(Model model, const TaskStream& stream, std::size_t num_tasks, Mode mode,
                        const TrainConfig& cfg);

}  // namespace nfl
