#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "nfl/model.hpp"
#include "nfl/tensor.hpp"

namespace nfl {

enum class Mode { task_il, class_il };

/// Images flattened to rows and scaled to [0, 1], with global labels.
struct LabeledSet {
  Matrix inputs;
  Labels labels;
  std::size_t num_classes = 0;
};

/// Samples of one task; labels are indices into that task's head.
struct Dataset {
  Matrix inputs;
  Labels labels;

  std::size_t size() const { return labels.size(); }
};

class IdxMagicError : public IoError {
 public:
  using IoError::IoError;
};
class IdxTruncatedError : public IoError {
 public:
  using IoError::IoError;
};
class IdxDimensionError : public IoError {
 public:
  using IoError::IoError;
};

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
LabeledSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
Matrix load_idx_images(const std::filesystem::path& path);
Labels load_idx_labels(const std::filesystem::path& path);

enum class CifarLabel { coarse, fine };

/// CIFAR-100 binary: records of 1 coarse byte, 1 fine byte, 3072 pixel bytes.
LabeledSet load_cifar_binary(const std::filesystem::path& path, CifarLabel which);

struct BlobSpec {
  std::size_t classes = 4;
  std::size_t dim = 16;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  double center_spread = 3.0;
  double noise = 1.0;
};

/// Isotropic Gaussian blobs; returns (train, test).
std::pair<LabeledSet, LabeledSet> make_blobs(const BlobSpec& spec, std::uint64_t seed);

/// Observer invoked with the task index whenever a task's training samples are read.
using TrainAccessHook = std::function<void(std::size_t task_index)>;

class TaskData {
 public:
  TaskData(std::size_t index, std::vector<int> class_ids, Dataset train, Dataset test);

  std::size_t index() const { return index_; }
  std::size_t num_classes() const { return class_ids_.size(); }
  /// Global dataset labels of this task, in head order.
  std::span<const int> class_ids() const { return class_ids_; }

  /// Training samples. Every call is reported to the stream's access hook.
  const Dataset& train() const;
  const Dataset& test() const { return test_; }

 private:
  friend struct TaskStream;
  std::size_t index_;
  std::vector<int> class_ids_;
  Dataset train_;
  Dataset test_;
  std::shared_ptr<TrainAccessHook> hook_;
};

struct LabelMap {
  struct Slot {
    std::size_t task;
    std::size_t local;
  };
  std::map<int, Slot> global_to_local;
};

struct TaskStream {
  Mode mode = Mode::task_il;
  std::vector<TaskData> tasks;

  std::size_t size() const { return tasks.size(); }
  /// Column offset of a task's classes in the concatenated head order.
  std::size_t class_offset(std::size_t task) const;
  LabelMap label_map() const;
  void set_train_access_hook(TrainAccessHook hook);
};

/// Partitions classes into `num_tasks` equal disjoint groups, ordered by a
/// seed-driven shuffle, and splits both source sets accordingly.
TaskStream split_classes(const LabeledSet& train, const LabeledSet& test, std::size_t num_tasks,
                         std::uint64_t seed, Mode mode = Mode::task_il);

/// Test accuracy on one task. Task-IL uses that task's head; Class-IL takes the
/// argmax over heads [0, visible_heads) concatenated.
double task_accuracy(const Model& model, const TaskStream& stream, std::size_t task, Mode mode,
                     std::size_t visible_heads);

/// Accuracy row over tasks [0, tasks_seen); reads only test data.
std::vector<double> evaluate(const Model& model, const TaskStream& stream, std::size_t tasks_seen, Mode mode);

}  // namespace nfl
