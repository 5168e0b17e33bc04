#include "nfl/scenarios.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <set>

namespace nfl {

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  if (at + 4 > b.size()) throw IdxTruncatedError("IDX header truncated");
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::size_t kCifarPixels = 3 * 32 * 32;
constexpr std::size_t kCifar100Record = 2 + kCifarPixels;

}  // namespace

Matrix load_idx_images(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (be32(bytes, 0) != kIdxImages) throw IdxMagicError("bad IDX image magic in " + path.string());
  const std::size_t count = be32(bytes, 4), rows = be32(bytes, 8), cols = be32(bytes, 12);
  if (rows == 0 || cols == 0) throw IdxDimensionError("zero image dimension in " + path.string());
  const std::size_t pixels = rows * cols;
  if (bytes.size() < 16 + count * pixels) throw IdxTruncatedError("IDX image payload truncated: " + path.string());
  Matrix out(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(pixels));
  const unsigned char* src = bytes.data() + 16;
  for (std::size_t i = 0; i < count * pixels; ++i) out.data()[i] = static_cast<double>(src[i]) / 255.0;
  return out;
}

Labels load_idx_labels(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (be32(bytes, 0) != kIdxLabels) throw IdxMagicError("bad IDX label magic in " + path.string());
  const std::size_t count = be32(bytes, 4);
  if (bytes.size() < 8 + count) throw IdxTruncatedError("IDX label payload truncated: " + path.string());
  return Labels(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count));
}

LabeledSet load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  LabeledSet set{load_idx_images(images), load_idx_labels(labels), 0};
  if (static_cast<std::size_t>(set.inputs.rows()) != set.labels.size()) {
    throw IdxDimensionError("IDX image and label counts differ");
  }
  for (int y : set.labels) set.num_classes = std::max(set.num_classes, static_cast<std::size_t>(y) + 1);
  return set;
}

LabeledSet load_cifar_binary(const std::filesystem::path& path, CifarLabel which) {
  const auto bytes = read_file(path);
  if (bytes.empty() || bytes.size() % kCifar100Record != 0) {
    throw IdxTruncatedError("CIFAR-100 file size is not a multiple of the record stride: " + path.string());
  }
  const std::size_t count = bytes.size() / kCifar100Record;
  LabeledSet set;
  set.inputs.resize(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(kCifarPixels));
  set.labels.resize(count);
  set.num_classes = which == CifarLabel::fine ? 100 : 20;
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifar100Record;
    const int label = which == CifarLabel::fine ? rec[1] : rec[0];
    if (label >= static_cast<int>(set.num_classes)) throw IdxDimensionError("CIFAR label out of range");
    set.labels[i] = label;
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      set.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) = rec[2 + p] / 255.0;
    }
  }
  return set;
}

std::pair<LabeledSet, LabeledSet> make_blobs(const BlobSpec& spec, std::uint64_t seed) {
  require(spec.classes >= 1 && spec.dim >= 1, "make_blobs: need at least one class and dimension");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix centers(static_cast<Eigen::Index>(spec.classes), static_cast<Eigen::Index>(spec.dim));
  for (Eigen::Index i = 0; i < centers.size(); ++i) centers.data()[i] = spec.center_spread * gauss(rng);
  auto sample = [&](std::size_t per_class) {
    LabeledSet set;
    set.num_classes = spec.classes;
    set.inputs.resize(static_cast<Eigen::Index>(per_class * spec.classes), static_cast<Eigen::Index>(spec.dim));
    Eigen::Index row = 0;
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t c = 0; c < spec.classes; ++c, ++row) {
        for (Eigen::Index d = 0; d < centers.cols(); ++d) {
          set.inputs(row, d) = centers(static_cast<Eigen::Index>(c), d) + spec.noise * gauss(rng);
        }
        set.labels.push_back(static_cast<int>(c));
      }
    }
    return set;
  };
  auto train = sample(spec.train_per_class);
  auto test = sample(spec.test_per_class);
  return {std::move(train), std::move(test)};
}

TaskData::TaskData(std::size_t index, std::vector<int> class_ids, Dataset train, Dataset test)
    : index_(index), class_ids_(std::move(class_ids)), train_(std::move(train)), test_(std::move(test)) {}

const Dataset& TaskData::train() const {
  if (hook_ && *hook_) (*hook_)(index_);
  return train_;
}

std::size_t TaskStream::class_offset(std::size_t task) const {
  std::size_t off = 0;
  for (std::size_t t = 0; t < task; ++t) off += tasks.at(t).num_classes();
  return off;
}

LabelMap TaskStream::label_map() const {
  LabelMap map;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto ids = tasks[t].class_ids();
    for (std::size_t l = 0; l < ids.size(); ++l) map.global_to_local[ids[l]] = {t, l};
  }
  return map;
}

void TaskStream::set_train_access_hook(TrainAccessHook hook) {
  auto shared = std::make_shared<TrainAccessHook>(std::move(hook));
  for (auto& t : tasks) t.hook_ = shared;
}

namespace {

Dataset select_task(const LabeledSet& src, const std::map<int, std::size_t>& local_of) {
  std::vector<std::size_t> rows;
  Dataset out;
  for (std::size_t i = 0; i < src.labels.size(); ++i) {
    auto it = local_of.find(src.labels[i]);
    if (it == local_of.end()) continue;
    rows.push_back(i);
    out.labels.push_back(static_cast<int>(it->second));
  }
  out.inputs = gather_rows(src.inputs, rows);
  return out;
}

}  // namespace

TaskStream split_classes(const LabeledSet& train, const LabeledSet& test, std::size_t num_tasks,
                         std::uint64_t seed, Mode mode) {
  require(num_tasks >= 1, "split_classes: need at least one task");
  require(train.num_classes > 0 && train.num_classes % num_tasks == 0,
          "split_classes: class count must be divisible by the task count");
  require(train.inputs.cols() == test.inputs.cols(), "split_classes: train/test widths differ");
  std::vector<int> order(train.num_classes);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t per_task = train.num_classes / num_tasks;
  TaskStream stream;
  stream.mode = mode;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    std::vector<int> ids(order.begin() + static_cast<std::ptrdiff_t>(t * per_task),
                         order.begin() + static_cast<std::ptrdiff_t>((t + 1) * per_task));
    std::map<int, std::size_t> local_of;
    for (std::size_t l = 0; l < ids.size(); ++l) local_of[ids[l]] = l;
    stream.tasks.emplace_back(t, std::move(ids), select_task(train, local_of), select_task(test, local_of));
  }
  return stream;
}

double task_accuracy(const Model& model, const TaskStream& stream, std::size_t task, Mode mode,
                     std::size_t visible_heads) {
  const auto& data = stream.tasks.at(task).test();
  require(data.size() > 0, "task_accuracy: empty test set");
  require(task < visible_heads && visible_heads <= model.head_count(), "task_accuracy: task head not available");
  std::size_t correct = 0;
  if (mode == Mode::task_il) {
    const std::size_t head = task;
    const auto pred = argmax_rows(model.forward(data.inputs, std::span<const std::size_t>(&head, 1)).front());
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == static_cast<std::size_t>(data.labels[i]);
  } else {
    std::vector<std::size_t> heads(visible_heads);
    std::iota(heads.begin(), heads.end(), 0);
    const auto pred = argmax_rows(model.forward_concat(data.inputs, heads));
    const std::size_t off = stream.class_offset(task);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      correct += pred[i] == off + static_cast<std::size_t>(data.labels[i]);
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<double> evaluate(const Model& model, const TaskStream& stream, std::size_t tasks_seen, Mode mode) {
  require(tasks_seen >= 1 && tasks_seen <= stream.size(), "evaluate: tasks_seen out of range");
  std::vector<double> row;
  row.reserve(tasks_seen);
  for (std::size_t j = 0; j < tasks_seen; ++j) row.push_back(task_accuracy(model, stream, j, mode, tasks_seen));
  return row;
}

}  // namespace nfl
