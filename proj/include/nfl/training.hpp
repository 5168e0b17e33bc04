#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "nfl/model.hpp"

namespace nfl {

struct OptimizerSettings {
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  // Early stop once the epoch-mean loss has failed to improve on the best
  // value by at least min_improvement for `patience` consecutive epochs.
  double min_improvement = 1e-4;
  std::size_t patience = 5;

  void validate() const;
};

struct TrainHistory {
  std::vector<double> epoch_loss;
  bool early_stopped = false;

  /// Running minimum of epoch_loss.
  std::vector<double> best_so_far() const;
};

/// Computes the loss on the given rows and accumulates gradients into `grads`
/// (zeroed before every call, one entry per parameter block).
using BatchObjective = std::function<double(std::span<const std::size_t> rows, Gradients& grads)>;

/// Minibatch SGD over `num_rows` samples, reshuffled every epoch from `seed`.
/// Only blocks with a true mask entry are updated. Throws NumericError when a
/// batch loss is not finite.
TrainHistory train_epochs(std::span<ParameterBlock> params, const std::vector<bool>& mask, std::size_t num_rows,
                          const OptimizerSettings& settings, std::uint64_t seed, const BatchObjective& objective);

TrainHistory train_epochs(Model& model, std::size_t num_rows, const OptimizerSettings& settings, std::uint64_t seed,
                          const BatchObjective& objective);

/// A set of heads evaluated on shared trunk features with their logits
/// concatenated. Heads with a gradient slot receive parameter gradients.
class HeadGroup {
 public:
  void add(const ParameterBlock& head, std::optional<std::size_t> grad_slot);
  Matrix forward(const Matrix& features) const;
  /// Accumulates head gradients and returns the gradient w.r.t. features.
  Matrix backward(const Matrix& features, const Matrix& grad_logits, Gradients& grads) const;
  std::size_t width() const;
  bool empty() const { return heads_.empty(); }

 private:
  struct Entry {
    const ParameterBlock* head;
    std::optional<std::size_t> slot;
  };
  std::vector<Entry> heads_;
};

}  // namespace nfl
