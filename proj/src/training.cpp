#include "nfl/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>

namespace nfl {

void OptimizerSettings::validate() const {
  require(std::isfinite(lr) && lr > 0.0, "optimizer: lr must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, "optimizer: momentum must lie in [0, 1)");
  require(batch_size >= 1, "optimizer: batch_size must be >= 1");
  require(min_improvement >= 0.0, "optimizer: min_improvement must be >= 0");
  require(patience >= 1, "optimizer: patience must be >= 1");
}

std::vector<double> TrainHistory::best_so_far() const {
  std::vector<double> out(epoch_loss.size());
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < epoch_loss.size(); ++i) out[i] = best = std::min(best, epoch_loss[i]);
  return out;
}

TrainHistory train_epochs(std::span<ParameterBlock> params, const std::vector<bool>& mask, std::size_t num_rows,
                          const OptimizerSettings& settings, std::uint64_t seed, const BatchObjective& objective) {
  settings.validate();
  TrainHistory history;
  if (settings.epochs == 0 || num_rows == 0) return history;
  Sgd sgd(settings.lr, settings.momentum);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(num_rows);
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < settings.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < num_rows; start += settings.batch_size) {
      const std::size_t len = std::min(settings.batch_size, num_rows - start);
      std::span<const std::size_t> rows(order.data() + start, len);
      Gradients grads;
      grads.reserve(params.size());
      for (const auto& p : params) grads.push_back(p.zeros_like());
      const double loss = objective(rows, grads);
      if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
      sgd.step(params, grads, mask);
      total += loss * static_cast<double>(len);
    }
    const double mean = total / static_cast<double>(num_rows);
    history.epoch_loss.push_back(mean);
    if (best - mean < settings.min_improvement) {
      if (++stale >= settings.patience) {
        history.early_stopped = true;
        break;
      }
    } else {
      stale = 0;
    }
    best = std::min(best, mean);
  }
  return history;
}

TrainHistory train_epochs(Model& model, std::size_t num_rows, const OptimizerSettings& settings, std::uint64_t seed,
                          const BatchObjective& objective) {
  return train_epochs(model.blocks(), model.trainable_mask(), num_rows, settings, seed, objective);
}

void HeadGroup::add(const ParameterBlock& head, std::optional<std::size_t> grad_slot) {
  heads_.push_back({&head, grad_slot});
}

std::size_t HeadGroup::width() const {
  std::size_t w = 0;
  for (const auto& e : heads_) w += static_cast<std::size_t>(e.head->layers.at(0).weight.cols());
  return w;
}

Matrix HeadGroup::forward(const Matrix& features) const {
  Matrix out(features.rows(), static_cast<Eigen::Index>(width()));
  Eigen::Index c = 0;
  for (const auto& e : heads_) {
    const Matrix logits = head_logits(*e.head, features);
    out.middleCols(c, logits.cols()) = logits;
    c += logits.cols();
  }
  return out;
}

Matrix HeadGroup::backward(const Matrix& features, const Matrix& grad_logits, Gradients& grads) const {
  require(grad_logits.cols() == static_cast<Eigen::Index>(width()), "HeadGroup::backward: width mismatch");
  Matrix grad_features = Matrix::Zero(features.rows(), features.cols());
  Eigen::Index c = 0;
  for (const auto& e : heads_) {
    const Eigen::Index w = e.head->layers[0].weight.cols();
    const Matrix g = grad_logits.middleCols(c, w);
    ParameterBlock* slot = e.slot ? &grads.at(*e.slot) : nullptr;
    grad_features.noalias() += head_backward(*e.head, features, g, slot);
    c += w;
  }
  return grad_features;
}

}  // namespace nfl
