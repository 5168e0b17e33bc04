#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "nfl/nfl.hpp"

namespace nfl {

/// Under-complete autoencoder over trunk features:
/// codes = sigmoid(F * enc), reconstruction = codes * dec.
/// enc is feature_dim x code_dim, dec is code_dim x feature_dim; no biases.
struct AutoEncoder {
  Matrix enc;
  Matrix dec;

  std::size_t feature_dim() const { return static_cast<std::size_t>(enc.rows()); }
  std::size_t code_dim() const { return static_cast<std::size_t>(enc.cols()); }

  /// Randomly initialized; rejects code_dim >= feature_dim.
  static AutoEncoder init(std::size_t feature_dim, std::size_t code_dim, std::uint64_t seed);
  Matrix reconstruct(const Matrix& features) const;
  /// Gradient of the loss w.r.t. features given its gradient w.r.t. codes.
  Matrix encode_backward(const Matrix& codes, const Matrix& grad_codes) const;

  std::vector<ParameterBlock> to_blocks() const;
  static AutoEncoder from_blocks(const std::vector<ParameterBlock>& blocks);
};

Matrix encode(const AutoEncoder& ae, const Matrix& features);

/// Gamma(F) = F * (w_bias ⊙ enc[:, :c_old]) + b_bias: one multiplier per old logit.
/// w_bias is feature_dim x c_old and b_bias has c_old entries.
struct BiasCorrector {
  Matrix w_bias;
  RowVector b_bias;

  /// w_bias = 0, b_bias = 1, so Gamma is identically one.
  static BiasCorrector identity(std::size_t feature_dim, std::size_t old_classes);
  Matrix apply(const AutoEncoder& ae, const Matrix& features) const;
  std::size_t old_classes() const { return static_cast<std::size_t>(b_bias.size()); }
};

/// max(c_old, feature_dim / 8), capped below feature_dim.
std::size_t default_code_dim(std::size_t old_classes, std::size_t feature_dim);

/// Trains the AE on one task's trunk features to minimize
/// Omega * MSE(R(F), F) + CE(head(R(F)), y); the head is not modified.
AutoEncoder train_autoencoder(const Matrix& features, const Labels& labels, const ParameterBlock& head,
                              std::size_t code_dim, double Omega_, const OptimizerSettings& settings,
                              std::uint64_t seed, TrainHistory* history = nullptr);

/// Fits Gamma on held-out samples of the new task with every model and AE
/// parameter frozen. Objective: eta * KD(Gamma ⊙ H, current old-head logits)
/// + tau * ||Gamma - 1||^2.
BiasCorrector fit_bias_correction(const AutoEncoder& ae, const Matrix& holdout_features, const Matrix& holdout_H,
                                  const Matrix& holdout_old_logits, const Hyperparams& hp,
                                  const OptimizerSettings& settings, std::uint64_t seed,
                                  TrainHistory* history = nullptr);

struct NflPlusState {
  NflState nfl;
  std::optional<AutoEncoder> ae;
  /// Trunk as it was when the AE was trained; reference side of the drift term.
  ParameterBlock reference_trunk;
  std::optional<BiasCorrector> bias;
};

/// Deterministic (fit, holdout) split of a task's training data.
std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double holdout_fraction, std::uint64_t seed);

/// Final NFL+ stage: the L5' objective with Gamma held fixed (H' = Gamma ⊙ H),
/// the encoder-drift term against `reference_codes`, stored head copies frozen.
TrainHistory step6_joint_distill_plus(NflState& state, const Dataset& data, const Matrix& H,
                                      const Matrix& gamma_outputs, const Matrix& H_tilde, const AutoEncoder& ae,
                                      const Matrix& reference_codes, const TrainConfig& cfg);

NflPlusState train_first_task_plus(Model model, const TaskData& task, const TrainConfig& cfg);
NflPlusState train_first_task_plus(Model model, const Dataset& data, const TrainConfig& cfg);

/// AE-assisted procedure for one new task; ends by retraining the AE on the
/// new task's features.
void learn_task_plus(NflPlusState& state, const TaskData& task, const TrainConfig& cfg);
void learn_task_plus(NflPlusState& state, const Dataset& data, std::size_t num_classes, const TrainConfig& cfg);

/// Writes params_ae.bin and (when fitted) params_bias.bin into `dir`.
void save_nfl_plus_extras(const std::filesystem::path& dir, const NflPlusState& state);

}  // namespace nfl
