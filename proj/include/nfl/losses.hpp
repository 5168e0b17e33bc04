#pragma once

#include <span>

#include "nfl/tensor.hpp"

// Loss terms used by the NFL / NFL+ procedures. Every function that returns a
// gradient also returns the loss value; batch expectations are arithmetic
// means over rows, squared norms are means over all entries.
namespace nfl {

struct Hyperparams {
  double lambda_ = 1.0;  // CE weight in the step-3 loss
  double omega = 1.0;    // CE weight in the step-4 loss
  double alpha = 0.5;    // mix of the two KD targets in the step-5 loss
  double beta = 1.0;     // CE weight in the step-5 loss
  double p = 2.0;        // KD temperature
  double Omega_ = 1.0;   // reconstruction weight of the autoencoder objective
  double eta = 0.5;      // KD mix in the NFL+ final loss
  double phi = 1.0;      // CE weight in the NFL+ final loss
  double rho = 0.1;      // encoder-drift weight
  double tau = 0.1;      // bias-regularizer weight

  void validate() const;
};

struct LossGrad {
  double value = 0.0;
  Matrix grad;
};

/// KD value with gradients w.r.t. both the current and the recorded logits.
struct KdGrad {
  double value = 0.0;
  Matrix d_current;
  Matrix d_recorded;
};

/// KD toward recorded targets on old heads plus weighted CE on the new head.
struct TwoHeadLoss {
  double value = 0.0;
  Matrix d_old;
  Matrix d_new;
};

struct DualDistillLoss {
  double value = 0.0;
  Matrix d_old;          // frozen original old heads
  Matrix d_old_updated;  // live old heads
  Matrix d_new;
  Matrix d_code;      // encoder codes of the live trunk (NFL+ only)
  Matrix d_gamma;     // bias-transform outputs through both H' and the regularizer (NFL+ only)
};

struct AeObjectiveGrad {
  double value = 0.0;
  Matrix d_reconstructed;
  Matrix d_logits;
};

Matrix softmax_rows(const Matrix& logits);
Matrix log_softmax_rows(const Matrix& logits);

double cross_entropy(const Matrix& logits, std::span<const int> labels);
LossGrad cross_entropy_grad(const Matrix& logits, std::span<const int> labels);

/// Raises each probability to 1/p and renormalizes.
RowVector temper(const RowVector& probs, double p);

double kd_loss(const Matrix& recorded_logits, const Matrix& current_logits, double p);
KdGrad kd_loss_grad(const Matrix& recorded_logits, const Matrix& current_logits, double p);

double loss_L3(const Matrix& H, const Matrix& old_logits, std::span<const int> labels,
               const Matrix& new_logits, const Hyperparams& hp);
TwoHeadLoss loss_L3_grad(const Matrix& H, const Matrix& old_logits, std::span<const int> labels,
                         const Matrix& new_logits, const Hyperparams& hp);

double loss_L4(const Matrix& H, const Matrix& old_logits, std::span<const int> labels,
               const Matrix& new_logits, const Hyperparams& hp);
TwoHeadLoss loss_L4_grad(const Matrix& H, const Matrix& old_logits, std::span<const int> labels,
                         const Matrix& new_logits, const Hyperparams& hp);

double loss_L5(const Matrix& H, const Matrix& old_logits, const Matrix& H_tilde,
               const Matrix& old_logits_updated, std::span<const int> labels, const Matrix& new_logits,
               const Hyperparams& hp);
DualDistillLoss loss_L5_grad(const Matrix& H, const Matrix& old_logits, const Matrix& H_tilde,
                             const Matrix& old_logits_updated, std::span<const int> labels,
                             const Matrix& new_logits, const Hyperparams& hp);

double ae_objective(const Matrix& features, const Matrix& reconstructed, const Matrix& head_logits,
                    std::span<const int> labels, double Omega_);
AeObjectiveGrad ae_objective_grad(const Matrix& features, const Matrix& reconstructed,
                                  const Matrix& head_logits, std::span<const int> labels, double Omega_);

double drift_reg(const Matrix& code_current, const Matrix& code_reference);
LossGrad drift_reg_grad(const Matrix& code_current, const Matrix& code_reference);

double bias_reg(const Matrix& gamma_outputs);
LossGrad bias_reg_grad(const Matrix& gamma_outputs);

/// Elementwise Gamma * H.
Matrix adjust_logits(const Matrix& gamma_outputs, const Matrix& H);

/// H' is formed internally as gamma ⊙ H so that d_gamma covers both the KD
/// target path and the regularizer.
struct NflPlusTerms {
  const Matrix& H;
  const Matrix& gamma_outputs;
  const Matrix& old_logits;
  const Matrix& H_tilde;
  const Matrix& old_logits_updated;
  std::span<const int> labels;
  const Matrix& new_logits;
  const Matrix& code_current;
  const Matrix& code_reference;
};

double loss_L5_plus(const Matrix& H_prime, const Matrix& old_logits, const Matrix& H_tilde,
                    const Matrix& old_logits_updated, std::span<const int> labels, const Matrix& new_logits,
                    const Matrix& code_current, const Matrix& code_reference, const Matrix& gamma_outputs,
                    const Hyperparams& hp);
DualDistillLoss loss_L5_plus_grad(const NflPlusTerms& terms, const Hyperparams& hp);

}  // namespace nfl
