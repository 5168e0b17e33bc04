#include "nfl/losses.hpp"

#include <cmath>

namespace nfl {

void Hyperparams::validate() const {
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  auto unit = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
  require(finite_nonneg(lambda_), "lambda must be >= 0");
  require(finite_nonneg(omega), "omega must be >= 0");
  require(unit(alpha), "alpha must lie in [0, 1]");
  require(finite_nonneg(beta), "beta must be >= 0");
  require(std::isfinite(p) && p > 1.0, "temperature p must be > 1");
  require(finite_nonneg(Omega_), "Omega must be >= 0");
  require(unit(eta), "eta must lie in [0, 1]");
  require(finite_nonneg(phi), "phi must be >= 0");
  require(finite_nonneg(rho), "rho must be >= 0");
  require(finite_nonneg(tau), "tau must be >= 0");
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

Matrix softmax_rows(const Matrix& logits) { return log_softmax_rows(logits).array().exp(); }

namespace {

void check_labels(const Matrix& logits, std::span<const int> labels) {
  require(logits.rows() > 0, "empty batch");
  require(static_cast<Eigen::Index>(labels.size()) == logits.rows(), "label count must equal row count");
  for (int y : labels) require(y >= 0 && y < logits.cols(), "label out of range");
  if (!logits.allFinite()) throw NumericError("non-finite logits");
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), std::string(what) + ": shape mismatch");
}

}  // namespace

double cross_entropy(const Matrix& logits, std::span<const int> labels) {
  return cross_entropy_grad(logits, labels).value;
}

LossGrad cross_entropy_grad(const Matrix& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  const Matrix logp = log_softmax_rows(logits);
  const double n = static_cast<double>(logits.rows());
  LossGrad out{0.0, logp.array().exp() / n};
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto y = labels[static_cast<std::size_t>(r)];
    out.value -= logp(r, y);
    out.grad(r, y) -= 1.0 / n;
  }
  out.value /= n;
  return out;
}

RowVector temper(const RowVector& probs, double p) {
  require(p > 0.0 && std::isfinite(p), "temper: p must be positive");
  require(probs.size() > 0, "temper: empty distribution");
  require((probs.array() >= 0.0).all(), "temper: negative probability");
  RowVector powered = probs.array().pow(1.0 / p);
  return powered / powered.sum();
}

// temper(softmax(z), p) == softmax(z / p), so both sides are evaluated in the
// log domain without materializing tiny probabilities.
double kd_loss(const Matrix& recorded_logits, const Matrix& current_logits, double p) {
  return kd_loss_grad(recorded_logits, current_logits, p).value;
}

KdGrad kd_loss_grad(const Matrix& recorded_logits, const Matrix& current_logits, double p) {
  check_same_shape(recorded_logits, current_logits, "kd_loss");
  require(recorded_logits.rows() > 0, "kd_loss: empty batch");
  require(p > 0.0 && std::isfinite(p), "kd_loss: p must be positive");
  if (!recorded_logits.allFinite() || !current_logits.allFinite()) throw NumericError("kd_loss: non-finite logits");
  const double n = static_cast<double>(current_logits.rows());
  const Matrix h = softmax_rows(recorded_logits / p);
  const Matrix log_o = log_softmax_rows(current_logits / p);
  KdGrad out;
  const Eigen::VectorXd cross = -(h.cwiseProduct(log_o)).rowwise().sum();
  out.value = cross.sum() / n;
  out.d_current = (log_o.array().exp() - h.array()) / (p * n);
  // d/dy_j of -sum_i h_i log o_i with h = softmax(y/p).
  Matrix centered = log_o;
  centered.colwise() += cross;
  out.d_recorded = -(h.cwiseProduct(centered)) / (p * n);
  return out;
}

namespace {

TwoHeadLoss kd_plus_ce(const Matrix& H, const Matrix& old_logits, std::span<const int> labels,
                       const Matrix& new_logits, double ce_weight, double p) {
  check_same_shape(H, old_logits, "KD target vs old-head logits");
  require(old_logits.rows() == new_logits.rows(), "old and new logits must have equal row counts");
  const auto kd = kd_loss_grad(H, old_logits, p);
  const auto ce = cross_entropy_grad(new_logits, labels);
  return {kd.value + ce_weight * ce.value, kd.d_current, ce_weight * ce.grad};
}

}  // namespace

double loss_L3(const Matrix& H, const Matrix& old_logits, std::span<const int> labels,
               const Matrix& new_logits, const Hyperparams& hp) {
  return loss_L3_grad(H, old_logits, labels, new_logits, hp).value;
}

TwoHeadLoss loss_L3_grad(const Matrix& H, const Matrix& old_logits, std::span<const int> labels,
                         const Matrix& new_logits, const Hyperparams& hp) {
  return kd_plus_ce(H, old_logits, labels, new_logits, hp.lambda_, hp.p);
}

double loss_L4(const Matrix& H, const Matrix& old_logits, std::span<const int> labels,
               const Matrix& new_logits, const Hyperparams& hp) {
  return loss_L4_grad(H, old_logits, labels, new_logits, hp).value;
}

TwoHeadLoss loss_L4_grad(const Matrix& H, const Matrix& old_logits, std::span<const int> labels,
                         const Matrix& new_logits, const Hyperparams& hp) {
  return kd_plus_ce(H, old_logits, labels, new_logits, hp.omega, hp.p);
}

double loss_L5(const Matrix& H, const Matrix& old_logits, const Matrix& H_tilde,
               const Matrix& old_logits_updated, std::span<const int> labels, const Matrix& new_logits,
               const Hyperparams& hp) {
  return loss_L5_grad(H, old_logits, H_tilde, old_logits_updated, labels, new_logits, hp).value;
}

DualDistillLoss loss_L5_grad(const Matrix& H, const Matrix& old_logits, const Matrix& H_tilde,
                             const Matrix& old_logits_updated, std::span<const int> labels,
                             const Matrix& new_logits, const Hyperparams& hp) {
  check_same_shape(H, old_logits, "L5 first KD term");
  check_same_shape(H_tilde, old_logits_updated, "L5 second KD term");
  check_same_shape(H, H_tilde, "L5 KD targets");
  const auto kd1 = kd_loss_grad(H, old_logits, hp.p);
  const auto kd2 = kd_loss_grad(H_tilde, old_logits_updated, hp.p);
  const auto ce = cross_entropy_grad(new_logits, labels);
  DualDistillLoss out;
  out.value = hp.alpha * kd1.value + (1.0 - hp.alpha) * kd2.value + hp.beta * ce.value;
  out.d_old = hp.alpha * kd1.d_current;
  out.d_old_updated = (1.0 - hp.alpha) * kd2.d_current;
  out.d_new = hp.beta * ce.grad;
  return out;
}

double ae_objective(const Matrix& features, const Matrix& reconstructed, const Matrix& head_logits,
                    std::span<const int> labels, double Omega_) {
  return ae_objective_grad(features, reconstructed, head_logits, labels, Omega_).value;
}

AeObjectiveGrad ae_objective_grad(const Matrix& features, const Matrix& reconstructed,
                                  const Matrix& head_logits, std::span<const int> labels, double Omega_) {
  check_same_shape(features, reconstructed, "ae_objective");
  auto recon = drift_reg_grad(reconstructed, features);
  auto ce = cross_entropy_grad(head_logits, labels);
  return {Omega_ * recon.value + ce.value, Omega_ * recon.grad, std::move(ce.grad)};
}

double drift_reg(const Matrix& code_current, const Matrix& code_reference) {
  return drift_reg_grad(code_current, code_reference).value;
}

LossGrad drift_reg_grad(const Matrix& code_current, const Matrix& code_reference) {
  check_same_shape(code_current, code_reference, "drift_reg");
  require(code_current.size() > 0, "drift_reg: empty input");
  const Matrix diff = code_current - code_reference;
  const double n = static_cast<double>(diff.size());
  return {diff.squaredNorm() / n, 2.0 * diff / n};
}

double bias_reg(const Matrix& gamma_outputs) { return bias_reg_grad(gamma_outputs).value; }

LossGrad bias_reg_grad(const Matrix& gamma_outputs) {
  require(gamma_outputs.size() > 0, "bias_reg: empty input");
  if (!gamma_outputs.allFinite()) throw NumericError("bias_reg: non-finite input");
  const Matrix diff = gamma_outputs.array() - 1.0;
  const double n = static_cast<double>(diff.size());
  return {diff.squaredNorm() / n, 2.0 * diff / n};
}

Matrix adjust_logits(const Matrix& gamma_outputs, const Matrix& H) {
  check_same_shape(gamma_outputs, H, "adjust_logits");
  return gamma_outputs.cwiseProduct(H);
}

double loss_L5_plus(const Matrix& H_prime, const Matrix& old_logits, const Matrix& H_tilde,
                    const Matrix& old_logits_updated, std::span<const int> labels, const Matrix& new_logits,
                    const Matrix& code_current, const Matrix& code_reference, const Matrix& gamma_outputs,
                    const Hyperparams& hp) {
  check_same_shape(H_prime, old_logits, "L5' first KD term");
  check_same_shape(H_tilde, old_logits_updated, "L5' second KD term");
  return hp.eta * kd_loss(H_prime, old_logits, hp.p) + (1.0 - hp.eta) * kd_loss(H_tilde, old_logits_updated, hp.p) +
         hp.phi * cross_entropy(new_logits, labels) + hp.rho * drift_reg(code_current, code_reference) +
         hp.tau * bias_reg(gamma_outputs);
}

DualDistillLoss loss_L5_plus_grad(const NflPlusTerms& t, const Hyperparams& hp) {
  const Matrix H_prime = adjust_logits(t.gamma_outputs, t.H);
  check_same_shape(H_prime, t.old_logits, "L5' first KD term");
  check_same_shape(t.H_tilde, t.old_logits_updated, "L5' second KD term");
  const auto kd1 = kd_loss_grad(H_prime, t.old_logits, hp.p);
  const auto kd2 = kd_loss_grad(t.H_tilde, t.old_logits_updated, hp.p);
  const auto ce = cross_entropy_grad(t.new_logits, t.labels);
  const auto drift = drift_reg_grad(t.code_current, t.code_reference);
  const auto bias = bias_reg_grad(t.gamma_outputs);
  DualDistillLoss out;
  out.value = hp.eta * kd1.value + (1.0 - hp.eta) * kd2.value + hp.phi * ce.value + hp.rho * drift.value +
              hp.tau * bias.value;
  out.d_old = hp.eta * kd1.d_current;
  out.d_old_updated = (1.0 - hp.eta) * kd2.d_current;
  out.d_new = hp.phi * ce.grad;
  out.d_code = hp.rho * drift.grad;
  out.d_gamma = hp.eta * kd1.d_recorded.cwiseProduct(t.H) + hp.tau * bias.grad;
  return out;
}

}  // namespace nfl
