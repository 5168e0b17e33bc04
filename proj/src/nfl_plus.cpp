#include "nfl/nfl_plus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace nfl {

namespace {

enum Stage : std::uint64_t {
  kAeInit = 101,
  kAeTrain = 102,
  kSplit = 103,
  kBias = 104,
  // Same batch order as NFL's step 5, so that with rho = tau = 0 and Gamma = 1
  // the final stage reproduces it exactly.
  kStep6 = 7,
};

Matrix sigmoid(const Matrix& x) { return activate(Activation::sigmoid, x); }

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

HeadGroup old_heads_of(const NflState& state, bool stored, bool with_grads) {
  HeadGroup g;
  for (auto h : state.old_heads()) {
    if (stored) {
      g.add(state.frozen_heads.at(h).blocks.at(0), std::nullopt);
    } else {
      g.add(state.model.head(h), with_grads ? std::optional<std::size_t>(Model::head_block(h)) : std::nullopt);
    }
  }
  return g;
}

Matrix trunk_features(const Model& model, const ParameterBlock& trunk, const Matrix& inputs) {
  Model copy = model;
  copy.block(Model::trunk_block) = trunk;
  return copy.features(inputs);
}

void retrain_autoencoder(NflPlusState& state, const Dataset& data, const TrainConfig& cfg) {
  auto& nfl = state.nfl;
  const std::size_t head = nfl.task_count - 1;
  const std::size_t code_dim =
      cfg.code_dim != 0 ? cfg.code_dim : default_code_dim(nfl.old_class_count(), nfl.model.feature_dim());
  require(code_dim >= nfl.old_class_count(), "AE code_dim must cover every old class for the bias transform");
  OptimizerSettings settings = cfg.optimizer;
  settings.epochs = cfg.ae_epochs;
  state.ae = train_autoencoder(nfl.model.features(data.inputs), data.labels, nfl.model.head(head), code_dim,
                               cfg.hp.Omega_, settings, stage_seed(cfg, head, kAeTrain));
  state.reference_trunk = nfl.model.trunk();
}

}  // namespace

AutoEncoder AutoEncoder::init(std::size_t feature_dim, std::size_t code_dim, std::uint64_t seed) {
  require(code_dim >= 1, "autoencoder: code_dim must be >= 1");
  require(code_dim < feature_dim, "autoencoder must be under-complete (code_dim < feature_dim)");
  std::mt19937_64 rng(seed);
  const auto f = static_cast<Eigen::Index>(feature_dim), c = static_cast<Eigen::Index>(code_dim);
  AutoEncoder ae;
  ae.enc = gaussian(f, c, std::sqrt(1.0 / static_cast<double>(feature_dim)), rng);
  ae.dec = gaussian(c, f, std::sqrt(1.0 / static_cast<double>(code_dim)), rng);
  return ae;
}

Matrix encode(const AutoEncoder& ae, const Matrix& features) {
  require(features.cols() == ae.enc.rows(), "encode: feature width mismatch");
  return sigmoid(features * ae.enc);
}

Matrix AutoEncoder::reconstruct(const Matrix& features) const { return encode(*this, features) * dec; }

Matrix AutoEncoder::encode_backward(const Matrix& codes, const Matrix& grad_codes) const {
  return activate_backward(Activation::sigmoid, codes, grad_codes) * enc.transpose();
}

std::vector<ParameterBlock> AutoEncoder::to_blocks() const {
  return {ParameterBlock{{Affine{enc, RowVector()}}}, ParameterBlock{{Affine{dec, RowVector()}}}};
}

AutoEncoder AutoEncoder::from_blocks(const std::vector<ParameterBlock>& blocks) {
  require(blocks.size() == 2 && blocks[0].layers.size() == 1 && blocks[1].layers.size() == 1,
          "autoencoder blocks malformed");
  return {blocks[0].layers[0].weight, blocks[1].layers[0].weight};
}

BiasCorrector BiasCorrector::identity(std::size_t feature_dim, std::size_t old_classes) {
  return {Matrix::Zero(static_cast<Eigen::Index>(feature_dim), static_cast<Eigen::Index>(old_classes)),
          RowVector::Ones(static_cast<Eigen::Index>(old_classes))};
}

Matrix BiasCorrector::apply(const AutoEncoder& ae, const Matrix& features) const {
  require(w_bias.rows() == ae.enc.rows() && w_bias.cols() <= ae.enc.cols(), "bias corrector does not fit the AE");
  require(features.cols() == ae.enc.rows(), "bias corrector: feature width mismatch");
  Matrix out = features * w_bias.cwiseProduct(ae.enc.leftCols(w_bias.cols()));
  out.rowwise() += b_bias;
  return out;
}

std::size_t default_code_dim(std::size_t old_classes, std::size_t feature_dim) {
  require(old_classes < feature_dim, "feature width too small for an under-complete code");
  return std::min(std::max(old_classes, feature_dim / 8), feature_dim - 1);
}

AutoEncoder train_autoencoder(const Matrix& features, const Labels& labels, const ParameterBlock& head,
                              std::size_t code_dim, double Omega_, const OptimizerSettings& settings,
                              std::uint64_t seed, TrainHistory* history) {
  require(features.rows() == static_cast<Eigen::Index>(labels.size()) && !labels.empty(),
          "train_autoencoder: features and labels must be non-empty and aligned");
  const AutoEncoder start = AutoEncoder::init(static_cast<std::size_t>(features.cols()), code_dim, derive_seed(seed, kAeInit));
  std::vector<ParameterBlock> params = start.to_blocks();
  auto h = train_epochs(params, {true, true}, labels.size(), settings, seed,
                        [&](std::span<const std::size_t> rows, Gradients& grads) {
                          const Matrix& enc = params[0].layers[0].weight;
                          const Matrix& dec = params[1].layers[0].weight;
                          const Matrix f = gather_rows(features, rows);
                          const Matrix codes = sigmoid(f * enc);
                          const Matrix recon = codes * dec;
                          const auto loss = ae_objective_grad(f, recon, head_logits(head, recon),
                                                              gather_labels(labels, rows), Omega_);
                          Matrix d_recon = loss.d_reconstructed;
                          d_recon.noalias() += head_backward(head, recon, loss.d_logits, nullptr);
                          grads[1].layers[0].weight.noalias() += codes.transpose() * d_recon;
                          const Matrix d_pre = activate_backward(Activation::sigmoid, codes, d_recon * dec.transpose());
                          grads[0].layers[0].weight.noalias() += f.transpose() * d_pre;
                          return loss.value;
                        });
  if (history != nullptr) *history = std::move(h);
  return AutoEncoder::from_blocks(params);
}

BiasCorrector fit_bias_correction(const AutoEncoder& ae, const Matrix& holdout_features, const Matrix& holdout_H,
                                  const Matrix& holdout_old_logits, const Hyperparams& hp,
                                  const OptimizerSettings& settings, std::uint64_t seed, TrainHistory* history) {
  require(holdout_features.rows() > 0, "fit_bias_correction: empty holdout set");
  require(holdout_H.rows() == holdout_features.rows() && holdout_H.rows() == holdout_old_logits.rows() &&
              holdout_H.cols() == holdout_old_logits.cols(),
          "fit_bias_correction: shape mismatch");
  require(static_cast<std::size_t>(holdout_H.cols()) <= ae.code_dim(), "AE code is narrower than the old logits");
  const auto start = BiasCorrector::identity(ae.feature_dim(), static_cast<std::size_t>(holdout_H.cols()));
  std::vector<ParameterBlock> params{ParameterBlock{{Affine{start.w_bias, start.b_bias}}}};
  const Matrix enc_slice = ae.enc.leftCols(holdout_H.cols());
  auto h = train_epochs(params, {true}, static_cast<std::size_t>(holdout_features.rows()), settings, seed,
                        [&](std::span<const std::size_t> rows, Gradients& grads) {
                          const auto& layer = params[0].layers[0];
                          const Matrix f = gather_rows(holdout_features, rows);
                          const Matrix H = gather_rows(holdout_H, rows);
                          Matrix gamma = f * layer.weight.cwiseProduct(enc_slice);
                          gamma.rowwise() += layer.bias;
                          const auto kd = kd_loss_grad(adjust_logits(gamma, H), gather_rows(holdout_old_logits, rows), hp.p);
                          const auto reg = bias_reg_grad(gamma);
                          const Matrix d_gamma = hp.eta * kd.d_recorded.cwiseProduct(H) + hp.tau * reg.grad;
                          grads[0].layers[0].weight.noalias() += (f.transpose() * d_gamma).cwiseProduct(enc_slice);
                          grads[0].layers[0].bias.noalias() += d_gamma.colwise().sum();
                          return hp.eta * kd.value + hp.tau * reg.value;
                        });
  if (history != nullptr) *history = std::move(h);
  return {params[0].layers[0].weight, params[0].layers[0].bias};
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& data, double holdout_fraction, std::uint64_t seed) {
  require(data.size() >= 2, "split_holdout: need at least two samples");
  require(holdout_fraction > 0.0 && holdout_fraction < 1.0, "split_holdout: fraction must lie in (0, 1)");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_hold = static_cast<std::size_t>(std::ceil(holdout_fraction * static_cast<double>(data.size())));
  n_hold = std::clamp<std::size_t>(n_hold, 1, data.size() - 1);
  std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> fit(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  std::sort(hold.begin(), hold.end());
  std::sort(fit.begin(), fit.end());
  return {Dataset{gather_rows(data.inputs, fit), gather_labels(data.labels, fit)},
          Dataset{gather_rows(data.inputs, hold), gather_labels(data.labels, hold)}};
}

TrainHistory step6_joint_distill_plus(NflState& state, const Dataset& data, const Matrix& H,
                                      const Matrix& gamma_outputs, const Matrix& H_tilde, const AutoEncoder& ae,
                                      const Matrix& reference_codes, const TrainConfig& cfg) {
  const std::size_t nh = state.task_count;
  require(state.model.head_count() == nh + 1, "new head for the incoming task is missing");
  require(state.frozen_heads.size() == state.task_count, "missing stored head snapshot");
  const auto n = static_cast<Eigen::Index>(data.size());
  const auto c_old = static_cast<Eigen::Index>(state.old_class_count());
  require(H.rows() == n && H.cols() == c_old && H_tilde.rows() == n && H_tilde.cols() == c_old &&
              gamma_outputs.rows() == n && gamma_outputs.cols() == c_old,
          "step 6: target shapes do not match the old heads");
  require(reference_codes.rows() == n && reference_codes.cols() == static_cast<Eigen::Index>(ae.code_dim()),
          "step 6: reference codes shape mismatch");
  std::vector<std::size_t> blocks{Model::trunk_block, Model::head_block(nh)};
  for (auto h : state.old_heads()) blocks.push_back(Model::head_block(h));
  state.model.train_only(blocks);
  const HeadGroup stored = old_heads_of(state, true, false);
  const HeadGroup live = old_heads_of(state, false, true);
  const auto& m = state.model;
  auto history = train_epochs(
      state.model, data.size(), cfg.optimizer, stage_seed(cfg, nh, kStep6),
      [&](std::span<const std::size_t> rows, Gradients& grads) {
        const Matrix x = gather_rows(data.inputs, rows);
        const Labels y = gather_labels(data.labels, rows);
        TrunkCache cache;
        const Matrix f = m.features(x, cache);
        const Matrix h = gather_rows(H, rows), g = gather_rows(gamma_outputs, rows), ht = gather_rows(H_tilde, rows);
        const Matrix o_stored = stored.forward(f), o_live = live.forward(f), o_new = head_logits(m.head(nh), f);
        const Matrix codes = encode(ae, f), ref = gather_rows(reference_codes, rows);
        const auto loss = loss_L5_plus_grad({h, g, o_stored, ht, o_live, y, o_new, codes, ref}, cfg.hp);
        Matrix df = stored.backward(f, loss.d_old, grads);
        df.noalias() += live.backward(f, loss.d_old_updated, grads);
        df.noalias() += head_backward(m.head(nh), f, loss.d_new, &grads[Model::head_block(nh)]);
        if (cfg.hp.rho != 0.0) df.noalias() += ae.encode_backward(codes, loss.d_code);
        m.trunk_backward(cache, df, grads);
        return loss.value;
      });
  if (cfg.keep_step_snapshots) state.step_snapshots[SnapshotTag::f_plus] = state.model.snapshot(SnapshotTag::f_plus);
  return history;
}

NflPlusState train_first_task_plus(Model model, const TaskData& task, const TrainConfig& cfg) {
  return train_first_task_plus(std::move(model), task.train(), cfg);
}

NflPlusState train_first_task_plus(Model model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  NflPlusState state{train_first_task(std::move(model), data, cfg), std::nullopt, {}, std::nullopt};
  retrain_autoencoder(state, data, cfg);
  return state;
}

void learn_task_plus(NflPlusState& state, const TaskData& task, const TrainConfig& cfg) {
  learn_task_plus(state, task.train(), task.num_classes(), cfg);
}

void learn_task_plus(NflPlusState& state, const Dataset& data, std::size_t num_classes, const TrainConfig& cfg) {
  cfg.validate();
  require(state.ae.has_value(), "learn_task_plus: AE from the previous task is missing");
  auto& nfl = state.nfl;
  require(nfl.task_count >= 1, "learn_task_plus: train the first task before learning new ones");
  const std::size_t task = nfl.task_count;
  const auto [fit, holdout] = split_holdout(data, cfg.holdout_fraction, stage_seed(cfg, task, kSplit));
  const Matrix H = record_soft_targets(nfl, fit.inputs).H;
  const Matrix H_holdout = record_soft_targets(nfl, holdout.inputs).H;
  // Reference codes come from the trunk the AE was trained on.
  const Matrix reference_codes = encode(*state.ae, trunk_features(nfl.model, state.reference_trunk, fit.inputs));

  nfl.model.add_head(num_classes, stage_seed(cfg, task, kNewHeadStage));
  step2_train_new_head(nfl, fit, cfg);
  step3_retrain_shared(nfl, fit, H, cfg);
  step4_finetune(nfl, fit, H, cfg);
  const Matrix H_tilde = recompute_logits(nfl, fit.inputs);

  const Matrix holdout_features = nfl.model.features(holdout.inputs);
  const Matrix holdout_old = old_heads_of(nfl, false, false).forward(holdout_features);
  OptimizerSettings bias_settings = cfg.optimizer;
  bias_settings.epochs = cfg.bias_epochs;
  state.bias = fit_bias_correction(*state.ae, holdout_features, H_holdout, holdout_old, cfg.hp, bias_settings,
                                   stage_seed(cfg, task, kBias));
  const Matrix gamma = state.bias->apply(*state.ae, nfl.model.features(fit.inputs));

  step6_joint_distill_plus(nfl, fit, H, gamma, H_tilde, *state.ae, reference_codes, cfg);
  finish_task(nfl);
  retrain_autoencoder(state, data, cfg);
}

void save_nfl_plus_extras(const std::filesystem::path& dir, const NflPlusState& state) {
  std::filesystem::create_directories(dir);
  if (state.ae) write_parameter_file(dir / "params_ae.bin", state.ae->to_blocks());
  if (state.bias) {
    const std::vector<ParameterBlock> blocks{ParameterBlock{{Affine{state.bias->w_bias, state.bias->b_bias}}}};
    write_parameter_file(dir / "params_bias.bin", blocks);
  }
}

}  // namespace nfl
