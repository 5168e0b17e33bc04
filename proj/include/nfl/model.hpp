#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nfl/tensor.hpp"

namespace nfl {

enum class Activation { relu, identity, sigmoid };

struct LayerSpec {
  std::size_t width = 0;
  Activation activation = Activation::relu;
};

/// Shape of a multi-head classifier: a shared trunk of affine layers and
/// one affine head per task, all heads reading the trunk output.
struct ModelSpec {
  std::size_t input_dim = 0;
  std::vector<LayerSpec> trunk_layers;
  std::vector<std::size_t> head_dims;

  void validate() const;
  std::size_t feature_dim() const { return trunk_layers.empty() ? 0 : trunk_layers.back().width; }

  /// MLP with ReLU hidden layers, e.g. mlp(784, {400, 400}, {2}).
  static ModelSpec mlp(std::size_t input_dim, std::span<const std::size_t> hidden,
                       std::vector<std::size_t> head_dims);
};

/// y = x * weight + bias, with weight stored fan_in x fan_out.
struct Affine {
  Matrix weight;
  RowVector bias;

  Matrix apply(const Matrix& x) const;
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(weight.size() + bias.size());
  }
};

/// Unit of freezing and snapshotting: the trunk is one block, each head is one.
struct ParameterBlock {
  std::vector<Affine> layers;

  std::size_t parameter_count() const;
  bool same_shape(const ParameterBlock& other) const;
  /// Zeros with this block's shape.
  ParameterBlock zeros_like() const;
  void add_scaled(const ParameterBlock& other, double scale);
  bool all_finite() const;
};

using Gradients = std::vector<ParameterBlock>;

/// Superscripts for parameter versions: r (random init), trained, u (updated),
/// f (fine-tuned), f+ (further fine-tuned).
enum class SnapshotTag { r, trained, u, f, f_plus };

std::string to_string(SnapshotTag tag);

struct ParameterSnapshot {
  SnapshotTag tag = SnapshotTag::trained;
  std::vector<ParameterBlock> blocks;
};

/// Per-layer intermediate values kept for the backward pass through the trunk.
struct TrunkCache {
  std::vector<Matrix> inputs;       // input to each layer
  std::vector<Matrix> activations;  // output of each layer after its nonlinearity
};

Matrix activate(Activation act, const Matrix& pre);
/// Backprop through an activation given its output value.
Matrix activate_backward(Activation act, const Matrix& out, const Matrix& grad_out);

/// He-initialized affine layer (Gaussian, variance 2/fan_in), zero bias.
Affine he_affine(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed);

/// Logits of a head block on trunk features.
Matrix head_logits(const ParameterBlock& head, const Matrix& features);
/// Accumulates parameter gradients of a head into `grad` (if non-null) and
/// returns the gradient w.r.t. the features.
Matrix head_backward(const ParameterBlock& head, const Matrix& features, const Matrix& grad_logits,
                     ParameterBlock* grad);

class Model {
 public:
  /// Builds a model with He-initialized weights; deterministic in (spec, seed).
  Model(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  std::size_t head_count() const { return blocks_.size() - 1; }
  std::size_t block_count() const { return blocks_.size(); }
  std::size_t head_dim(std::size_t head) const;
  std::size_t feature_dim() const { return spec_.feature_dim(); }
  std::size_t parameter_count() const;

  /// Block 0 is the trunk; block 1 + h is head h.
  static constexpr std::size_t trunk_block = 0;
  static constexpr std::size_t head_block(std::size_t head) { return head + 1; }

  const ParameterBlock& block(std::size_t i) const { return blocks_.at(i); }
  ParameterBlock& block(std::size_t i) { return blocks_.at(i); }
  const ParameterBlock& trunk() const { return blocks_.front(); }
  const ParameterBlock& head(std::size_t h) const { return blocks_.at(head_block(h)); }
  std::span<ParameterBlock> blocks() { return blocks_; }
  std::span<const ParameterBlock> blocks() const { return blocks_; }

  Matrix features(const Matrix& inputs) const;
  Matrix features(const Matrix& inputs, TrunkCache& cache) const;
  /// Pre-softmax logits for each requested head.
  std::vector<Matrix> forward(const Matrix& inputs, std::span<const std::size_t> heads) const;
  /// Logits of the given heads concatenated column-wise in the given order.
  Matrix forward_concat(const Matrix& inputs, std::span<const std::size_t> heads) const;
  /// Heads [0, head_count) concatenated.
  Matrix forward_all(const Matrix& inputs) const;

  /// Accumulates trunk parameter gradients into grads[trunk_block].
  void trunk_backward(const TrunkCache& cache, const Matrix& grad_features, Gradients& grads) const;
  Gradients zero_gradients() const;

  std::size_t add_head(std::size_t num_classes, std::uint64_t seed);
  void reinit_trunk(std::uint64_t seed);
  void reinit_head(std::size_t head, std::uint64_t seed);

  void set_trainable(const std::vector<bool>& mask);
  /// Trains only the listed blocks.
  void train_only(std::initializer_list<std::size_t> blocks);
  void train_only(std::span<const std::size_t> blocks);
  const std::vector<bool>& trainable_mask() const { return trainable_; }
  bool trainable(std::size_t block) const { return trainable_.at(block); }

  ParameterSnapshot snapshot(SnapshotTag tag = SnapshotTag::trained) const;
  /// Throws InvalidArgument if the snapshot's block shapes differ.
  void restore(const ParameterSnapshot& snap);

 private:
  ModelSpec spec_;
  std::vector<ParameterBlock> blocks_;
  std::vector<bool> trainable_;
};

/// Classical momentum SGD: v <- momentum * v + g; w <- w - lr * v.
/// Velocities persist across steps and reset when block shapes change.
class Sgd {
 public:
  Sgd(double lr, double momentum);

  /// Updates only the blocks whose mask entry is true. Throws NumericError on
  /// non-finite gradients before touching any parameter.
  void step(std::span<ParameterBlock> params, std::span<const ParameterBlock> grads,
            const std::vector<bool>& mask);
  void step(Model& model, const Gradients& grads);
  void reset() { velocity_.clear(); }

  double lr() const { return lr_; }
  double momentum() const { return momentum_; }

 private:
  double lr_;
  double momentum_;
  std::vector<ParameterBlock> velocity_;
};

/// Binary parameter file: u64 block count, then per block a u64 layer count
/// and per layer (rows, cols, bias length) as u64; followed by every weight
/// (row-major) and bias as little-endian f64, in header order.
void write_parameter_file(const std::filesystem::path& path, std::span<const ParameterBlock> blocks);
std::vector<ParameterBlock> read_parameter_file(const std::filesystem::path& path);

/// Writes `dir/params_<tag>.bin`.
std::filesystem::path save_snapshot(const std::filesystem::path& dir, const ParameterSnapshot& snap);

}  // namespace nfl
