#include "nfl/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <random>

namespace nfl {

void ModelSpec::validate() const {
  require(input_dim > 0, "ModelSpec: input_dim must be positive");
  require(!trunk_layers.empty(), "ModelSpec: at least one trunk layer required");
  for (const auto& layer : trunk_layers) {
    require(layer.width > 0, "ModelSpec: trunk layer width must be positive");
  }
  for (auto c : head_dims) require(c >= 1, "ModelSpec: head must have at least one class");
}

ModelSpec ModelSpec::mlp(std::size_t input_dim, std::span<const std::size_t> hidden,
                         std::vector<std::size_t> head_dims) {
  ModelSpec spec;
  spec.input_dim = input_dim;
  for (auto w : hidden) spec.trunk_layers.push_back({w, Activation::relu});
  spec.head_dims = std::move(head_dims);
  return spec;
}

Matrix Affine::apply(const Matrix& x) const {
  Matrix out = x * weight;
  out.rowwise() += bias;
  return out;
}

std::size_t ParameterBlock::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.parameter_count();
  return n;
}

bool ParameterBlock::same_shape(const ParameterBlock& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& a = layers[i];
    const auto& b = other.layers[i];
    if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols() ||
        a.bias.size() != b.bias.size()) {
      return false;
    }
  }
  return true;
}

ParameterBlock ParameterBlock::zeros_like() const {
  ParameterBlock z;
  z.layers.reserve(layers.size());
  for (const auto& l : layers) {
    z.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), RowVector::Zero(l.bias.size())});
  }
  return z;
}

void ParameterBlock::add_scaled(const ParameterBlock& other, double scale) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weight.noalias() += scale * other.layers[i].weight;
    layers[i].bias.noalias() += scale * other.layers[i].bias;
  }
}

bool ParameterBlock::all_finite() const {
  for (const auto& l : layers) {
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

std::string to_string(SnapshotTag tag) {
  switch (tag) {
    case SnapshotTag::r: return "r";
    case SnapshotTag::trained: return "trained";
    case SnapshotTag::u: return "u";
    case SnapshotTag::f: return "f";
    case SnapshotTag::f_plus: return "f+";
  }
  return "unknown";
}

Matrix activate(Activation act, const Matrix& pre) {
  switch (act) {
    case Activation::relu: return pre.cwiseMax(0.0);
    case Activation::identity: return pre;
    case Activation::sigmoid: return pre.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  }
  return pre;
}

Matrix activate_backward(Activation act, const Matrix& out, const Matrix& grad_out) {
  switch (act) {
    case Activation::relu:
      return grad_out.cwiseProduct(out.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; }));
    case Activation::identity: return grad_out;
    case Activation::sigmoid:
      return grad_out.cwiseProduct(out.unaryExpr([](double s) { return s * (1.0 - s); }));
  }
  return grad_out;
}

Affine he_affine(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Affine a{Matrix(static_cast<Eigen::Index>(fan_in), static_cast<Eigen::Index>(fan_out)),
           RowVector::Zero(static_cast<Eigen::Index>(fan_out))};
  for (Eigen::Index i = 0; i < a.weight.size(); ++i) a.weight.data()[i] = dist(rng);
  return a;
}

Matrix head_logits(const ParameterBlock& head, const Matrix& features) {
  require(head.layers.size() == 1, "head block must hold exactly one affine layer");
  require(features.cols() == head.layers[0].weight.rows(), "head_logits: feature width mismatch");
  return head.layers[0].apply(features);
}

Matrix head_backward(const ParameterBlock& head, const Matrix& features, const Matrix& grad_logits,
                     ParameterBlock* grad) {
  const auto& layer = head.layers.at(0);
  if (grad != nullptr) {
    grad->layers[0].weight.noalias() += features.transpose() * grad_logits;
    grad->layers[0].bias.noalias() += grad_logits.colwise().sum();
  }
  return grad_logits * layer.weight.transpose();
}

namespace {

ParameterBlock make_trunk(const ModelSpec& spec, std::uint64_t seed) {
  ParameterBlock trunk;
  std::size_t fan_in = spec.input_dim;
  for (std::size_t i = 0; i < spec.trunk_layers.size(); ++i) {
    trunk.layers.push_back(he_affine(fan_in, spec.trunk_layers[i].width, derive_seed(seed, 1, i)));
    fan_in = spec.trunk_layers[i].width;
  }
  return trunk;
}

ParameterBlock make_head(std::size_t feature_dim, std::size_t classes, std::uint64_t seed) {
  ParameterBlock head;
  head.layers.push_back(he_affine(feature_dim, classes, seed));
  return head;
}

}  // namespace

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  blocks_.push_back(make_trunk(spec_, seed));
  for (std::size_t h = 0; h < spec_.head_dims.size(); ++h) {
    blocks_.push_back(make_head(spec_.feature_dim(), spec_.head_dims[h], derive_seed(seed, 2, h)));
  }
  trainable_.assign(blocks_.size(), true);
}

std::size_t Model::head_dim(std::size_t head) const { return spec_.head_dims.at(head); }

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.parameter_count();
  return n;
}

Matrix Model::features(const Matrix& inputs) const {
  require(inputs.cols() == static_cast<Eigen::Index>(spec_.input_dim), "forward: input width mismatch");
  Matrix x = inputs;
  for (std::size_t i = 0; i < spec_.trunk_layers.size(); ++i) {
    x = activate(spec_.trunk_layers[i].activation, trunk().layers[i].apply(x));
  }
  return x;
}

Matrix Model::features(const Matrix& inputs, TrunkCache& cache) const {
  require(inputs.cols() == static_cast<Eigen::Index>(spec_.input_dim), "forward: input width mismatch");
  cache.inputs.clear();
  cache.activations.clear();
  Matrix x = inputs;
  for (std::size_t i = 0; i < spec_.trunk_layers.size(); ++i) {
    cache.inputs.push_back(x);
    x = activate(spec_.trunk_layers[i].activation, trunk().layers[i].apply(x));
    cache.activations.push_back(x);
  }
  return x;
}

std::vector<Matrix> Model::forward(const Matrix& inputs, std::span<const std::size_t> heads) const {
  for (auto h : heads) require(h < head_count(), "forward: unknown head id");
  const Matrix f = features(inputs);
  std::vector<Matrix> out;
  out.reserve(heads.size());
  for (auto h : heads) out.push_back(head_logits(head(h), f));
  return out;
}

Matrix Model::forward_concat(const Matrix& inputs, std::span<const std::size_t> heads) const {
  auto parts = forward(inputs, heads);
  Eigen::Index cols = 0;
  for (const auto& p : parts) cols += p.cols();
  Matrix out(inputs.rows(), cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p;
    c += p.cols();
  }
  return out;
}

Matrix Model::forward_all(const Matrix& inputs) const {
  std::vector<std::size_t> heads(head_count());
  for (std::size_t h = 0; h < heads.size(); ++h) heads[h] = h;
  return forward_concat(inputs, heads);
}

void Model::trunk_backward(const TrunkCache& cache, const Matrix& grad_features, Gradients& grads) const {
  Matrix g = grad_features;
  auto& tg = grads.at(trunk_block);
  for (std::size_t i = spec_.trunk_layers.size(); i-- > 0;) {
    g = activate_backward(spec_.trunk_layers[i].activation, cache.activations[i], g);
    tg.layers[i].weight.noalias() += cache.inputs[i].transpose() * g;
    tg.layers[i].bias.noalias() += g.colwise().sum();
    if (i > 0) g = g * trunk().layers[i].weight.transpose();
  }
}

Gradients Model::zero_gradients() const {
  Gradients g;
  g.reserve(blocks_.size());
  for (const auto& b : blocks_) g.push_back(b.zeros_like());
  return g;
}

std::size_t Model::add_head(std::size_t num_classes, std::uint64_t seed) {
  require(num_classes >= 1, "add_head: num_classes must be >= 1");
  blocks_.push_back(make_head(spec_.feature_dim(), num_classes, seed));
  spec_.head_dims.push_back(num_classes);
  trainable_.push_back(true);
  return head_count() - 1;
}

void Model::reinit_trunk(std::uint64_t seed) { blocks_.front() = make_trunk(spec_, seed); }

void Model::reinit_head(std::size_t head, std::uint64_t seed) {
  blocks_.at(head_block(head)) = make_head(spec_.feature_dim(), spec_.head_dims.at(head), seed);
}

void Model::set_trainable(const std::vector<bool>& mask) {
  require(mask.size() == blocks_.size(), "set_trainable: mask length must equal block count");
  trainable_.assign(mask.begin(), mask.end());
}

void Model::train_only(std::initializer_list<std::size_t> blocks) {
  train_only(std::span<const std::size_t>(blocks.begin(), blocks.size()));
}

void Model::train_only(std::span<const std::size_t> blocks) {
  trainable_.assign(blocks_.size(), false);
  for (auto b : blocks) trainable_.at(b) = true;
}

ParameterSnapshot Model::snapshot(SnapshotTag tag) const { return {tag, blocks_}; }

void Model::restore(const ParameterSnapshot& snap) {
  require(snap.blocks.size() == blocks_.size(), "restore: snapshot block count differs from model");
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    require(snap.blocks[i].same_shape(blocks_[i]), "restore: snapshot shape differs from model");
  }
  blocks_ = snap.blocks;
}

Sgd::Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
  require(lr >= 0.0 && std::isfinite(lr), "Sgd: learning rate must be finite and >= 0");
  require(momentum >= 0.0 && momentum < 1.0, "Sgd: momentum must lie in [0, 1)");
}

void Sgd::step(std::span<ParameterBlock> params, std::span<const ParameterBlock> grads,
               const std::vector<bool>& mask) {
  require(params.size() == grads.size() && mask.size() == params.size(), "Sgd::step: block count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (mask[i] && !grads[i].all_finite()) throw NumericError("non-finite gradient");
  }
  if (velocity_.size() != params.size()) velocity_.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!mask[i]) continue;
    require(grads[i].same_shape(params[i]), "Sgd::step: gradient shape mismatch");
    auto& v = velocity_[i];
    if (!v.same_shape(params[i])) v = params[i].zeros_like();
    for (std::size_t l = 0; l < v.layers.size(); ++l) {
      v.layers[l].weight = momentum_ * v.layers[l].weight + grads[i].layers[l].weight;
      v.layers[l].bias = momentum_ * v.layers[l].bias + grads[i].layers[l].bias;
    }
    params[i].add_scaled(v, -lr_);
  }
}

void Sgd::step(Model& model, const Gradients& grads) { step(model.blocks(), grads, model.trainable_mask()); }

namespace {

void put_u64(std::ofstream& out, std::uint64_t v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_f64(std::ofstream& out, const double* data, std::size_t n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

std::uint64_t get_u64(std::ifstream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("parameter file truncated");
  return v;
}

void get_f64(std::ifstream& in, double* data, std::size_t n) {
  if (!in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)))) {
    throw IoError("parameter file truncated");
  }
}

}  // namespace

void write_parameter_file(const std::filesystem::path& path, std::span<const ParameterBlock> blocks) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  put_u64(out, blocks.size());
  for (const auto& b : blocks) {
    put_u64(out, b.layers.size());
    for (const auto& l : b.layers) {
      put_u64(out, static_cast<std::uint64_t>(l.weight.rows()));
      put_u64(out, static_cast<std::uint64_t>(l.weight.cols()));
      put_u64(out, static_cast<std::uint64_t>(l.bias.size()));
    }
  }
  for (const auto& b : blocks) {
    for (const auto& l : b.layers) {
      put_f64(out, l.weight.data(), static_cast<std::size_t>(l.weight.size()));
      put_f64(out, l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<ParameterBlock> read_parameter_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  constexpr std::uint64_t kSane = 1ULL << 32;
  const auto nblocks = get_u64(in);
  if (nblocks > kSane) throw IoError("parameter file header corrupt");
  std::vector<ParameterBlock> blocks(nblocks);
  for (auto& b : blocks) {
    const auto nlayers = get_u64(in);
    if (nlayers > kSane) throw IoError("parameter file header corrupt");
    b.layers.resize(nlayers);
    for (auto& l : b.layers) {
      const auto rows = get_u64(in), cols = get_u64(in), bias = get_u64(in);
      if (rows > kSane || cols > kSane || bias > kSane) throw IoError("parameter file header corrupt");
      l.weight.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      l.bias.resize(static_cast<Eigen::Index>(bias));
    }
  }
  for (auto& b : blocks) {
    for (auto& l : b.layers) {
      get_f64(in, l.weight.data(), static_cast<std::size_t>(l.weight.size()));
      get_f64(in, l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    }
  }
  return blocks;
}

std::filesystem::path save_snapshot(const std::filesystem::path& dir, const ParameterSnapshot& snap) {
  std::filesystem::create_directories(dir);
  auto path = dir / ("params_" + to_string(snap.tag) + ".bin");
  write_parameter_file(path, snap.blocks);
  return path;
}

}  // namespace nfl
