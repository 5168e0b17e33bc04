#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

#include "nfl/model.hpp"
#include "nfl/scenarios.hpp"

namespace nfl::testing {

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Labels random_labels(std::mt19937_64& rng, std::size_t n, int classes) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  Labels y(n);
  for (auto& v : y) v = u(rng);
  return y;
}

/// Central-difference gradient of a scalar function of one matrix argument.
inline Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, const Matrix& at, double h = 1e-6) {
  Matrix g(at.rows(), at.cols());
  Matrix x = at;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double up = f(x);
    x.data()[i] = orig - h;
    const double down = f(x);
    x.data()[i] = orig;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - n|| / max(||a||, ||n||), with a floor so that two vanishing gradients compare equal.
inline double relative_error(const Matrix& analytic, const Matrix& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-7});
  return (analytic - numeric).norm() / scale;
}

/// Byte-level equality of two parameter blocks.
inline bool bit_identical(const ParameterBlock& a, const ParameterBlock& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto& x = a.layers[l];
    const auto& y = b.layers[l];
    if (std::memcmp(x.weight.data(), y.weight.data(), sizeof(double) * static_cast<std::size_t>(x.weight.size())) !=
            0 ||
        std::memcmp(x.bias.data(), y.bias.data(), sizeof(double) * static_cast<std::size_t>(x.bias.size())) != 0) {
      return false;
    }
  }
  return true;
}

inline bool bit_identical(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

/// Task-local dataset of the given global classes from a labeled set.
inline Dataset subset(const LabeledSet& set, const std::vector<int>& classes) {
  std::vector<std::size_t> rows;
  Labels labels;
  for (std::size_t i = 0; i < set.labels.size(); ++i) {
    const auto it = std::find(classes.begin(), classes.end(), set.labels[i]);
    if (it != classes.end()) {
      rows.push_back(i);
      labels.push_back(static_cast<int>(it - classes.begin()));
    }
  }
  return {gather_rows(set.inputs, rows), labels};
}

inline double accuracy(const Matrix& logits, const Labels& labels) {
  const auto pred = argmax_rows(logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == static_cast<std::size_t>(labels[i]);
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace nfl::testing
