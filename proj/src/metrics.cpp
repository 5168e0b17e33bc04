#include "nfl/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace nfl {

AccuracyMatrix::AccuracyMatrix(std::size_t tasks) : n_(tasks), a_(tasks * tasks) {
  require(tasks >= 1, "AccuracyMatrix: need at least one task");
}

bool AccuracyMatrix::has(std::size_t i, std::size_t j) const { return i < n_ && j < n_ && a_[i * n_ + j].has_value(); }

double AccuracyMatrix::operator()(std::size_t i, std::size_t j) const {
  require(has(i, j), "accuracy matrix entry (" + std::to_string(i + 1) + "," + std::to_string(j + 1) + ") missing");
  return *a_[i * n_ + j];
}

void AccuracyMatrix::set(std::size_t i, std::size_t j, double value) {
  require(i < n_ && j < n_, "AccuracyMatrix::set: index out of range");
  require(value >= 0.0 && value <= 1.0, "AccuracyMatrix::set: accuracy must lie in [0, 1]");
  a_[i * n_ + j] = value;
}

void AccuracyMatrix::set_row(std::size_t i, std::span<const double> values) {
  require(values.size() <= n_, "AccuracyMatrix::set_row: too many values");
  for (std::size_t j = 0; j < values.size(); ++j) set(i, j, values[j]);
}

std::string AccuracyMatrix::to_csv() const {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = 0; j < n_; ++j) {
      if (j > 0) out += ',';
      if (const auto& v = a_[i * n_ + j]) {
        auto res = std::to_chars(buf, buf + sizeof buf, *v, std::chars_format::fixed, 6);
        out.append(buf, res.ptr);
      }
    }
    out += '\n';
  }
  return out;
}

AccuracyMatrix AccuracyMatrix::from_csv(const std::string& text) {
  std::vector<std::vector<std::optional<double>>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::optional<double>> row;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      const std::string field = line.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (field.empty()) {
        row.emplace_back();
      } else {
        double v = 0.0;
        auto res = std::from_chars(field.data(), field.data() + field.size(), v);
        if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
          throw IoError("accuracy CSV: bad number '" + field + "'");
        }
        row.emplace_back(v);
      }
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IoError("accuracy CSV is empty");
  AccuracyMatrix A(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw IoError("accuracy CSV is not square");
    for (std::size_t j = 0; j < rows.size(); ++j) {
      if (rows[i][j]) A.set(i, j, *rows[i][j]);
    }
  }
  return A;
}

double avg_accuracy(const AccuracyMatrix& A) {
  const std::size_t T = A.size();
  double sum = 0.0;
  for (std::size_t k = 0; k < T; ++k) sum += A(T - 1, k);
  return sum / static_cast<double>(T);
}

double fwt(const AccuracyMatrix& A, std::span<const double> b) {
  const std::size_t T = A.size();
  require(T >= 2, "fwt: need at least two tasks");
  require(b.size() == T, "fwt: baseline vector must have one entry per task");
  double sum = 0.0;
  for (std::size_t k = 1; k < T; ++k) sum += A(k - 1, k) - b[k];
  return sum / static_cast<double>(T - 1);
}

double bwt(const AccuracyMatrix& A) {
  const std::size_t T = A.size();
  require(T >= 2, "bwt: need at least two tasks");
  double sum = 0.0;
  for (std::size_t k = 0; k + 1 < T; ++k) sum += A(T - 1, k) - A(k, k);
  return sum / static_cast<double>(T - 1);
}

double avg_forgetting(const AccuracyMatrix& A) {
  const std::size_t T = A.size();
  require(T >= 2, "avg_forgetting: need at least two tasks");
  double sum = 0.0;
  for (std::size_t j = 0; j + 1 < T; ++j) {
    // Rows before task j was learned are not part of the maximum.
    double best = A(j, j);
    for (std::size_t i = j + 1; i + 1 < T; ++i) best = std::max(best, A(i, j));
    sum += best - A(T - 1, j);
  }
  return sum / static_cast<double>(T - 1);
}

double intransigence(const AccuracyMatrix& A, double a_star) {
  require(a_star >= 0.0 && a_star <= 1.0, "intransigence: a_star must lie in [0, 1]");
  const std::size_t T = A.size();
  return a_star - A(T - 1, T - 1);
}

PsValue plasticity_stability(const AccuracyMatrix& A, double eps) {
  const std::size_t T = A.size();
  require(T >= 2, "plasticity_stability: need at least two tasks");
  double forgetting = 0.0;
  for (std::size_t k = 0; k + 1 < T; ++k) forgetting += A(T - 1, k) - A(k, k);
  if (std::abs(forgetting) < eps) return {};
  double gain = 0.0;
  for (std::size_t k = 1; k < T; ++k) gain += A(k, k) - A(k - 1, k);
  return {gain / static_cast<double>(T - 1) / std::abs(forgetting)};
}

double random_baseline_accuracy(const ModelSpec& trunk_spec, const Dataset& test, std::size_t num_classes,
                                std::size_t num_seeds, std::uint64_t seed) {
  require(num_seeds >= 1, "random_baseline_accuracy: num_seeds must be >= 1");
  require(test.size() > 0, "random_baseline_accuracy: empty test set");
  ModelSpec spec = trunk_spec;
  spec.head_dims = {num_classes};
  const std::size_t head = 0;
  double total = 0.0;
  for (std::size_t s = 0; s < num_seeds; ++s) {
    const Model model(spec, derive_seed(seed, s));
    const auto pred = argmax_rows(model.forward(test.inputs, std::span<const std::size_t>(&head, 1)).front());
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == static_cast<std::size_t>(test.labels[i]);
    total += static_cast<double>(correct) / static_cast<double>(test.size());
  }
  return total / static_cast<double>(num_seeds);
}

double memory_footprint(double param_count, double exemplar_count, double bytes_per_exemplar) {
  require(param_count >= 0.0 && exemplar_count >= 0.0 && bytes_per_exemplar >= 0.0,
          "memory_footprint: counts must be nonnegative");
  return param_count * 4.0 + exemplar_count * bytes_per_exemplar;
}

MetricsReport compute_metrics(const AccuracyMatrix& A, std::span<const double> b, std::optional<double> a_star,
                              double ps_eps) {
  MetricsReport r;
  r.acc = avg_accuracy(A);
  r.b.assign(b.begin(), b.end());
  r.a_star = a_star;
  if (A.size() >= 2) {
    r.bwt = bwt(A);
    r.af = avg_forgetting(A);
    r.ps = plasticity_stability(A, ps_eps);
    bool superdiagonal = b.size() == A.size();
    for (std::size_t k = 1; superdiagonal && k < A.size(); ++k) superdiagonal = A.has(k - 1, k);
    if (superdiagonal) r.fwt = fwt(A, b);
  }
  if (a_star) r.intransigence = intransigence(A, *a_star);
  return r;
}

}  // namespace nfl
