#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nfl/model.hpp"
#include "nfl/scenarios.hpp"

// Continual-learning metrics over an accuracy matrix.
//
// Indexing: documentation of the metrics uses tasks 1..T; storage is 0-based,
// so A(i, j) here is the accuracy on task j+1 after training task i+1.
namespace nfl {

/// T x T matrix of accuracies in [0, 1]; entries that were never measured are empty.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t tasks);

  std::size_t size() const { return n_; }
  bool has(std::size_t i, std::size_t j) const;
  double operator()(std::size_t i, std::size_t j) const;
  void set(std::size_t i, std::size_t j, double value);
  void set_row(std::size_t i, std::span<const double> values);

  /// Row per training stage, comma separated, 6 fractional digits; missing
  /// entries are empty fields.
  std::string to_csv() const;
  static AccuracyMatrix from_csv(const std::string& text);

 private:
  std::size_t n_;
  std::vector<std::optional<double>> a_;
};

/// Sentinel-carrying plasticity/stability ratio.
struct PsValue {
  std::optional<double> value;  // empty: no forgetting (denominator below eps)
  bool no_forgetting() const { return !value.has_value(); }
};

struct MetricsReport {
  double acc = 0.0;
  std::optional<double> fwt;
  double bwt = 0.0;
  double af = 0.0;
  std::optional<double> intransigence;
  PsValue ps;
  std::vector<double> b;       // random-init baseline per task (FWT input)
  std::optional<double> a_star;  // joint-training accuracy on the last task
};

inline constexpr double kDefaultPsEps = 1e-8;

/// ACC: mean of the last row.
double avg_accuracy(const AccuracyMatrix& A);
/// FWT: mean over k = 2..T of A[k-1][k] - b_k.
double fwt(const AccuracyMatrix& A, std::span<const double> b);
/// BWT: mean over k = 1..T-1 of A[T][k] - A[k][k].
double bwt(const AccuracyMatrix& A);
/// AF: mean over j < T of max_{i <= T-1} A[i][j] - A[T][j].
double avg_forgetting(const AccuracyMatrix& A);
/// I: a_star - A[T][T].
double intransigence(const AccuracyMatrix& A, double a_star);
/// PS: mean new-task gain sum(A[k][k] - A[k-1][k]) / (T-1) divided by |sum(A[T][k] - A[k][k])|.
PsValue plasticity_stability(const AccuracyMatrix& A, double eps = kDefaultPsEps);

/// Mean test accuracy of freshly initialized single-head models on one task.
double random_baseline_accuracy(const ModelSpec& trunk_spec, const Dataset& test, std::size_t num_classes,
                                std::size_t num_seeds, std::uint64_t seed);

/// Bytes for float32 parameters plus stored exemplars.
double memory_footprint(double param_count, double exemplar_count, double bytes_per_exemplar);
/// Bytes to decimal megabytes (1 MB = 1e6 bytes).
inline double to_megabytes(double bytes) { return bytes / 1e6; }

MetricsReport compute_metrics(const AccuracyMatrix& A, std::span<const double> b, std::optional<double> a_star,
                              double ps_eps = kDefaultPsEps);

}  // namespace nfl
