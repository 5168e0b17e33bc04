#include "nfl/tensor.hpp"

namespace nfl {

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < static_cast<std::size_t>(m.rows()), "gather_rows: row out of range");
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

Labels gather_labels(std::span<const int> labels, std::span<const std::size_t> rows) {
  Labels out;
  out.reserve(rows.size());
  for (auto r : rows) {
    require(r < labels.size(), "gather_labels: row out of range");
    out.push_back(labels[r]);
  }
  return out;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

std::vector<std::size_t> argmax_rows(const Matrix& m) {
  std::vector<std::size_t> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m.cols(); ++c) {
      if (m(r, c) > m(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<std::size_t>(best);
  }
  return out;
}

}  // namespace nfl
