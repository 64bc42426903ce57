#include "tpmcf/graph.hpp"

#include <cmath>

#include "tpmcf/errors.hpp"
#include "tpmcf/numcore.hpp"

namespace tpmcf {

SparseMatrix build_qig(const QosTensor& train, std::uint32_t t) {
  const auto n = static_cast<Eigen::Index>(train.users());
  const auto order = n + static_cast<Eigen::Index>(train.services());
  std::vector<Eigen::Triplet<double>> trips;
  const auto slice = train.slice(t);
  trips.reserve(2 * slice.size());
  for (const auto& e : slice) {
    const Eigen::Index u = e.at.user;
    const Eigen::Index s = n + e.at.service;
    trips.emplace_back(u, s, 1.0);
    trips.emplace_back(s, u, 1.0);
  }
  SparseMatrix a(order, order);
  a.setFromTriplets(trips.begin(), trips.end());
  return a;
}

SparseMatrix build_qig(const QosTensor& tensor, const SplitAssignment& split, std::uint32_t t) {
  if (t >= tensor.time_steps()) throw RangeError("time-step " + std::to_string(t) + " out of range");
  std::vector<Triple> at_t;
  for (const auto& tr : split.train) {
    if (tr.time == t) at_t.push_back(tr);
  }
  return build_qig(tensor.restrict_to(at_t), t);
}

NormalizedAdjacency normalize_adjacency(const SparseMatrix& adjacency, std::uint32_t t) {
  if (adjacency.rows() != adjacency.cols()) throw DimensionError("adjacency matrix must be square");
  const Eigen::Index order = adjacency.rows();
  Vector inv_sqrt_degree(order);
  for (Eigen::Index i = 0; i < order; ++i) {
    double degree = 1.0;
    for (SparseMatrix::InnerIterator it(adjacency, i); it; ++it) degree += it.value();
    inv_sqrt_degree(i) = 1.0 / std::sqrt(degree);
  }
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<std::size_t>(adjacency.nonZeros() + order));
  for (Eigen::Index i = 0; i < order; ++i) {
    trips.emplace_back(i, i, inv_sqrt_degree(i) * inv_sqrt_degree(i));
    for (SparseMatrix::InnerIterator it(adjacency, i); it; ++it) {
      if (it.col() == i) continue;
      trips.emplace_back(i, it.col(), it.value() * inv_sqrt_degree(i) * inv_sqrt_degree(it.col()));
    }
  }
  NormalizedAdjacency out;
  out.t = t;
  out.matrix.resize(order, order);
  out.matrix.setFromTriplets(trips.begin(), trips.end());
  return out;
}

std::vector<NormalizedAdjacency> build_all_adjacencies(const QosTensor& train) {
  std::vector<NormalizedAdjacency> out;
  out.reserve(train.time_steps());
  for (std::uint32_t t = 0; t < train.time_steps(); ++t) out.push_back(normalize_adjacency(build_qig(train, t), t));
  return out;
}

void write_edge_list(const NormalizedAdjacency& adjacency, std::ostream& out) {
  for (Eigen::Index i = 0; i < adjacency.matrix.outerSize(); ++i) {
    for (SparseMatrix::InnerIterator it(adjacency.matrix, i); it; ++it) {
      out << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
    }
  }
}

}  // namespace tpmcf
