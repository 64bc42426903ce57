#pragma once

#include <cstdint>
#include <ostream>
#include <vector>

#include <Eigen/Sparse>

#include "tpmcf/dataset.hpp"

namespace tpmcf {

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Bipartite invocation graph at time t as a symmetric 0/1 matrix of order
/// n + m: users occupy nodes [0, n), services [n, n + m).
SparseMatrix build_qig(const QosTensor& train, std::uint32_t t);
SparseMatrix build_qig(const QosTensor& tensor, const SplitAssignment& split, std::uint32_t t);

struct NormalizedAdjacency {
  std::uint32_t t = 0;
  SparseMatrix matrix;

  Eigen::Index size() const noexcept { return matrix.rows(); }
};

/// D^{-1/2} (A + I) D^{-1/2} with d_ii = 1 + deg(i), evaluated entrywise.
NormalizedAdjacency normalize_adjacency(const SparseMatrix& adjacency, std::uint32_t t = 0);

/// One normalized adjacency per time-step of `train`.
std::vector<NormalizedAdjacency> build_all_adjacencies(const QosTensor& train);

/// Debug dump: "i j weight" per stored entry, row-major order.
void write_edge_list(const NormalizedAdjacency& adjacency, std::ostream& out);

}  // namespace tpmcf
