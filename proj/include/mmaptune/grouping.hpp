#pragma once

#include "mmaptune/tensor.hpp"

#include <vector>

namespace mmaptune {

/// Averaged task-affinity scores. `s` is n x n, symmetric bit-for-bit by
/// construction, diagonal fixed at zero.
struct SimilarityMatrix {
    Tensor s;
    int snapshots = 0;
    int n() const { return s.empty() ? 0 : s.rows(); }
};

/// Disjoint, jointly exhaustive grouping of task indices 0..n-1. Members are
/// ascending within a group; groups are ordered by their smallest member.
struct Partition {
    std::vector<std::vector<int>> groups;
    double objective = 0.0;
};

/// Dot product of two flattened gradients; with `cosine`, normalized by the
/// norms (zero-norm pairs score 0).
double pairwise_similarity(const std::vector<double>& gi, const std::vector<double>& gj,
                           bool cosine = false);

/// One snapshot matrix from per-task gradients: S[i,j] = sim(g_i, g_j),
/// mirrored exactly, zero diagonal.
Tensor snapshot_similarity(const std::vector<std::vector<double>>& grads, bool cosine = false);

/// Entrywise arithmetic mean of >= 1 snapshot matrices.
Tensor average_snapshots(const std::vector<Tensor>& snaps);

/// Sum over groups of S[i,j] for members i < j. Singletons contribute 0.
double partition_objective(const Tensor& s, const std::vector<std::vector<int>>& groups);

/// Exact search over all set partitions (feasible to n = 12). Ties broken by
/// fewer groups, then lexicographically smallest assignment.
Partition exhaustive_partition(const Tensor& s);

/// Agglomerative fallback: repeatedly merge the best positive-gain pair of
/// groups; deterministic lowest-index tie-break.
Partition greedy_partition(const Tensor& s);

/// Dispatcher: exhaustive for n <= 12, greedy beyond.
Partition best_partition(const Tensor& s);

/// A partition is valid for n tasks if it covers 0..n-1 exactly once.
bool is_valid_partition(const std::vector<std::vector<int>>& groups, int n);

}  // namespace mmaptune
