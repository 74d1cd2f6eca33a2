#include "mmaptune/grouping.hpp"

#include <algorithm>
#include <cmath>

namespace mmaptune {

namespace {

void check_square_symmetric(const Tensor& s) {
    if (s.rank() != 2 || s.rows() != s.cols()) {
        throw ShapeError("similarity matrix must be square, got " + s.shape_str());
    }
    for (int i = 0; i < s.rows(); ++i) {
        for (int j = i + 1; j < s.cols(); ++j) {
            if (!(s.at(i, j) == s.at(j, i))) {
                throw ContractError("similarity matrix is not symmetric at (" +
                                    std::to_string(i) + "," + std::to_string(j) + ")");
            }
        }
    }
}

std::vector<std::vector<int>> groups_from_assignment(const std::vector<int>& assign) {
    int n_groups = 0;
    for (int a : assign) n_groups = std::max(n_groups, a + 1);
    std::vector<std::vector<int>> groups(static_cast<size_t>(n_groups));
    for (int i = 0; i < static_cast<int>(assign.size()); ++i) {
        groups[static_cast<size_t>(assign[static_cast<size_t>(i)])].push_back(i);
    }
    return groups;  // labels follow first appearance, members ascending
}

}  // namespace

double pairwise_similarity(const std::vector<double>& gi, const std::vector<double>& gj,
                           bool cosine) {
    if (gi.size() != gj.size()) {
        throw ShapeError("gradient length mismatch: " + std::to_string(gi.size()) + " vs " +
                         std::to_string(gj.size()));
    }
    double dot = 0.0;
    for (size_t k = 0; k < gi.size(); ++k) dot += gi[k] * gj[k];
    if (!cosine) return dot;
    double ni = 0.0, nj = 0.0;
    for (double v : gi) ni += v * v;
    for (double v : gj) nj += v * v;
    if (ni == 0.0 || nj == 0.0) return 0.0;
    return dot / (std::sqrt(ni) * std::sqrt(nj));
}

Tensor snapshot_similarity(const std::vector<std::vector<double>>& grads, bool cosine) {
    const int n = static_cast<int>(grads.size());
    if (n == 0) throw ContractError("snapshot_similarity: no gradients");
    Tensor s({n, n});
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            double v = pairwise_similarity(grads[static_cast<size_t>(i)],
                                           grads[static_cast<size_t>(j)], cosine);
            s.at(i, j) = v;
            s.at(j, i) = v;  // mirrored, bit-for-bit
        }
    }
    return s;
}

Tensor average_snapshots(const std::vector<Tensor>& snaps) {
    if (snaps.empty()) throw ContractError("average_snapshots: zero snapshots");
    Tensor mean = Tensor::zeros_like(snaps[0]);
    for (const Tensor& s : snaps) {
        if (!s.same_shape(snaps[0])) {
            throw ShapeError("snapshot shape mismatch: " + s.shape_str() + " vs " +
                             snaps[0].shape_str());
        }
        for (int64_t k = 0; k < s.size(); ++k) mean[k] += s[k];
    }
    const double inv = 1.0 / static_cast<double>(snaps.size());
    for (int64_t k = 0; k < mean.size(); ++k) mean[k] *= inv;
    return mean;
}

double partition_objective(const Tensor& s, const std::vector<std::vector<int>>& groups) {
    if (s.rank() != 2 || s.rows() != s.cols()) {
        throw ShapeError("similarity matrix must be square, got " + s.shape_str());
    }
    double obj = 0.0;
    for (const auto& g : groups) {
        for (size_t a = 0; a < g.size(); ++a) {
            for (size_t b = a + 1; b < g.size(); ++b) {
                int i = g[a], j = g[b];
                if (i < 0 || i >= s.rows() || j < 0 || j >= s.rows()) {
                    throw ContractError("partition index out of range: " + std::to_string(i) +
                                        "," + std::to_string(j));
                }
                obj += s.at(std::min(i, j), std::max(i, j));
            }
        }
    }
    return obj;
}

bool is_valid_partition(const std::vector<std::vector<int>>& groups, int n) {
    std::vector<int> seen(static_cast<size_t>(n), 0);
    for (const auto& g : groups) {
        for (int i : g) {
            if (i < 0 || i >= n) return false;
            if (seen[static_cast<size_t>(i)]++) return false;
        }
    }
    for (int c : seen)
        if (c != 1) return false;
    return true;
}

Partition exhaustive_partition(const Tensor& s) {
    check_square_symmetric(s);
    const int n = s.rows();
    std::vector<int> assign(static_cast<size_t>(n), 0);
    std::vector<int> best_assign;
    double best_obj = 0.0;
    int best_groups = 0;
    bool have_best = false;

    // Assign items in order; trying existing group labels ascending and the
    // fresh label last walks restricted-growth strings in lexicographic order,
    // so the first incumbent within an (objective, group-count) tie class is
    // already the lexicographically smallest.
    auto recurse = [&](auto&& self, int item, int used, double obj) -> void {
        if (item == n) {
            if (!have_best || obj > best_obj ||
                (obj == best_obj && used < best_groups)) {
                have_best = true;
                best_obj = obj;
                best_groups = used;
                best_assign = assign;
            }
            return;
        }
        for (int g = 0; g <= used && g < n; ++g) {
            double gain = 0.0;
            for (int j = 0; j < item; ++j) {
                if (assign[static_cast<size_t>(j)] == g) gain += s.at(j, item);
            }
            assign[static_cast<size_t>(item)] = g;
            self(self, item + 1, std::max(used, g + 1), obj + gain);
        }
    };
    if (n > 0) recurse(recurse, 0, 0, 0.0);

    Partition p;
    p.groups = groups_from_assignment(best_assign);
    p.objective = partition_objective(s, p.groups);
    return p;
}

Partition greedy_partition(const Tensor& s) {
    check_square_symmetric(s);
    const int n = s.rows();
    std::vector<std::vector<int>> groups;
    for (int i = 0; i < n; ++i) groups.push_back({i});

    while (groups.size() > 1) {
        double best_gain = 0.0;
        int best_a = -1, best_b = -1;
        for (size_t a = 0; a < groups.size(); ++a) {
            for (size_t b = a + 1; b < groups.size(); ++b) {
                double gain = 0.0;
                for (int i : groups[a])
                    for (int j : groups[b]) gain += s.at(std::min(i, j), std::max(i, j));
                if (gain > best_gain) {  // strict: first (lowest) pair wins ties
                    best_gain = gain;
                    best_a = static_cast<int>(a);
                    best_b = static_cast<int>(b);
                }
            }
        }
        if (best_a < 0) break;  // no positive-gain merge left
        auto& dst = groups[static_cast<size_t>(best_a)];
        auto& src = groups[static_cast<size_t>(best_b)];
        dst.insert(dst.end(), src.begin(), src.end());
        std::sort(dst.begin(), dst.end());
        groups.erase(groups.begin() + best_b);
    }
    std::sort(groups.begin(), groups.end(),
              [](const std::vector<int>& a, const std::vector<int>& b) { return a[0] < b[0]; });

    Partition p;
    p.groups = std::move(groups);
    p.objective = partition_objective(s, p.groups);
    return p;
}

Partition best_partition(const Tensor& s) {
    check_square_symmetric(s);
    if (s.rows() <= 12) return exhaustive_partition(s);
    return greedy_partition(s);
}

}  // namespace mmaptune
