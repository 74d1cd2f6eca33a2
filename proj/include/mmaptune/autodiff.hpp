#pragma once

#include "mmaptune/tensor.hpp"

#include <deque>
#include <functional>
#include <optional>

namespace mmaptune {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Value {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

/// Record of primitive applications in execution order. Creation order is a
/// topological order by construction; backward walks it in reverse with a
/// fixed accumulation order, so gradients are bit-reproducible.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Value leaf(Tensor t, bool trainable = true);
    Value constant(Tensor t) { return leaf(std::move(t), false); }

    const Tensor& value(Value v) const;
    /// Gradient of the last backward() loss w.r.t. this node. Zero tensor if
    /// the node was not reached.
    Tensor grad(Value v) const;
    bool trainable(Value v) const;

    /// Reverse-mode sweep from a scalar loss. Rejects non-scalar losses.
    void backward(Value loss);

    /// Re-executes every recorded primitive and compares against the stored
    /// values bit-for-bit.
    bool replay_matches() const;

    size_t node_count() const { return nodes_.size(); }

    // --- low-level interface used by the primitive implementations ---
    using Recompute = std::function<Tensor(const Tape&)>;
    using Backprop = std::function<void(Tape&, int self, const Tensor& out_grad)>;
    Value emit(const std::string& op, std::vector<int> parents, Recompute recompute,
               Backprop backprop);
    void add_grad(int id, const Tensor& delta);
    const Tensor& value_at(int id) const { return nodes_[static_cast<size_t>(id)].value; }

  private:
    struct Node {
        Tensor value;
        std::optional<Tensor> grad;
        bool trainable = false;
        std::string op;
        std::vector<int> parents;
        Recompute recompute;
        Backprop backprop;
    };
    std::deque<Node> nodes_;  // stable references across emit()
    void check(Value v) const;
};

// --- primitives -------------------------------------------------------------

Value matmul(Value a, Value b);
Value transpose(Value a);
Value add(Value a, Value b);                  // same shape (residual add)
Value mul(Value a, Value b);                  // elementwise, same shape
Value scale(Value a, double c);
Value bias_add(Value m, Value bias);          // rows of m + bias vector
Value gelu(Value x);
Value layer_norm(Value x, Value gamma, Value beta, double eps = 1e-5);
Value softmax(Value v);                       // 1-D
Value softmax_rows(Value m);                  // 2-D, per row
Value concat_rows(const std::vector<Value>& parts);
Value concat_cols(const std::vector<Value>& parts);
Value slice_rows(Value m, int begin, int count);
Value slice_cols(Value m, int begin, int count);
Value kron(Value a, Value b);
Value embed_rows(Value table, std::vector<int> ids);
Value sum_all(Value x);
Value mean_all(Value x);
/// Pairwise cosine similarities between rows of x (B x d) and rows of z
/// (C x d); zero-norm rows are a numeric error.
Value cosine_scores(Value x, Value z);
/// Mean negative log-softmax-likelihood of the labelled classes.
Value cross_entropy(Value logits, std::vector<int> labels);

/// Bidirectional multi-head attention over pre-projected q/k/v (S x d each),
/// composed from the primitives above.
Value multi_head_attention(Value q, Value k, Value v, int heads);

// --- gradient checking ------------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    int worst_param = -1;
    int64_t worst_coord = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Central-difference check of backward() against the loss built by `build`.
/// `build` must be a deterministic pure function of the leaf values; this is
/// verified by evaluating twice. Relative error per coordinate is
/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
GradCheckReport finite_diff_check(
    const std::function<Value(Tape&, const std::vector<Value>&)>& build,
    const std::vector<Tensor>& params, double eps);

}  // namespace mmaptune
