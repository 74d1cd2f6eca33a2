#include "mmaptune/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace mmaptune {

namespace {

void require_same_tape(Value a, Value b) {
    if (a.tape == nullptr || b.tape == nullptr || a.tape != b.tape) {
        throw ContractError("operands must live on the same tape");
    }
}

Tensor matmul_raw(const Tensor& a, const Tensor& b) {
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* arow = a.data() + static_cast<size_t>(i) * k;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    return out;
}

// a (m x k) times b^T where b is (n x k)
Tensor matmul_nt_raw(const Tensor& a, const Tensor& b) {
    const int m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* arow = a.data() + static_cast<size_t>(i) * k;
        double* orow = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b.data() + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            orow[j] = acc;
        }
    }
    return out;
}

// a^T (a is k x m) times b (k x n)
Tensor matmul_tn_raw(const Tensor& a, const Tensor& b) {
    const int k = a.rows(), m = a.cols(), n = b.cols();
    Tensor out({m, n});
    for (int p = 0; p < k; ++p) {
        const double* arow = a.data() + static_cast<size_t>(p) * m;
        const double* brow = b.data() + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* orow = out.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    return out;
}

Tensor transpose_raw(const Tensor& a) {
    const int r = a.rows(), c = a.cols();
    Tensor out({c, r});
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
            out.at(j, i) = a.at(i, j);
        }
    }
    return out;
}

// Shift-invariant softmax over one contiguous span.
void softmax_span(const double* in, double* out, int n) {
    double mx = in[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - mx);
        sum += out[i];
    }
    for (int i = 0; i < n; ++i) out[i] /= sum;
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

}  // namespace

// --- Tape -------------------------------------------------------------------

Value Tape::leaf(Tensor t, bool trainable) {
    if (t.empty()) {
        throw ShapeError("leaf: empty tensor");
    }
    Tensor copy = t;
    Value v = emit(trainable ? "leaf" : "const", {},
                   [copy](const Tape&) { return copy; }, nullptr);
    nodes_.back().trainable = trainable;
    return v;
}

Value Tape::emit(const std::string& op, std::vector<int> parents, Recompute recompute,
                 Backprop backprop) {
    Node node;
    node.op = op;
    node.parents = std::move(parents);
    node.recompute = std::move(recompute);
    node.backprop = std::move(backprop);
    node.value = node.recompute(*this);
    if (!node.value.all_finite()) {
        throw NumericError("non-finite value produced by " + op);
    }
    nodes_.push_back(std::move(node));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::check(Value v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
        throw ContractError("value does not belong to this tape");
    }
}

const Tensor& Tape::value(Value v) const {
    check(v);
    return nodes_[static_cast<size_t>(v.id)].value;
}

Tensor Tape::grad(Value v) const {
    check(v);
    const Node& n = nodes_[static_cast<size_t>(v.id)];
    return n.grad ? *n.grad : Tensor::zeros_like(n.value);
}

bool Tape::trainable(Value v) const {
    check(v);
    return nodes_[static_cast<size_t>(v.id)].trainable;
}

void Tape::add_grad(int id, const Tensor& delta) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!delta.same_shape(n.value)) {
        throw ContractError("gradient shape " + delta.shape_str() + " does not match value " +
                            n.value.shape_str() + " for " + n.op);
    }
    if (!n.grad) {
        n.grad = delta;
    } else {
        Tensor& g = *n.grad;
        for (int64_t i = 0; i < g.size(); ++i) g[i] += delta[i];
    }
}

void Tape::backward(Value loss) {
    check(loss);
    const Node& ln = nodes_[static_cast<size_t>(loss.id)];
    if (ln.value.size() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + ln.value.shape_str());
    }
    for (Node& n : nodes_) {
        n.grad.reset();
    }
    nodes_[static_cast<size_t>(loss.id)].grad = Tensor(ln.value.shape(), {1.0});
    // Reverse creation order is a reverse topological order.
    for (int id = loss.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.grad || !n.backprop) continue;
        n.backprop(*this, id, *n.grad);
    }
}

bool Tape::replay_matches() const {
    for (const Node& n : nodes_) {
        if (!n.recompute(*this).bit_equal(n.value)) {
            return false;
        }
    }
    return true;
}

// --- primitives -------------------------------------------------------------

Value matmul(Value a, Value b) {
    require_same_tape(a, b);
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    av.require_matrix("matmul lhs");
    bv.require_matrix("matmul rhs");
    if (av.cols() != bv.rows()) {
        throw ShapeError("matmul: inner dimensions " + av.shape_str() + " vs " + bv.shape_str());
    }
    const int aid = a.id, bid = b.id;
    return t.emit(
        "matmul", {aid, bid},
        [aid, bid](const Tape& tp) { return matmul_raw(tp.value_at(aid), tp.value_at(bid)); },
        [aid, bid](Tape& tp, int, const Tensor& g) {
            tp.add_grad(aid, matmul_nt_raw(g, tp.value_at(bid)));
            tp.add_grad(bid, matmul_tn_raw(tp.value_at(aid), g));
        });
}

Value transpose(Value a) {
    Tape& t = *a.tape;
    t.value(a).require_matrix("transpose");
    const int aid = a.id;
    return t.emit(
        "transpose", {aid},
        [aid](const Tape& tp) { return transpose_raw(tp.value_at(aid)); },
        [aid](Tape& tp, int, const Tensor& g) { tp.add_grad(aid, transpose_raw(g)); });
}

Value add(Value a, Value b) {
    require_same_tape(a, b);
    Tape& t = *a.tape;
    if (!t.value(a).same_shape(t.value(b))) {
        throw ShapeError("add: shape mismatch " + t.value(a).shape_str() + " vs " +
                         t.value(b).shape_str());
    }
    const int aid = a.id, bid = b.id;
    return t.emit(
        "add", {aid, bid},
        [aid, bid](const Tape& tp) {
            Tensor out = tp.value_at(aid);
            const Tensor& bv = tp.value_at(bid);
            for (int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
            return out;
        },
        [aid, bid](Tape& tp, int, const Tensor& g) {
            tp.add_grad(aid, g);
            tp.add_grad(bid, g);
        });
}

Value mul(Value a, Value b) {
    require_same_tape(a, b);
    Tape& t = *a.tape;
    if (!t.value(a).same_shape(t.value(b))) {
        throw ShapeError("mul: shape mismatch " + t.value(a).shape_str() + " vs " +
                         t.value(b).shape_str());
    }
    const int aid = a.id, bid = b.id;
    return t.emit(
        "mul", {aid, bid},
        [aid, bid](const Tape& tp) {
            Tensor out = tp.value_at(aid);
            const Tensor& bv = tp.value_at(bid);
            for (int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
            return out;
        },
        [aid, bid](Tape& tp, int, const Tensor& g) {
            const Tensor& av = tp.value_at(aid);
            const Tensor& bv = tp.value_at(bid);
            Tensor da = g, db = g;
            for (int64_t i = 0; i < g.size(); ++i) {
                da[i] = g[i] * bv[i];
                db[i] = g[i] * av[i];
            }
            tp.add_grad(aid, da);
            tp.add_grad(bid, db);
        });
}

Value scale(Value a, double c) {
    Tape& t = *a.tape;
    const int aid = a.id;
    return t.emit(
        "scale", {aid},
        [aid, c](const Tape& tp) {
            Tensor out = tp.value_at(aid);
            for (int64_t i = 0; i < out.size(); ++i) out[i] *= c;
            return out;
        },
        [aid, c](Tape& tp, int, const Tensor& g) {
            Tensor d = g;
            for (int64_t i = 0; i < d.size(); ++i) d[i] *= c;
            tp.add_grad(aid, d);
        });
}

Value bias_add(Value m, Value bias) {
    require_same_tape(m, bias);
    Tape& t = *m.tape;
    const Tensor& mv = t.value(m);
    const Tensor& bv = t.value(bias);
    mv.require_matrix("bias_add input");
    bv.require_vector("bias_add bias");
    if (mv.cols() != bv.dim(0)) {
        throw ShapeError("bias_add: width " + mv.shape_str() + " vs bias " + bv.shape_str());
    }
    const int mid = m.id, bid = bias.id;
    return t.emit(
        "bias_add", {mid, bid},
        [mid, bid](const Tape& tp) {
            Tensor out = tp.value_at(mid);
            const Tensor& b = tp.value_at(bid);
            const int c = out.cols();
            for (int r = 0; r < out.rows(); ++r) {
                for (int j = 0; j < c; ++j) out.at(r, j) += b[j];
            }
            return out;
        },
        [mid, bid](Tape& tp, int, const Tensor& g) {
            tp.add_grad(mid, g);
            Tensor db({g.cols()});
            for (int r = 0; r < g.rows(); ++r) {
                for (int j = 0; j < g.cols(); ++j) db[j] += g.at(r, j);
            }
            tp.add_grad(bid, db);
        });
}

Value gelu(Value x) {
    Tape& t = *x.tape;
    const int xid = x.id;
    return t.emit(
        "gelu", {xid},
        [xid](const Tape& tp) {
            Tensor out = tp.value_at(xid);
            for (int64_t i = 0; i < out.size(); ++i) out[i] = gelu_scalar(out[i]);
            return out;
        },
        [xid](Tape& tp, int, const Tensor& g) {
            const Tensor& xv = tp.value_at(xid);
            Tensor d = g;
            for (int64_t i = 0; i < d.size(); ++i) d[i] = g[i] * gelu_grad_scalar(xv[i]);
            tp.add_grad(xid, d);
        });
}

Value layer_norm(Value x, Value gamma, Value beta, double eps) {
    require_same_tape(x, gamma);
    require_same_tape(x, beta);
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    xv.require_matrix("layer_norm input");
    t.value(gamma).require_vector("layer_norm gamma");
    t.value(beta).require_vector("layer_norm beta");
    if (t.value(gamma).dim(0) != xv.cols() || t.value(beta).dim(0) != xv.cols()) {
        throw ShapeError("layer_norm: affine width does not match input " + xv.shape_str());
    }
    const int xid = x.id, gid = gamma.id, bid = beta.id;
    auto row_stats = [](const Tensor& in, int r, int d, double eps_) {
        const double* row = in.data() + static_cast<size_t>(r) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= d;
        return std::pair<double, double>(mean, std::sqrt(var + eps_));
    };
    return t.emit(
        "layer_norm", {xid, gid, bid},
        [xid, gid, bid, eps, row_stats](const Tape& tp) {
            const Tensor& in = tp.value_at(xid);
            const Tensor& gm = tp.value_at(gid);
            const Tensor& bt = tp.value_at(bid);
            const int d = in.cols();
            Tensor out({in.rows(), d});
            for (int r = 0; r < in.rows(); ++r) {
                auto [mean, stddev] = row_stats(in, r, d, eps);
                for (int j = 0; j < d; ++j) {
                    out.at(r, j) = (in.at(r, j) - mean) / stddev * gm[j] + bt[j];
                }
            }
            return out;
        },
        [xid, gid, bid, eps, row_stats](Tape& tp, int, const Tensor& g) {
            const Tensor& in = tp.value_at(xid);
            const Tensor& gm = tp.value_at(gid);
            const int d = in.cols();
            Tensor dx({in.rows(), d});
            Tensor dgamma({d});
            Tensor dbeta({d});
            std::vector<double> xhat(static_cast<size_t>(d));
            for (int r = 0; r < in.rows(); ++r) {
                auto [mean, stddev] = row_stats(in, r, d, eps);
                double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                for (int j = 0; j < d; ++j) {
                    xhat[static_cast<size_t>(j)] = (in.at(r, j) - mean) / stddev;
                    const double dxh = g.at(r, j) * gm[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xhat[static_cast<size_t>(j)];
                }
                mean_dxh /= d;
                mean_dxh_xh /= d;
                for (int j = 0; j < d; ++j) {
                    const double xh = xhat[static_cast<size_t>(j)];
                    const double dxh = g.at(r, j) * gm[j];
                    dx.at(r, j) = (dxh - mean_dxh - xh * mean_dxh_xh) / stddev;
                    dgamma[j] += g.at(r, j) * xh;
                    dbeta[j] += g.at(r, j);
                }
            }
            tp.add_grad(xid, dx);
            tp.add_grad(gid, dgamma);
            tp.add_grad(bid, dbeta);
        });
}

namespace {

// Shared forward/backward for vector softmax and row softmax.
Tensor softmax_forward(const Tensor& in) {
    Tensor out = in;
    if (in.rank() == 1) {
        softmax_span(in.data(), out.data(), static_cast<int>(in.size()));
    } else {
        for (int r = 0; r < in.rows(); ++r) {
            softmax_span(in.data() + static_cast<size_t>(r) * in.cols(),
                         out.data() + static_cast<size_t>(r) * in.cols(), in.cols());
        }
    }
    return out;
}

Tensor softmax_backward(const Tensor& y, const Tensor& g) {
    Tensor dx = g;
    const int cols = y.rank() == 1 ? static_cast<int>(y.size()) : y.cols();
    const int rows = y.rank() == 1 ? 1 : y.rows();
    for (int r = 0; r < rows; ++r) {
        const double* yr = y.data() + static_cast<size_t>(r) * cols;
        const double* gr = g.data() + static_cast<size_t>(r) * cols;
        double* dr = dx.data() + static_cast<size_t>(r) * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += yr[j] * gr[j];
        for (int j = 0; j < cols; ++j) dr[j] = yr[j] * (gr[j] - dot);
    }
    return dx;
}

Value softmax_impl(Value v, const char* name, int want_rank) {
    Tape& t = *v.tape;
    const Tensor& in = t.value(v);
    if (in.rank() != want_rank) {
        throw ShapeError(std::string(name) + ": expected rank " + std::to_string(want_rank) +
                         ", got shape " + in.shape_str());
    }
    const int vid = v.id;
    return t.emit(
        name, {vid},
        [vid](const Tape& tp) { return softmax_forward(tp.value_at(vid)); },
        [vid](Tape& tp, int self, const Tensor& g) {
            tp.add_grad(vid, softmax_backward(tp.value_at(self), g));
        });
}

}  // namespace

Value softmax(Value v) { return softmax_impl(v, "softmax", 1); }
Value softmax_rows(Value m) { return softmax_impl(m, "softmax_rows", 2); }

Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_rows: no inputs");
    }
    Tape& t = *parts[0].tape;
    int total_rows = 0;
    const int cols = t.value(parts[0]).cols();
    std::vector<int> ids;
    for (Value p : parts) {
        require_same_tape(parts[0], p);
        const Tensor& pv = t.value(p);
        pv.require_matrix("concat_rows part");
        if (pv.cols() != cols) {
            throw ShapeError("concat_rows: column mismatch");
        }
        total_rows += pv.rows();
        ids.push_back(p.id);
    }
    return t.emit(
        "concat_rows", ids,
        [ids, total_rows, cols](const Tape& tp) {
            Tensor out({total_rows, cols});
            int at = 0;
            for (int id : ids) {
                const Tensor& pv = tp.value_at(id);
                std::memcpy(out.data() + static_cast<size_t>(at) * cols, pv.data(),
                            static_cast<size_t>(pv.size()) * sizeof(double));
                at += pv.rows();
            }
            return out;
        },
        [ids, cols](Tape& tp, int, const Tensor& g) {
            int at = 0;
            for (int id : ids) {
                const Tensor& pv = tp.value_at(id);
                Tensor part({pv.rows(), cols});
                std::memcpy(part.data(), g.data() + static_cast<size_t>(at) * cols,
                            static_cast<size_t>(part.size()) * sizeof(double));
                tp.add_grad(id, part);
                at += pv.rows();
            }
        });
}

Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) {
        throw ContractError("concat_cols: no inputs");
    }
    Tape& t = *parts[0].tape;
    const int rows = t.value(parts[0]).rows();
    int total_cols = 0;
    std::vector<int> ids;
    for (Value p : parts) {
        require_same_tape(parts[0], p);
        const Tensor& pv = t.value(p);
        pv.require_matrix("concat_cols part");
        if (pv.rows() != rows) {
            throw ShapeError("concat_cols: row mismatch");
        }
        total_cols += pv.cols();
        ids.push_back(p.id);
    }
    return t.emit(
        "concat_cols", ids,
        [ids, rows, total_cols](const Tape& tp) {
            Tensor out({rows, total_cols});
            int at = 0;
            for (int id : ids) {
                const Tensor& pv = tp.value_at(id);
                for (int r = 0; r < rows; ++r) {
                    std::memcpy(out.data() + static_cast<size_t>(r) * total_cols + at,
                                pv.data() + static_cast<size_t>(r) * pv.cols(),
                                static_cast<size_t>(pv.cols()) * sizeof(double));
                }
                at += pv.cols();
            }
            return out;
        },
        [ids, rows](Tape& tp, int, const Tensor& g) {
            int at = 0;
            for (int id : ids) {
                const Tensor& pv = tp.value_at(id);
                Tensor part({rows, pv.cols()});
                for (int r = 0; r < rows; ++r) {
                    std::memcpy(part.data() + static_cast<size_t>(r) * pv.cols(),
                                g.data() + static_cast<size_t>(r) * g.cols() + at,
                                static_cast<size_t>(pv.cols()) * sizeof(double));
                }
                tp.add_grad(id, part);
                at += pv.cols();
            }
        });
}

Value slice_rows(Value m, int begin, int count) {
    Tape& t = *m.tape;
    const Tensor& mv = t.value(m);
    mv.require_matrix("slice_rows");
    if (begin < 0 || count <= 0 || begin + count > mv.rows()) {
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " + mv.shape_str());
    }
    const int mid = m.id, cols = mv.cols();
    return t.emit(
        "slice_rows", {mid},
        [mid, begin, count, cols](const Tape& tp) {
            Tensor out({count, cols});
            std::memcpy(out.data(), tp.value_at(mid).data() + static_cast<size_t>(begin) * cols,
                        static_cast<size_t>(out.size()) * sizeof(double));
            return out;
        },
        [mid, begin, cols](Tape& tp, int, const Tensor& g) {
            Tensor d = Tensor::zeros_like(tp.value_at(mid));
            std::memcpy(d.data() + static_cast<size_t>(begin) * cols, g.data(),
                        static_cast<size_t>(g.size()) * sizeof(double));
            tp.add_grad(mid, d);
        });
}

Value slice_cols(Value m, int begin, int count) {
    Tape& t = *m.tape;
    const Tensor& mv = t.value(m);
    mv.require_matrix("slice_cols");
    if (begin < 0 || count <= 0 || begin + count > mv.cols()) {
        throw ShapeError("slice_cols: range out of " + mv.shape_str());
    }
    const int mid = m.id, rows = mv.rows();
    return t.emit(
        "slice_cols", {mid},
        [mid, begin, count, rows](const Tape& tp) {
            const Tensor& in = tp.value_at(mid);
            Tensor out({rows, count});
            for (int r = 0; r < rows; ++r) {
                std::memcpy(out.data() + static_cast<size_t>(r) * count,
                            in.data() + static_cast<size_t>(r) * in.cols() + begin,
                            static_cast<size_t>(count) * sizeof(double));
            }
            return out;
        },
        [mid, begin, rows](Tape& tp, int, const Tensor& g) {
            Tensor d = Tensor::zeros_like(tp.value_at(mid));
            for (int r = 0; r < rows; ++r) {
                std::memcpy(d.data() + static_cast<size_t>(r) * d.cols() + begin,
                            g.data() + static_cast<size_t>(r) * g.cols(),
                            static_cast<size_t>(g.cols()) * sizeof(double));
            }
            tp.add_grad(mid, d);
        });
}

Value kron(Value a, Value b) {
    require_same_tape(a, b);
    Tape& t = *a.tape;
    t.value(a).require_matrix("kron lhs");
    t.value(b).require_matrix("kron rhs");
    const int aid = a.id, bid = b.id;
    return t.emit(
        "kron", {aid, bid},
        [aid, bid](const Tape& tp) { return kron(tp.value_at(aid), tp.value_at(bid)); },
        [aid, bid](Tape& tp, int, const Tensor& g) {
            const Tensor& av = tp.value_at(aid);
            const Tensor& bv = tp.value_at(bid);
            const int p = av.rows(), q = av.cols(), r = bv.rows(), s = bv.cols();
            Tensor da({p, q});
            Tensor db({r, s});
            for (int i = 0; i < p; ++i) {
                for (int j = 0; j < q; ++j) {
                    double acc = 0.0;
                    for (int k = 0; k < r; ++k) {
                        for (int l = 0; l < s; ++l) {
                            const double gv = g.at(i * r + k, j * s + l);
                            acc += gv * bv.at(k, l);
                            db.at(k, l) += gv * av.at(i, j);
                        }
                    }
                    da.at(i, j) = acc;
                }
            }
            tp.add_grad(aid, da);
            tp.add_grad(bid, db);
        });
}

Value embed_rows(Value table, std::vector<int> ids) {
    Tape& t = *table.tape;
    const Tensor& tv = t.value(table);
    tv.require_matrix("embed_rows table");
    if (ids.empty()) {
        throw ShapeError("embed_rows: empty id list");
    }
    for (int id : ids) {
        if (id < 0 || id >= tv.rows()) {
            throw DataError("embed_rows: id " + std::to_string(id) + " out of table " +
                            tv.shape_str());
        }
    }
    const int tid = table.id, cols = tv.cols();
    return t.emit(
        "embed_rows", {tid},
        [tid, ids, cols](const Tape& tp) {
            const Tensor& tab = tp.value_at(tid);
            Tensor out({static_cast<int>(ids.size()), cols});
            for (size_t r = 0; r < ids.size(); ++r) {
                std::memcpy(out.data() + r * cols,
                            tab.data() + static_cast<size_t>(ids[r]) * cols,
                            static_cast<size_t>(cols) * sizeof(double));
            }
            return out;
        },
        [tid, ids, cols](Tape& tp, int, const Tensor& g) {
            Tensor d = Tensor::zeros_like(tp.value_at(tid));
            for (size_t r = 0; r < ids.size(); ++r) {
                for (int j = 0; j < cols; ++j) {
                    d.at(ids[r], j) += g.at(static_cast<int>(r), j);
                }
            }
            tp.add_grad(tid, d);
        });
}

Value sum_all(Value x) {
    Tape& t = *x.tape;
    const int xid = x.id;
    return t.emit(
        "sum_all", {xid},
        [xid](const Tape& tp) {
            const Tensor& in = tp.value_at(xid);
            double acc = 0.0;
            for (int64_t i = 0; i < in.size(); ++i) acc += in[i];
            return Tensor::scalar(acc);
        },
        [xid](Tape& tp, int, const Tensor& g) {
            Tensor d = Tensor::zeros_like(tp.value_at(xid));
            for (int64_t i = 0; i < d.size(); ++i) d[i] = g[0];
            tp.add_grad(xid, d);
        });
}

Value mean_all(Value x) {
    Tape& t = *x.tape;
    const double n = static_cast<double>(t.value(x).size());
    return scale(sum_all(x), 1.0 / n);
}

Value cosine_scores(Value x, Value z) {
    require_same_tape(x, z);
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    const Tensor& zv = t.value(z);
    xv.require_matrix("cosine_scores lhs");
    zv.require_matrix("cosine_scores rhs");
    if (xv.cols() != zv.cols()) {
        throw ShapeError("cosine_scores: width mismatch " + xv.shape_str() + " vs " +
                         zv.shape_str());
    }
    auto norms = [](const Tensor& m) {
        std::vector<double> out(static_cast<size_t>(m.rows()));
        for (int r = 0; r < m.rows(); ++r) {
            double acc = 0.0;
            for (int j = 0; j < m.cols(); ++j) acc += m.at(r, j) * m.at(r, j);
            out[static_cast<size_t>(r)] = std::sqrt(acc);
            if (out[static_cast<size_t>(r)] == 0.0) {
                throw NumericError("cosine_scores: zero-norm row");
            }
        }
        return out;
    };
    const int xid = x.id, zid = z.id;
    return t.emit(
        "cosine_scores", {xid, zid},
        [xid, zid, norms](const Tape& tp) {
            const Tensor& xm = tp.value_at(xid);
            const Tensor& zm = tp.value_at(zid);
            const auto nx = norms(xm), nz = norms(zm);
            Tensor out({xm.rows(), zm.rows()});
            for (int i = 0; i < xm.rows(); ++i) {
                for (int j = 0; j < zm.rows(); ++j) {
                    double dot = 0.0;
                    for (int c = 0; c < xm.cols(); ++c) dot += xm.at(i, c) * zm.at(j, c);
                    out.at(i, j) = dot / (nx[static_cast<size_t>(i)] * nz[static_cast<size_t>(j)]);
                }
            }
            return out;
        },
        [xid, zid, norms](Tape& tp, int self, const Tensor& g) {
            const Tensor& xm = tp.value_at(xid);
            const Tensor& zm = tp.value_at(zid);
            const Tensor& cos = tp.value_at(self);
            const auto nx = norms(xm), nz = norms(zm);
            Tensor dx = Tensor::zeros_like(xm);
            Tensor dz = Tensor::zeros_like(zm);
            const int d = xm.cols();
            for (int i = 0; i < xm.rows(); ++i) {
                for (int j = 0; j < zm.rows(); ++j) {
                    const double gv = g.at(i, j);
                    if (gv == 0.0) continue;
                    const double cij = cos.at(i, j);
                    const double ni = nx[static_cast<size_t>(i)], nj = nz[static_cast<size_t>(j)];
                    for (int c = 0; c < d; ++c) {
                        const double xh = xm.at(i, c) / ni;
                        const double zh = zm.at(j, c) / nj;
                        dx.at(i, c) += gv * (zh - cij * xh) / ni;
                        dz.at(j, c) += gv * (xh - cij * zh) / nj;
                    }
                }
            }
            tp.add_grad(xid, dx);
            tp.add_grad(zid, dz);
        });
}

Value cross_entropy(Value logits, std::vector<int> labels) {
    Tape& t = *logits.tape;
    const Tensor& lv = t.value(logits);
    lv.require_matrix("cross_entropy logits");
    if (static_cast<int>(labels.size()) != lv.rows()) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         lv.shape_str() + " logits");
    }
    for (int y : labels) {
        if (y < 0 || y >= lv.cols()) {
            throw DataError("cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                            std::to_string(lv.cols()) + ")");
        }
    }
    const int lid = logits.id;
    return t.emit(
        "cross_entropy", {lid},
        [lid, labels](const Tape& tp) {
            const Tensor& lm = tp.value_at(lid);
            const Tensor probs = softmax_forward(lm);
            double acc = 0.0;
            for (int r = 0; r < lm.rows(); ++r) {
                acc -= std::log(probs.at(r, labels[static_cast<size_t>(r)]));
            }
            return Tensor::scalar(acc / lm.rows());
        },
        [lid, labels](Tape& tp, int, const Tensor& g) {
            const Tensor& lm = tp.value_at(lid);
            Tensor d = softmax_forward(lm);
            const double s = g[0] / lm.rows();
            for (int r = 0; r < lm.rows(); ++r) {
                d.at(r, labels[static_cast<size_t>(r)]) -= 1.0;
                for (int j = 0; j < lm.cols(); ++j) d.at(r, j) *= s;
            }
            tp.add_grad(lid, d);
        });
}

Value multi_head_attention(Value q, Value k, Value v, int heads) {
    require_same_tape(q, k);
    require_same_tape(q, v);
    Tape& t = *q.tape;
    const Tensor& qv = t.value(q);
    qv.require_matrix("attention q");
    t.value(k).require_matrix("attention k");
    t.value(v).require_matrix("attention v");
    if (!qv.same_shape(t.value(k)) || !qv.same_shape(t.value(v))) {
        throw ShapeError("attention: q/k/v shapes must match");
    }
    if (heads <= 0 || qv.cols() % heads != 0) {
        throw ShapeError("attention: head count " + std::to_string(heads) +
                         " must divide width " + std::to_string(qv.cols()));
    }
    const int head_dim = qv.cols() / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<Value> outputs;
    outputs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Value qh = slice_cols(q, h * head_dim, head_dim);
        Value kh = slice_cols(k, h * head_dim, head_dim);
        Value vh = slice_cols(v, h * head_dim, head_dim);
        Value weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
        outputs.push_back(matmul(weights, vh));
    }
    return heads == 1 ? outputs[0] : concat_cols(outputs);
}

// --- gradient checking ------------------------------------------------------

GradCheckReport finite_diff_check(
    const std::function<Value(Tape&, const std::vector<Value>&)>& build,
    const std::vector<Tensor>& params, double eps) {
    if (!(eps > 0.0)) {
        throw ContractError("finite_diff_check: eps must be positive");
    }
    auto eval = [&](const std::vector<Tensor>& p) {
        Tape tape;
        std::vector<Value> leaves;
        leaves.reserve(p.size());
        for (const Tensor& t : p) leaves.push_back(tape.leaf(t, true));
        Value loss = build(tape, leaves);
        const Tensor& lv = tape.value(loss);
        if (lv.size() != 1) {
            throw ContractError("finite_diff_check: loss must be scalar");
        }
        return lv[0];
    };
    const double l0 = eval(params);
    const double l1 = eval(params);
    if (std::memcmp(&l0, &l1, sizeof(double)) != 0) {
        throw ContractError("finite_diff_check: loss function is not deterministic");
    }

    Tape tape;
    std::vector<Value> leaves;
    for (const Tensor& t : params) leaves.push_back(tape.leaf(t, true));
    Value loss = build(tape, leaves);
    tape.backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(leaves.size());
    for (Value leaf : leaves) analytic.push_back(tape.grad(leaf));

    GradCheckReport report;
    std::vector<Tensor> work = params;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        for (int64_t i = 0; i < params[pi].size(); ++i) {
            const double orig = work[pi][i];
            work[pi][i] = orig + eps;
            const double lp = eval(work);
            work[pi][i] = orig - eps;
            const double lm = eval(work);
            work[pi][i] = orig;
            const double numeric = (lp - lm) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double rel = std::abs(a - numeric) /
                               std::max(1e-8, std::abs(a) + std::abs(numeric));
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = static_cast<int>(pi);
                report.worst_coord = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace mmaptune
