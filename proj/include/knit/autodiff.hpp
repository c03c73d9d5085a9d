// Reverse-mode automatic differentiation over dense tensors.
//
// A Graph is built eagerly (define-by-run): every op computes its value at
// construction and records a backward closure. Creation order is a valid
// topological order, so backward() is a single reverse sweep. Reduction
// order inside every kernel is fixed, which keeps repeated runs bit-identical.
//
// Parameters live outside graphs in a ParamStore; ops that consume a
// parameter accumulate straight into its gradient slot on backward.
#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "knit/rng.hpp"
#include "knit/tensor.hpp"

namespace knit {

// Additive attention-mask sentinel standing in for -inf. Applied before
// exponentiation; exact zeros in the output are enforced by the boolean
// visibility pattern, not by underflow.
template <typename S>
inline constexpr S kMaskedSentinel = S(-1e9);

template <typename S>
struct Param {
    std::string name;
    Tensor<S> value;
    Tensor<S> grad;
    // Adam slots, managed by the optimizer.
    Tensor<S> adam_m;
    Tensor<S> adam_v;

    void zero_grad() { grad.zero(); }
};

// Named parameters in fixed creation order. The order drives both
// deterministic initialization and the checkpoint layout.
template <typename S>
class ParamStore {
public:
    Param<S>& create(const std::string& name, int r, int c) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        auto p = std::make_unique<Param<S>>();
        p->name = name;
        p->value = Tensor<S>(r, c);
        p->grad = Tensor<S>(r, c);
        p->adam_m = Tensor<S>(r, c);
        p->adam_v = Tensor<S>(r, c);
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return *params_.back();
    }

    Param<S>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
        return *params_[it->second];
    }

    const Param<S>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
        return *params_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return params_.size(); }
    Param<S>& at(std::size_t i) { return *params_[i]; }
    const Param<S>& at(std::size_t i) const { return *params_[i]; }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    std::size_t value_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

    // Order-sensitive FNV hash of raw parameter bytes; used by the
    // frozen-model guarantees in probes and diffmask.
    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : params_) {
            for (S x : p->value.v) {
                const auto* bytes = reinterpret_cast<const unsigned char*>(&x);
                for (std::size_t b = 0; b < sizeof(S); ++b) {
                    h ^= bytes[b];
                    h *= 0x100000001b3ULL;
                }
            }
        }
        return h;
    }

    template <typename T>
    void copy_cast_from(const ParamStore<T>& other) {
        if (other.size() != size()) throw std::invalid_argument("param store size mismatch");
        for (std::size_t i = 0; i < size(); ++i)
            params_[i]->value = other.at(i).value.template cast<S>();
    }

private:
    std::vector<std::unique_ptr<Param<S>>> params_;
    std::map<std::string, std::size_t> index_;
};

namespace kernels {

// C[n,m] += A[n,k] * B[k,m]
template <typename S>
void mm_nn_acc(const S* A, const S* B, S* C, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const S* a = A + static_cast<std::size_t>(i) * k;
        S* c = C + static_cast<std::size_t>(i) * m;
        for (int kk = 0; kk < k; ++kk) {
            const S av = a[kk];
            const S* b = B + static_cast<std::size_t>(kk) * m;
            for (int j = 0; j < m; ++j) c[j] += av * b[j];
        }
    }
}

// C[n,m] += A[n,k] * B[m,k]^T
template <typename S>
void mm_nt_acc(const S* A, const S* B, S* C, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const S* a = A + static_cast<std::size_t>(i) * k;
        S* c = C + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const S* b = B + static_cast<std::size_t>(j) * k;
            S acc = S(0);
            for (int kk = 0; kk < k; ++kk) acc += a[kk] * b[kk];
            c[j] += acc;
        }
    }
}

// C[k,m] += A[n,k]^T * B[n,m]
template <typename S>
void mm_tn_acc(const S* A, const S* B, S* C, int n, int k, int m) {
    for (int i = 0; i < n; ++i) {
        const S* a = A + static_cast<std::size_t>(i) * k;
        const S* b = B + static_cast<std::size_t>(i) * m;
        for (int kk = 0; kk < k; ++kk) {
            const S av = a[kk];
            S* c = C + static_cast<std::size_t>(kk) * m;
            for (int j = 0; j < m; ++j) c[j] += av * b[j];
        }
    }
}

} // namespace kernels

template <typename S>
class Graph {
public:
    using NodeId = int;

    struct Node {
        Tensor<S> val;
        Tensor<S> grad;
        std::function<void()> back;
        bool needs_grad = false;
    };

    NodeId leaf(Tensor<S> t, bool needs_grad = false) {
        Node n;
        n.val = std::move(t);
        n.needs_grad = needs_grad;
        return push(std::move(n));
    }

    const Tensor<S>& val(NodeId id) const { return nodes_[id].val; }
    Tensor<S>& grad(NodeId id) { return ensure_grad(id); }
    S val_scalar(NodeId id) const {
        if (!nodes_[id].val.is_scalar()) throw std::logic_error("node is not scalar");
        return nodes_[id].val.v[0];
    }

    // ---- parameter-consuming ops ------------------------------------

    // Gathers rows of a parameter table: out[i,:] = table[ids[i],:].
    NodeId rows_of(Param<S>& table, std::vector<int> ids) {
        const int d = table.value.cols();
        Node n;
        n.val = Tensor<S>(static_cast<int>(ids.size()), d);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= table.value.rows())
                throw std::out_of_range("row index out of range in rows_of");
            std::copy_n(table.value.row_ptr(ids[i]), d, n.val.row_ptr(static_cast<int>(i)));
        }
        n.needs_grad = true;
        NodeId id = push(std::move(n));
        Node* self = &nodes_[id];
        auto idx = std::move(ids);
        self->back = [this, self, &table, idx, d]() {
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const S* g = self->grad.row_ptr(static_cast<int>(i));
                S* dst = table.grad.row_ptr(idx[i]);
                for (int j = 0; j < d; ++j) dst[j] += g[j];
            }
        };
        return id;
    }

    // y = x * W + b, with W[k,m] and optional bias b[1,m].
    NodeId linear(NodeId x, Param<S>& W, Param<S>* b = nullptr) {
        const Node& xn = nodes_[x];
        const int n = xn.val.rows(), k = xn.val.cols(), m = W.value.cols();
        if (W.value.rows() != k) throw std::invalid_argument("linear: shape mismatch");
        Node nd;
        nd.val = Tensor<S>(n, m);
        kernels::mm_nn_acc(xn.val.v.data(), W.value.v.data(), nd.val.v.data(), n, k, m);
        if (b) {
            if (b->value.cols() != m) throw std::invalid_argument("linear: bias mismatch");
            for (int i = 0; i < n; ++i) {
                S* row = nd.val.row_ptr(i);
                for (int j = 0; j < m; ++j) row[j] += b->value.v[j];
            }
        }
        nd.needs_grad = true;
        NodeId id = push(std::move(nd));
        Node* self = &nodes_[id];
        Node* xp = &nodes_[x];
        bool xg = xp->needs_grad;
        self->back = [this, self, xp, &W, b, x, xg, n, k, m]() {
            if (xg)
                kernels::mm_nt_acc(self->grad.v.data(), W.value.v.data(),
                                   ensure_grad_ptr(x)->v.data(), n, m, k);
            kernels::mm_tn_acc(xp->val.v.data(), self->grad.v.data(), W.grad.v.data(), n, k, m);
            if (b) {
                for (int i = 0; i < n; ++i) {
                    const S* g = self->grad.row_ptr(i);
                    for (int j = 0; j < m; ++j) b->grad.v[j] += g[j];
                }
            }
        };
        return id;
    }

    // y = x * gamma + beta rowwise after per-row standardization.
    NodeId layer_norm(NodeId x, Param<S>& gamma, Param<S>& beta, S eps) {
        const Node& xn = nodes_[x];
        const int n = xn.val.rows(), d = xn.val.cols();
        Node nd;
        nd.val = Tensor<S>(n, d);
        Tensor<S> xhat(n, d);
        std::vector<S> inv_sigma(n);
        for (int i = 0; i < n; ++i) {
            const S* row = xn.val.row_ptr(i);
            S mu = S(0);
            for (int j = 0; j < d; ++j) mu += row[j];
            mu /= S(d);
            S var = S(0);
            for (int j = 0; j < d; ++j) {
                const S c = row[j] - mu;
                var += c * c;
            }
            var /= S(d);
            const S is = S(1) / std::sqrt(var + eps);
            inv_sigma[i] = is;
            S* xh = xhat.row_ptr(i);
            S* out = nd.val.row_ptr(i);
            for (int j = 0; j < d; ++j) {
                xh[j] = (row[j] - mu) * is;
                out[j] = xh[j] * gamma.value.v[j] + beta.value.v[j];
            }
        }
        nd.needs_grad = true;
        NodeId id = push(std::move(nd));
        Node* self = &nodes_[id];
        bool xg = nodes_[x].needs_grad;
        auto xh = std::make_shared<Tensor<S>>(std::move(xhat));
        auto isg = std::make_shared<std::vector<S>>(std::move(inv_sigma));
        self->back = [this, self, &gamma, &beta, x, xg, xh, isg, n, d]() {
            for (int i = 0; i < n; ++i) {
                const S* g = self->grad.row_ptr(i);
                const S* xr = xh->row_ptr(i);
                for (int j = 0; j < d; ++j) {
                    gamma.grad.v[j] += g[j] * xr[j];
                    beta.grad.v[j] += g[j];
                }
                if (xg) {
                    S mean_h = S(0), mean_hx = S(0);
                    for (int j = 0; j < d; ++j) {
                        const S h = g[j] * gamma.value.v[j];
                        mean_h += h;
                        mean_hx += h * xr[j];
                    }
                    mean_h /= S(d);
                    mean_hx /= S(d);
                    S* dx = ensure_grad_ptr(x)->row_ptr(i);
                    const S is = (*isg)[i];
                    for (int j = 0; j < d; ++j) {
                        const S h = g[j] * gamma.value.v[j];
                        dx[j] += (h - mean_h - xr[j] * mean_hx) * is;
                    }
                }
            }
        };
        return id;
    }

    // out[i,:] = col[i] * rowvec (rowvec is a [1,d] parameter).
    NodeId outer_rowvec(NodeId col, Param<S>& rowvec) {
        const Node& cn = nodes_[col];
        if (cn.val.cols() != 1) throw std::invalid_argument("outer_rowvec: col must be [n,1]");
        const int n = cn.val.rows(), d = rowvec.value.cols();
        Node nd;
        nd.val = Tensor<S>(n, d);
        for (int i = 0; i < n; ++i) {
            const S c = cn.val.v[i];
            S* out = nd.val.row_ptr(i);
            for (int j = 0; j < d; ++j) out[j] = c * rowvec.value.v[j];
        }
        nd.needs_grad = true;
        NodeId id = push(std::move(nd));
        Node* self = &nodes_[id];
        Node* cp = &nodes_[col];
        bool cg = cp->needs_grad;
        self->back = [this, self, cp, &rowvec, col, cg, n, d]() {
            for (int i = 0; i < n; ++i) {
                const S* g = self->grad.row_ptr(i);
                const S c = cp->val.v[i];
                for (int j = 0; j < d; ++j) rowvec.grad.v[j] += c * g[j];
                if (cg) {
                    S acc = S(0);
                    for (int j = 0; j < d; ++j) acc += g[j] * rowvec.value.v[j];
                    ensure_grad_ptr(col)->v[i] += acc;
                }
            }
        };
        return id;
    }

    // ---- node-to-node ops --------------------------------------------

    NodeId matmul_nn(NodeId a, NodeId b) {
        const Node& an = nodes_[a];
        const Node& bn = nodes_[b];
        const int n = an.val.rows(), k = an.val.cols(), m = bn.val.cols();
        if (bn.val.rows() != k) throw std::invalid_argument("matmul_nn: shape mismatch");
        Node nd;
        nd.val = Tensor<S>(n, m);
        kernels::mm_nn_acc(an.val.v.data(), bn.val.v.data(), nd.val.v.data(), n, k, m);
        nd.needs_grad = an.needs_grad || bn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        self->back = [this, self, a, b, n, k, m]() {
            Node& an2 = nodes_[a];
            Node& bn2 = nodes_[b];
            if (an2.needs_grad)
                kernels::mm_nt_acc(self->grad.v.data(), bn2.val.v.data(),
                                   ensure_grad_ptr(a)->v.data(), n, m, k);
            if (bn2.needs_grad)
                kernels::mm_tn_acc(an2.val.v.data(), self->grad.v.data(),
                                   ensure_grad_ptr(b)->v.data(), n, k, m);
        };
        return id;
    }

    // a[n,k] * b[m,k]^T -> [n,m]
    NodeId matmul_nt(NodeId a, NodeId b) {
        const Node& an = nodes_[a];
        const Node& bn = nodes_[b];
        const int n = an.val.rows(), k = an.val.cols(), m = bn.val.rows();
        if (bn.val.cols() != k) throw std::invalid_argument("matmul_nt: shape mismatch");
        Node nd;
        nd.val = Tensor<S>(n, m);
        kernels::mm_nt_acc(an.val.v.data(), bn.val.v.data(), nd.val.v.data(), n, k, m);
        nd.needs_grad = an.needs_grad || bn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        self->back = [this, self, a, b, n, k, m]() {
            Node& an2 = nodes_[a];
            Node& bn2 = nodes_[b];
            // dA += G * B ; dB += G^T * A
            if (an2.needs_grad)
                kernels::mm_nn_acc(self->grad.v.data(), bn2.val.v.data(),
                                   ensure_grad_ptr(a)->v.data(), n, m, k);
            if (bn2.needs_grad)
                kernels::mm_tn_acc(self->grad.v.data(), an2.val.v.data(),
                                   ensure_grad_ptr(b)->v.data(), n, m, k);
        };
        return id;
    }

    NodeId add(NodeId a, NodeId b) {
        const Node& an = nodes_[a];
        const Node& bn = nodes_[b];
        if (!an.val.same_shape(bn.val)) throw std::invalid_argument("add: shape mismatch");
        Node nd;
        nd.val = an.val;
        for (std::size_t i = 0; i < nd.val.v.size(); ++i) nd.val.v[i] += bn.val.v[i];
        nd.needs_grad = an.needs_grad || bn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        self->back = [this, self, a, b]() {
            accumulate(a, self->grad);
            accumulate(b, self->grad);
        };
        return id;
    }

    NodeId mul(NodeId a, NodeId b) {
        const Node& an = nodes_[a];
        const Node& bn = nodes_[b];
        if (!an.val.same_shape(bn.val)) throw std::invalid_argument("mul: shape mismatch");
        Node nd;
        nd.val = an.val;
        for (std::size_t i = 0; i < nd.val.v.size(); ++i) nd.val.v[i] *= bn.val.v[i];
        nd.needs_grad = an.needs_grad || bn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        self->back = [this, self, a, b]() {
            Node& an2 = nodes_[a];
            Node& bn2 = nodes_[b];
            if (an2.needs_grad) {
                Tensor<S>* da = ensure_grad_ptr(a);
                for (std::size_t i = 0; i < da->v.size(); ++i)
                    da->v[i] += self->grad.v[i] * bn2.val.v[i];
            }
            if (bn2.needs_grad) {
                Tensor<S>* db = ensure_grad_ptr(b);
                for (std::size_t i = 0; i < db->v.size(); ++i)
                    db->v[i] += self->grad.v[i] * an2.val.v[i];
            }
        };
        return id;
    }

    // Elementwise y = mul*x + shift.
    NodeId affine(NodeId x, S mul, S shift) {
        return unary(
            x, [mul, shift](S v) { return mul * v + shift; },
            [mul](S, S) { return mul; });
    }

    NodeId scale(NodeId x, S c) { return affine(x, c, S(0)); }

    NodeId tanh_op(NodeId x) {
        return unary(
            x, [](S v) { return std::tanh(v); }, [](S, S y) { return S(1) - y * y; });
    }

    NodeId sigmoid(NodeId x) {
        return unary(
            x, [](S v) { return S(1) / (S(1) + std::exp(-v)); },
            [](S, S y) { return y * (S(1) - y); });
    }

    NodeId gelu(NodeId x) {
        constexpr S inv_sqrt2 = S(0.7071067811865476);
        constexpr S inv_sqrt2pi = S(0.3989422804014327);
        return unary(
            x,
            [=](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); },
            [=](S v, S) {
                const S cdf = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
                return cdf + v * inv_sqrt2pi * std::exp(S(-0.5) * v * v);
            });
    }

    // Hard rectification to [0,1]; gradient passes only strictly inside.
    NodeId hard_clamp01(NodeId x) {
        return unary(
            x,
            [](S v) { return v < S(0) ? S(0) : (v > S(1) ? S(1) : v); },
            [](S v, S) { return (v > S(0) && v < S(1)) ? S(1) : S(0); });
    }

    // Row-stochastic softmax restricted to visible entries. The additive
    // mask holds 0 (visible) or kMaskedSentinel; output is exactly zero at
    // masked entries and each row sums to one over the visible set.
    NodeId masked_softmax(NodeId x, const Tensor<S>* addmask) {
        const Node& xn = nodes_[x];
        const int n = xn.val.rows(), m = xn.val.cols();
        if (addmask && (addmask->rows() != n || addmask->cols() != m))
            throw std::invalid_argument("masked_softmax: mask shape mismatch");
        Node nd;
        nd.val = Tensor<S>(n, m);
        for (int i = 0; i < n; ++i) {
            const S* row = xn.val.row_ptr(i);
            const S* mrow = addmask ? addmask->row_ptr(i) : nullptr;
            S mx = -std::numeric_limits<S>::infinity();
            bool any_visible = false;
            bool all_finite = true;
            for (int j = 0; j < m; ++j)
                if (!mrow || mrow[j] == S(0)) {
                    any_visible = true;
                    all_finite = all_finite && std::isfinite(row[j]);
                    mx = std::max(mx, row[j]);
                }
            if (!any_visible)
                throw std::invalid_argument("masked_softmax: fully masked row " + std::to_string(i));
            if (!all_finite || !std::isfinite(mx))
                throw std::runtime_error("masked_softmax: non-finite scores in row " +
                                         std::to_string(i));
            S* out = nd.val.row_ptr(i);
            S sum = S(0);
            for (int j = 0; j < m; ++j) {
                const bool visible = !mrow || mrow[j] == S(0);
                out[j] = visible ? std::exp(row[j] - mx) : S(0);
                sum += out[j];
            }
            const S inv = S(1) / sum;
            for (int j = 0; j < m; ++j) out[j] *= inv;
        }
        nd.needs_grad = xn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        self->back = [this, self, x, n, m]() {
            Tensor<S>* dx = ensure_grad_ptr(x);
            for (int i = 0; i < n; ++i) {
                const S* y = self->val.row_ptr(i);
                const S* g = self->grad.row_ptr(i);
                S dot = S(0);
                for (int j = 0; j < m; ++j) dot += y[j] * g[j];
                S* d = dx->row_ptr(i);
                for (int j = 0; j < m; ++j) d[j] += y[j] * (g[j] - dot);
            }
        };
        return id;
    }

    // Inverted dropout; identity when rate <= 0.
    NodeId dropout(NodeId x, double rate, RngStream& rng) {
        if (rate <= 0.0) return x;
        if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
        const Node& xn = nodes_[x];
        auto keep = std::make_shared<std::vector<S>>(xn.val.size());
        const S scale_up = S(1.0 / (1.0 - rate));
        Node nd;
        nd.val = xn.val;
        for (std::size_t i = 0; i < nd.val.v.size(); ++i) {
            const S k = rng.uniform() < rate ? S(0) : scale_up;
            (*keep)[i] = k;
            nd.val.v[i] *= k;
        }
        nd.needs_grad = xn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        self->back = [this, self, x, keep]() {
            Tensor<S>* dx = ensure_grad_ptr(x);
            for (std::size_t i = 0; i < dx->v.size(); ++i)
                dx->v[i] += self->grad.v[i] * (*keep)[i];
        };
        return id;
    }

    NodeId slice_cols(NodeId x, int c0, int len) {
        const Node& xn = nodes_[x];
        const int n = xn.val.rows(), m = xn.val.cols();
        if (c0 < 0 || c0 + len > m) throw std::out_of_range("slice_cols");
        Node nd;
        nd.val = Tensor<S>(n, len);
        for (int i = 0; i < n; ++i)
            std::copy_n(xn.val.row_ptr(i) + c0, len, nd.val.row_ptr(i));
        nd.needs_grad = xn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        self->back = [this, self, x, c0, len, n]() {
            Tensor<S>* dx = ensure_grad_ptr(x);
            for (int i = 0; i < n; ++i) {
                const S* g = self->grad.row_ptr(i);
                S* d = dx->row_ptr(i) + c0;
                for (int j = 0; j < len; ++j) d[j] += g[j];
            }
        };
        return id;
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
        const int n = nodes_[parts[0]].val.rows();
        int total = 0;
        bool ng = false;
        for (NodeId p : parts) {
            if (nodes_[p].val.rows() != n) throw std::invalid_argument("concat_cols: row mismatch");
            total += nodes_[p].val.cols();
            ng = ng || nodes_[p].needs_grad;
        }
        Node nd;
        nd.val = Tensor<S>(n, total);
        int off = 0;
        for (NodeId p : parts) {
            const int w = nodes_[p].val.cols();
            for (int i = 0; i < n; ++i)
                std::copy_n(nodes_[p].val.row_ptr(i), w, nd.val.row_ptr(i) + off);
            off += w;
        }
        nd.needs_grad = ng;
        NodeId id = push(std::move(nd));
        if (!ng) return id;
        Node* self = &nodes_[id];
        auto parts_copy = parts;
        self->back = [this, self, parts_copy, n]() {
            int off2 = 0;
            for (NodeId p : parts_copy) {
                const int w = nodes_[p].val.cols();
                if (nodes_[p].needs_grad) {
                    Tensor<S>* d = ensure_grad_ptr(p);
                    for (int i = 0; i < n; ++i) {
                        const S* g = self->grad.row_ptr(i) + off2;
                        S* dst = d->row_ptr(i);
                        for (int j = 0; j < w; ++j) dst[j] += g[j];
                    }
                }
                off2 += w;
            }
        };
        return id;
    }

    NodeId concat_rows(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
        const int d = nodes_[parts[0]].val.cols();
        int total = 0;
        bool ng = false;
        for (NodeId p : parts) {
            if (nodes_[p].val.cols() != d) throw std::invalid_argument("concat_rows: col mismatch");
            total += nodes_[p].val.rows();
            ng = ng || nodes_[p].needs_grad;
        }
        Node nd;
        nd.val = Tensor<S>(total, d);
        int off = 0;
        for (NodeId p : parts) {
            const int r = nodes_[p].val.rows();
            std::copy_n(nodes_[p].val.v.data(), static_cast<std::size_t>(r) * d,
                        nd.val.row_ptr(off));
            off += r;
        }
        nd.needs_grad = ng;
        NodeId id = push(std::move(nd));
        if (!ng) return id;
        Node* self = &nodes_[id];
        auto parts_copy = parts;
        self->back = [this, self, parts_copy, d]() {
            int off2 = 0;
            for (NodeId p : parts_copy) {
                const int r = nodes_[p].val.rows();
                if (nodes_[p].needs_grad) {
                    Tensor<S>* dp = ensure_grad_ptr(p);
                    const S* g = self->grad.row_ptr(off2);
                    for (std::size_t k = 0; k < static_cast<std::size_t>(r) * d; ++k)
                        dp->v[k] += g[k];
                }
                off2 += r;
            }
        };
        return id;
    }

    NodeId gather_rows(NodeId x, std::vector<int> idx) {
        const Node& xn = nodes_[x];
        const int d = xn.val.cols();
        Node nd;
        nd.val = Tensor<S>(static_cast<int>(idx.size()), d);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] < 0 || idx[i] >= xn.val.rows()) throw std::out_of_range("gather_rows");
            std::copy_n(xn.val.row_ptr(idx[i]), d, nd.val.row_ptr(static_cast<int>(i)));
        }
        nd.needs_grad = xn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        auto indices = std::move(idx);
        self->back = [this, self, x, indices, d]() {
            Tensor<S>* dx = ensure_grad_ptr(x);
            for (std::size_t i = 0; i < indices.size(); ++i) {
                const S* g = self->grad.row_ptr(static_cast<int>(i));
                S* dst = dx->row_ptr(indices[i]);
                for (int j = 0; j < d; ++j) dst[j] += g[j];
            }
        };
        return id;
    }

    // out = base with out[row,:] += alpha * vec[0,:]. The alpha == 0 case
    // is the caller's responsibility to skip (bit-identity contract).
    NodeId add_scaled_row(NodeId base, int row, NodeId vec, S alpha) {
        const Node& bn = nodes_[base];
        const Node& vn = nodes_[vec];
        const int d = bn.val.cols();
        if (vn.val.rows() != 1 || vn.val.cols() != d)
            throw std::invalid_argument("add_scaled_row: vec must be [1,d]");
        if (row < 0 || row >= bn.val.rows()) throw std::out_of_range("add_scaled_row");
        Node nd;
        nd.val = bn.val;
        {
            S* r = nd.val.row_ptr(row);
            for (int j = 0; j < d; ++j) r[j] += alpha * vn.val.v[j];
        }
        nd.needs_grad = bn.needs_grad || vn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        self->back = [this, self, base, vec, row, alpha, d]() {
            if (nodes_[base].needs_grad) accumulate(base, self->grad);
            if (nodes_[vec].needs_grad) {
                Tensor<S>* dv = ensure_grad_ptr(vec);
                const S* g = self->grad.row_ptr(row);
                for (int j = 0; j < d; ++j) dv->v[j] += alpha * g[j];
            }
        };
        return id;
    }

    // out[i,:] = x[i,:] * col[i] with col shaped [n,1].
    NodeId row_scale(NodeId x, NodeId col) {
        const Node& xn = nodes_[x];
        const Node& cn = nodes_[col];
        const int n = xn.val.rows(), d = xn.val.cols();
        if (cn.val.rows() != n || cn.val.cols() != 1)
            throw std::invalid_argument("row_scale: col must be [n,1]");
        Node nd;
        nd.val = Tensor<S>(n, d);
        for (int i = 0; i < n; ++i) {
            const S c = cn.val.v[i];
            const S* src = xn.val.row_ptr(i);
            S* out = nd.val.row_ptr(i);
            for (int j = 0; j < d; ++j) out[j] = src[j] * c;
        }
        nd.needs_grad = xn.needs_grad || cn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        self->back = [this, self, x, col, n, d]() {
            Node& xn2 = nodes_[x];
            Node& cn2 = nodes_[col];
            if (xn2.needs_grad) {
                Tensor<S>* dx = ensure_grad_ptr(x);
                for (int i = 0; i < n; ++i) {
                    const S c = cn2.val.v[i];
                    const S* g = self->grad.row_ptr(i);
                    S* d2 = dx->row_ptr(i);
                    for (int j = 0; j < d; ++j) d2[j] += g[j] * c;
                }
            }
            if (cn2.needs_grad) {
                Tensor<S>* dc = ensure_grad_ptr(col);
                for (int i = 0; i < n; ++i) {
                    const S* g = self->grad.row_ptr(i);
                    const S* xv = xn2.val.row_ptr(i);
                    S acc = S(0);
                    for (int j = 0; j < d; ++j) acc += g[j] * xv[j];
                    dc->v[i] += acc;
                }
            }
        };
        return id;
    }

    // Mean cross-entropy of rows of logits against integer gold labels.
    NodeId softmax_cross_entropy(NodeId logits, std::vector<int> gold) {
        const Node& ln = nodes_[logits];
        const int n = ln.val.rows(), k = ln.val.cols();
        if (static_cast<int>(gold.size()) != n)
            throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
        auto probs = std::make_shared<Tensor<S>>(n, k);
        S loss = S(0);
        for (int i = 0; i < n; ++i) {
            if (gold[i] < 0 || gold[i] >= k) throw std::out_of_range("gold label out of range");
            const S* row = ln.val.row_ptr(i);
            S mx = row[0];
            for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            S sum = S(0);
            S* p = probs->row_ptr(i);
            for (int j = 0; j < k; ++j) {
                p[j] = std::exp(row[j] - mx);
                sum += p[j];
            }
            const S inv = S(1) / sum;
            for (int j = 0; j < k; ++j) p[j] *= inv;
            loss += std::log(sum) + mx - row[gold[i]];
        }
        loss /= S(n);
        Node nd;
        nd.val = Tensor<S>::scalar(loss);
        nd.needs_grad = ln.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        auto labels = std::make_shared<std::vector<int>>(std::move(gold));
        self->back = [this, self, logits, probs, labels, n, k]() {
            const S g = self->grad.v[0] / S(n);
            Tensor<S>* dx = ensure_grad_ptr(logits);
            for (int i = 0; i < n; ++i) {
                const S* p = probs->row_ptr(i);
                S* d = dx->row_ptr(i);
                for (int j = 0; j < k; ++j) d[j] += g * p[j];
                d[(*labels)[i]] -= g;
            }
        };
        return id;
    }

    // Mean squared error against a constant target of the same shape.
    NodeId squared_error(NodeId pred, Tensor<S> target) {
        const Node& pn = nodes_[pred];
        if (!pn.val.same_shape(target)) throw std::invalid_argument("squared_error: shape mismatch");
        const std::size_t n = pn.val.size();
        S loss = S(0);
        for (std::size_t i = 0; i < n; ++i) {
            const S d = pn.val.v[i] - target.v[i];
            loss += d * d;
        }
        loss /= S(n);
        Node nd;
        nd.val = Tensor<S>::scalar(loss);
        nd.needs_grad = pn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        auto tgt = std::make_shared<Tensor<S>>(std::move(target));
        self->back = [this, self, pred, tgt, n]() {
            const S g = self->grad.v[0] * S(2) / S(n);
            Tensor<S>* dx = ensure_grad_ptr(pred);
            for (std::size_t i = 0; i < n; ++i)
                dx->v[i] += g * (nodes_[pred].val.v[i] - tgt->v[i]);
        };
        return id;
    }

    // Mean over rows of KL(ref || softmax(logits)); ref rows are fixed
    // probability vectors.
    NodeId kl_to_reference(Tensor<S> ref_probs, NodeId logits) {
        const Node& ln = nodes_[logits];
        const int n = ln.val.rows(), k = ln.val.cols();
        if (!ref_probs.same_shape(ln.val)) throw std::invalid_argument("kl_to_reference: shape mismatch");
        auto probs = std::make_shared<Tensor<S>>(n, k);
        S loss = S(0);
        for (int i = 0; i < n; ++i) {
            const S* row = ln.val.row_ptr(i);
            const S* r = ref_probs.row_ptr(i);
            S mx = row[0];
            for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            S sum = S(0);
            S* p = probs->row_ptr(i);
            for (int j = 0; j < k; ++j) {
                p[j] = std::exp(row[j] - mx);
                sum += p[j];
            }
            const S lse = std::log(sum) + mx;
            const S inv = S(1) / sum;
            for (int j = 0; j < k; ++j) p[j] *= inv;
            for (int j = 0; j < k; ++j) {
                if (r[j] > S(0)) loss += r[j] * (std::log(r[j]) - (row[j] - lse));
            }
        }
        loss /= S(n);
        Node nd;
        nd.val = Tensor<S>::scalar(loss);
        nd.needs_grad = ln.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        auto ref = std::make_shared<Tensor<S>>(std::move(ref_probs));
        self->back = [this, self, logits, probs, ref, n, k]() {
            const S g = self->grad.v[0] / S(n);
            Tensor<S>* dx = ensure_grad_ptr(logits);
            for (int i = 0; i < n; ++i) {
                const S* p = probs->row_ptr(i);
                const S* r = ref->row_ptr(i);
                S* d = dx->row_ptr(i);
                for (int j = 0; j < k; ++j) d[j] += g * (p[j] - r[j]);
            }
        };
        return id;
    }

    NodeId mean_all(NodeId x) {
        const Node& xn = nodes_[x];
        const std::size_t n = xn.val.size();
        S m = S(0);
        for (S v : xn.val.v) m += v;
        m /= S(n);
        Node nd;
        nd.val = Tensor<S>::scalar(m);
        nd.needs_grad = xn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        self->back = [this, self, x, n]() {
            const S g = self->grad.v[0] / S(n);
            Tensor<S>* dx = ensure_grad_ptr(x);
            for (std::size_t i = 0; i < dx->v.size(); ++i) dx->v[i] += g;
        };
        return id;
    }

    // ---- execution -----------------------------------------------------

    // Reverse sweep from a scalar loss node. Parameter gradients accumulate
    // into their stores; call ParamStore::zero_grad between steps.
    void backward(NodeId loss) {
        if (!nodes_[loss].val.is_scalar()) throw std::invalid_argument("backward: loss must be scalar");
        ensure_grad(loss).v[0] = S(1);
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.back && n.grad.size() != 0) n.back();
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    template <typename FwdFn, typename BwdFn>
    NodeId unary(NodeId x, FwdFn f, BwdFn df) {
        const Node& xn = nodes_[x];
        Node nd;
        nd.val = Tensor<S>(xn.val.shape);
        for (std::size_t i = 0; i < nd.val.v.size(); ++i) nd.val.v[i] = f(xn.val.v[i]);
        nd.needs_grad = xn.needs_grad;
        NodeId id = push(std::move(nd));
        if (!nodes_[id].needs_grad) return id;
        Node* self = &nodes_[id];
        self->back = [this, self, x, df]() {
            Tensor<S>* dx = ensure_grad_ptr(x);
            const Node& xn2 = nodes_[x];
            for (std::size_t i = 0; i < dx->v.size(); ++i)
                dx->v[i] += self->grad.v[i] * df(xn2.val.v[i], self->val.v[i]);
        };
        return id;
    }

    NodeId push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    Tensor<S>& ensure_grad(NodeId id) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) n.grad = Tensor<S>(n.val.shape);
        return n.grad;
    }

    Tensor<S>* ensure_grad_ptr(NodeId id) { return &ensure_grad(id); }

    void accumulate(NodeId id, const Tensor<S>& g) {
        if (!nodes_[id].needs_grad) return;
        Tensor<S>& dst = ensure_grad(id);
        for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += g.v[i];
    }

    std::deque<Node> nodes_;
};

} // namespace knit
