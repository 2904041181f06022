#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "carp/rng.hpp"

namespace carp {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

/// One record on the dynamic tape. Value is immutable after the forward pass;
/// grad is the only mutable buffer.
struct TensorNode {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // sized lazily
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;
    const char* op = "leaf";

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    }
};

inline void check_finite(const std::vector<float>& v, const char* op) {
    for (float x : v) {
        if (!std::isfinite(x))
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        check_finite(n->value, "leaf");
        return Tensor(n);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<float> d(shape_numel(shape), 0.0f);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, float v, bool requires_grad = false) {
        std::vector<float> d(shape_numel(shape), v);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, float stdev = 1.0f, bool requires_grad = false) {
        std::vector<float> d(shape_numel(shape));
        for (auto& x : d) x = static_cast<float>(rng.normal()) * stdev;
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(float v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }
    const std::vector<float>& value() const { return n_->value; }
    std::vector<float>& mut_value() { return n_->value; }  // parameter updates only
    std::vector<float>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    bool has_grad() const { return n_->grad.size() == n_->value.size(); }
    bool requires_grad() const { return n_->requires_grad; }
    float item() const {
        if (numel() != 1) throw ShapeError("item(): tensor is not scalar, shape " + shape_str(shape()));
        return n_->value[0];
    }
    void zero_grad() {
        std::fill(n_->grad.begin(), n_->grad.end(), 0.0f);
    }
    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

inline Tensor make_op(const char* op, Shape shape, std::vector<float> value,
                      std::vector<NodePtr> parents,
                      std::function<void(TensorNode&)> backward_fn) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    check_finite(n->value, op);
    for (auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar loss. Grads accumulate; call zero_grad on
/// leaves between steps.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    // iterative post-order topo sort over the requires_grad subgraph
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // interior grads are scratch per sweep; only leaf grads accumulate across
    // repeated backward calls
    for (TensorNode* n : order) {
        if (n->backward_fn) {
            n->ensure_grad();
            std::fill(n->grad.begin(), n->grad.end(), 0.0f);
        }
    }
    loss.node()->ensure_grad();
    if (loss.node()->backward_fn)
        loss.node()->grad[0] = 1.0f;
    else
        loss.node()->grad[0] += 1.0f;  // loss is itself a leaf
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (!n->backward_fn) continue;
        for (auto& p : n->parents)
            if (p->requires_grad) p->ensure_grad();
        n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise binary ops with right-aligned broadcasting
// ---------------------------------------------------------------------------

namespace detail {

struct BcastPlan {
    Shape out;
    std::vector<int64_t> sa, sb;  // strides of a/b in out space (0 = broadcast)
    bool same_shape;
};

inline BcastPlan broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    size_t nd = std::max(a.size(), b.size());
    BcastPlan p;
    p.out.resize(nd);
    p.sa.resize(nd);
    p.sb.resize(nd);
    std::vector<int64_t> stra(nd, 0), strb(nd, 0);
    // native strides, right-aligned
    int64_t acc = 1;
    for (size_t i = 0; i < a.size(); ++i) {
        stra[nd - 1 - i] = acc;
        acc *= a[a.size() - 1 - i];
    }
    acc = 1;
    for (size_t i = 0; i < b.size(); ++i) {
        strb[nd - 1 - i] = acc;
        acc *= b[b.size() - 1 - i];
    }
    for (size_t i = 0; i < nd; ++i) {
        int da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        int db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                             shape_str(b) + " are not broadcastable");
        p.out[i] = std::max(da, db);
        p.sa[i] = (da == 1 && p.out[i] != 1) ? 0 : stra[i];
        p.sb[i] = (db == 1 && p.out[i] != 1) ? 0 : strb[i];
    }
    p.same_shape = (a == b);
    return p;
}

template <class F>
inline void bcast_for_each(const BcastPlan& p, F&& fn) {
    int64_t n = shape_numel(p.out);
    size_t nd = p.out.size();
    std::vector<int64_t> idx(nd, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        fn(lin, ia, ib);
        for (int i = static_cast<int>(nd) - 1; i >= 0; --i) {
            ia += p.sa[i];
            ib += p.sb[i];
            if (++idx[i] < p.out[i]) break;
            ia -= p.sa[i] * p.out[i];
            ib -= p.sb[i] * p.out[i];
            idx[i] = 0;
        }
    }
}

}  // namespace detail

template <class Fwd, class BwdA, class BwdB>
inline Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, BwdA bwd_a,
                        BwdB bwd_b) {
    auto plan = detail::broadcast_plan(a.shape(), b.shape(), name);
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<float> out(shape_numel(plan.out));
    if (plan.same_shape) {
        for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    } else {
        detail::bcast_for_each(plan, [&](int64_t lin, int64_t ia, int64_t ib) {
            out[lin] = fwd(av[ia], bv[ib]);
        });
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op(name, plan.out, std::move(out), {an, bn},
                   [an, bn, plan, bwd_a, bwd_b](TensorNode& n) {
                       if (plan.same_shape) {
                           for (size_t i = 0; i < n.value.size(); ++i) {
                               float g = n.grad[i];
                               if (an->requires_grad)
                                   an->grad[i] += bwd_a(g, an->value[i], bn->value[i]);
                               if (bn->requires_grad)
                                   bn->grad[i] += bwd_b(g, an->value[i], bn->value[i]);
                           }
                       } else {
                           detail::bcast_for_each(plan, [&](int64_t lin, int64_t ia, int64_t ib) {
                               float g = n.grad[lin];
                               if (an->requires_grad)
                                   an->grad[ia] += bwd_a(g, an->value[ia], bn->value[ib]);
                               if (bn->requires_grad)
                                   bn->grad[ib] += bwd_b(g, an->value[ia], bn->value[ib]);
                           });
                       }
                   });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](float x, float y) { return x + y; },
        [](float g, float, float) { return g; }, [](float g, float, float) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](float x, float y) { return x - y; },
        [](float g, float, float) { return g; }, [](float g, float, float) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](float x, float y) { return x * y; },
        [](float g, float, float y) { return g * y; },
        [](float g, float x, float) { return g * x; });
}

inline Tensor scale(const Tensor& a, float s) {
    std::vector<float> out(a.value());
    for (auto& x : out) x *= s;
    auto an = a.node();
    return make_op("scale", a.shape(), std::move(out), {an}, [an, s](TensorNode& n) {
        for (size_t i = 0; i < n.value.size(); ++i) an->grad[i] += s * n.grad[i];
    });
}

inline Tensor add_scalar(const Tensor& a, float s) {
    std::vector<float> out(a.value());
    for (auto& x : out) x += s;
    auto an = a.node();
    return make_op("add_scalar", a.shape(), std::move(out), {an}, [an](TensorNode& n) {
        for (size_t i = 0; i < n.value.size(); ++i) an->grad[i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// matmul / bmm
// ---------------------------------------------------------------------------

/// a: (..., M, K) flattened to rows, b: (K, N). Output (..., M, N).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().empty() || b.shape().size() != 2)
        throw ShapeError("matmul: need a rank>=1, b rank 2");
    int K = a.shape().back();
    if (K != b.shape()[0])
        throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    int N = b.shape()[1];
    int64_t R = a.numel() / K;
    Shape out_shape(a.shape());
    out_shape.back() = N;
    std::vector<float> out(R * N, 0.0f);
    const float* A = a.value().data();
    const float* B = b.value().data();
    for (int64_t i = 0; i < R; ++i) {
        float* O = out.data() + i * N;
        const float* Ai = A + i * K;
        for (int k = 0; k < K; ++k) {
            float av = Ai[k];
            const float* Bk = B + static_cast<int64_t>(k) * N;
            for (int j = 0; j < N; ++j) O[j] += av * Bk[j];
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op("matmul", out_shape, std::move(out), {an, bn}, [an, bn, R, K, N](TensorNode& n) {
        const float* G = n.grad.data();
        const float* A = an->value.data();
        const float* B = bn->value.data();
        if (an->requires_grad) {
            float* dA = an->grad.data();
            for (int64_t i = 0; i < R; ++i) {
                const float* Gi = G + i * N;
                float* dAi = dA + i * K;
                for (int k = 0; k < K; ++k) {
                    const float* Bk = B + static_cast<int64_t>(k) * N;
                    float acc = 0.0f;
                    for (int j = 0; j < N; ++j) acc += Gi[j] * Bk[j];
                    dAi[k] += acc;
                }
            }
        }
        if (bn->requires_grad) {
            float* dB = bn->grad.data();
            for (int64_t i = 0; i < R; ++i) {
                const float* Gi = G + i * N;
                const float* Ai = A + i * K;
                for (int k = 0; k < K; ++k) {
                    float av = Ai[k];
                    if (av == 0.0f) continue;
                    float* dBk = dB + static_cast<int64_t>(k) * N;
                    for (int j = 0; j < N; ++j) dBk[j] += av * Gi[j];
                }
            }
        }
    });
}

/// Batched matmul: a (G, M, K) x b (G, K, N) -> (G, M, N).
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.shape()[0] != b.shape()[0] ||
        a.shape()[2] != b.shape()[1])
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    int G = a.shape()[0], M = a.shape()[1], K = a.shape()[2], N = b.shape()[2];
    std::vector<float> out(static_cast<int64_t>(G) * M * N, 0.0f);
    for (int g = 0; g < G; ++g) {
        const float* A = a.value().data() + static_cast<int64_t>(g) * M * K;
        const float* B = b.value().data() + static_cast<int64_t>(g) * K * N;
        float* O = out.data() + static_cast<int64_t>(g) * M * N;
        for (int i = 0; i < M; ++i)
            for (int k = 0; k < K; ++k) {
                float av = A[i * K + k];
                for (int j = 0; j < N; ++j) O[i * N + j] += av * B[k * N + j];
            }
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op("bmm", {G, M, N}, std::move(out), {an, bn}, [an, bn, G, M, K, N](TensorNode& n) {
        for (int g = 0; g < G; ++g) {
            const float* A = an->value.data() + static_cast<int64_t>(g) * M * K;
            const float* B = bn->value.data() + static_cast<int64_t>(g) * K * N;
            const float* Gr = n.grad.data() + static_cast<int64_t>(g) * M * N;
            if (an->requires_grad) {
                float* dA = an->grad.data() + static_cast<int64_t>(g) * M * K;
                for (int i = 0; i < M; ++i)
                    for (int k = 0; k < K; ++k) {
                        float acc = 0.0f;
                        for (int j = 0; j < N; ++j) acc += Gr[i * N + j] * B[k * N + j];
                        dA[i * K + k] += acc;
                    }
            }
            if (bn->requires_grad) {
                float* dB = bn->grad.data() + static_cast<int64_t>(g) * K * N;
                for (int i = 0; i < M; ++i)
                    for (int k = 0; k < K; ++k) {
                        float av = A[i * K + k];
                        for (int j = 0; j < N; ++j) dB[k * N + j] += av * Gr[i * N + j];
                    }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

/// x: (B, Cin, L), w: (Cout, Cin, ker), bias: (Cout) or undefined.
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1,
                     int pad = 0) {
    if (x.shape().size() != 3 || w.shape().size() != 3)
        throw ShapeError("conv1d: x must be (B,Cin,L), w (Cout,Cin,ker); got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    int B = x.shape()[0], Ci = x.shape()[1], L = x.shape()[2];
    int Co = w.shape()[0], ker = w.shape()[2];
    if (w.shape()[1] != Ci)
        throw ShapeError("conv1d: channel mismatch, x has " + std::to_string(Ci) + ", w expects " +
                         std::to_string(w.shape()[1]));
    if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != Co))
        throw ShapeError("conv1d: bias must be (Cout)");
    int Lo = (L + 2 * pad - ker) / stride + 1;
    if (Lo < 1) throw ShapeError("conv1d: output length < 1");
    std::vector<float> out(static_cast<int64_t>(B) * Co * Lo, 0.0f);
    const float* X = x.value().data();
    const float* W = w.value().data();
    for (int b = 0; b < B; ++b)
        for (int co = 0; co < Co; ++co) {
            float bv = bias.defined() ? bias.value()[co] : 0.0f;
            float* O = out.data() + (static_cast<int64_t>(b) * Co + co) * Lo;
            for (int t = 0; t < Lo; ++t) {
                float acc = bv;
                for (int ci = 0; ci < Ci; ++ci) {
                    const float* Xr = X + (static_cast<int64_t>(b) * Ci + ci) * L;
                    const float* Wr = W + (static_cast<int64_t>(co) * Ci + ci) * ker;
                    for (int dk = 0; dk < ker; ++dk) {
                        int p = t * stride + dk - pad;
                        if (p >= 0 && p < L) acc += Xr[p] * Wr[dk];
                    }
                }
                O[t] = acc;
            }
        }
    auto xn = x.node();
    auto wn = w.node();
    std::vector<NodePtr> parents{xn, wn};
    NodePtr biasn = bias.defined() ? bias.node() : nullptr;
    if (biasn) parents.push_back(biasn);
    return make_op("conv1d", {B, Co, Lo}, std::move(out), std::move(parents),
                   [xn, wn, biasn, B, Ci, L, Co, ker, Lo, stride, pad](TensorNode& n) {
                       const float* G = n.grad.data();
                       const float* X = xn->value.data();
                       const float* W = wn->value.data();
                       for (int b = 0; b < B; ++b)
                           for (int co = 0; co < Co; ++co) {
                               const float* Gr = G + (static_cast<int64_t>(b) * Co + co) * Lo;
                               for (int t = 0; t < Lo; ++t) {
                                   float g = Gr[t];
                                   if (g == 0.0f) continue;
                                   if (biasn && biasn->requires_grad) biasn->grad[co] += g;
                                   for (int ci = 0; ci < Ci; ++ci) {
                                       const float* Xr = X + (static_cast<int64_t>(b) * Ci + ci) * L;
                                       const float* Wr =
                                           W + (static_cast<int64_t>(co) * Ci + ci) * ker;
                                       float* dXr = xn->requires_grad
                                                        ? xn->grad.data() +
                                                              (static_cast<int64_t>(b) * Ci + ci) * L
                                                        : nullptr;
                                       float* dWr = wn->requires_grad
                                                        ? wn->grad.data() +
                                                              (static_cast<int64_t>(co) * Ci + ci) *
                                                                  ker
                                                        : nullptr;
                                       for (int dk = 0; dk < ker; ++dk) {
                                           int p = t * stride + dk - pad;
                                           if (p < 0 || p >= L) continue;
                                           if (dXr) dXr[p] += g * Wr[dk];
                                           if (dWr) dWr[dk] += g * Xr[p];
                                       }
                                   }
                               }
                           }
                   });
}

// ---------------------------------------------------------------------------
// interp1d_linear
// ---------------------------------------------------------------------------

/// Linear interpolation along the last axis with endpoint alignment:
/// sample positions i*(Lin-1)/(Lout-1). Lout == 1 returns the mean.
/// x: (B, C, Lin) -> (B, C, Lout).
inline Tensor interp1d_linear(const Tensor& x, int target_len) {
    if (target_len < 1) throw ShapeError("interp1d_linear: target_len must be >= 1");
    if (x.shape().size() != 3) throw ShapeError("interp1d_linear: x must be (B,C,L)");
    int B = x.shape()[0], C = x.shape()[1], L = x.shape()[2];
    int Lo = target_len;
    int64_t rows = static_cast<int64_t>(B) * C;

    // precomputed sample taps: out[t] = (1-f)*x[lo] + f*x[lo+1]
    std::vector<int> lo_idx(Lo);
    std::vector<float> frac(Lo);
    if (Lo == 1) {
        lo_idx[0] = -1;  // mean marker
    } else {
        for (int t = 0; t < Lo; ++t) {
            double p = static_cast<double>(t) * (L - 1) / (Lo - 1);
            int lo = std::min(static_cast<int>(p), L - 2 >= 0 ? L - 2 : 0);
            if (L == 1) lo = 0;
            lo_idx[t] = lo;
            frac[t] = L == 1 ? 0.0f : static_cast<float>(p - lo);
        }
    }

    std::vector<float> out(rows * Lo);
    const float* X = x.value().data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* Xr = X + r * L;
        float* O = out.data() + r * Lo;
        if (Lo == 1) {
            float acc = 0.0f;
            for (int i = 0; i < L; ++i) acc += Xr[i];
            O[0] = acc / L;
        } else {
            for (int t = 0; t < Lo; ++t) {
                int lo = lo_idx[t];
                float f = frac[t];
                O[t] = L == 1 ? Xr[0] : (1.0f - f) * Xr[lo] + f * Xr[lo + 1];
            }
        }
    }
    auto xn = x.node();
    return make_op("interp1d_linear", {B, C, Lo}, std::move(out), {xn},
                   [xn, rows, L, Lo, lo_idx, frac](TensorNode& n) {
                       float* dX = xn->grad.data();
                       const float* G = n.grad.data();
                       for (int64_t r = 0; r < rows; ++r) {
                           float* dXr = dX + r * L;
                           const float* Gr = G + r * Lo;
                           if (Lo == 1) {
                               float g = Gr[0] / L;
                               for (int i = 0; i < L; ++i) dXr[i] += g;
                           } else if (L == 1) {
                               for (int t = 0; t < Lo; ++t) dXr[0] += Gr[t];
                           } else {
                               for (int t = 0; t < Lo; ++t) {
                                   int lo = lo_idx[t];
                                   float f = frac[t];
                                   dXr[lo] += (1.0f - f) * Gr[t];
                                   dXr[lo + 1] += f * Gr[t];
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    // one -1 wildcard allowed
    int64_t known = 1;
    int wild = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (wild >= 0) throw ShapeError("reshape: multiple -1");
            wild = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (wild >= 0) shape[wild] = static_cast<int>(x.numel() / known);
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    auto xn = x.node();
    return make_op("reshape", std::move(shape), x.value(), {xn}, [xn](TensorNode& n) {
        for (size_t i = 0; i < n.value.size(); ++i) xn->grad[i] += n.grad[i];
    });
}

inline Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    size_t nd = x.shape().size();
    if (axes.size() != nd) throw ShapeError("permute: axes rank mismatch");
    Shape out_shape(nd);
    for (size_t i = 0; i < nd; ++i) out_shape[i] = x.shape()[axes[i]];
    std::vector<int64_t> in_strides(nd, 1), map(nd);
    for (int i = static_cast<int>(nd) - 2; i >= 0; --i)
        in_strides[i] = in_strides[i + 1] * x.shape()[i + 1];
    for (size_t i = 0; i < nd; ++i) map[i] = in_strides[axes[i]];

    int64_t n = x.numel();
    std::vector<float> out(n);
    std::vector<int64_t> idx(nd, 0);
    const float* X = x.value().data();
    int64_t src = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        out[lin] = X[src];
        for (int i = static_cast<int>(nd) - 1; i >= 0; --i) {
            src += map[i];
            if (++idx[i] < out_shape[i]) break;
            src -= map[i] * out_shape[i];
            idx[i] = 0;
        }
    }
    auto xn = x.node();
    return make_op("permute", out_shape, std::move(out), {xn},
                   [xn, out_shape, map, nd](TensorNode& n) {
                       std::vector<int64_t> idx(nd, 0);
                       int64_t src = 0;
                       for (int64_t lin = 0; lin < static_cast<int64_t>(n.value.size()); ++lin) {
                           xn->grad[src] += n.grad[lin];
                           for (int i = static_cast<int>(nd) - 1; i >= 0; --i) {
                               src += map[i];
                               if (++idx[i] < out_shape[i]) break;
                               src -= map[i] * out_shape[i];
                               idx[i] = 0;
                           }
                       }
                   });
}

/// Contiguous slice along one axis.
inline Tensor slice(const Tensor& x, int axis, int start, int len) {
    const Shape& s = x.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) throw ShapeError("slice: bad axis");
    if (start < 0 || len < 1 || start + len > s[axis]) throw ShapeError("slice: range out of bounds");
    Shape out_shape(s);
    out_shape[axis] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    std::vector<float> out(outer * len * inner);
    const float* X = x.value().data();
    for (int64_t o = 0; o < outer; ++o)
        std::copy(X + (o * s[axis] + start) * inner, X + (o * s[axis] + start + len) * inner,
                  out.data() + o * len * inner);
    auto xn = x.node();
    int64_t dim = s[axis];
    return make_op("slice", out_shape, std::move(out), {xn},
                   [xn, outer, inner, dim, start, len](TensorNode& n) {
                       for (int64_t o = 0; o < outer; ++o) {
                           const float* G = n.grad.data() + o * len * inner;
                           float* dX = xn->grad.data() + (o * dim + start) * inner;
                           for (int64_t i = 0; i < len * inner; ++i) dX[i] += G[i];
                       }
                   });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size())) throw ShapeError("concat: bad axis");
    int total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (size_t i = 0; i < s.size(); ++i)
            if (static_cast<int>(i) != axis && s[i] != s0[i])
                throw ShapeError("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
        total += s[axis];
    }
    Shape out_shape(s0);
    out_shape[axis] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[i];
    for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    std::vector<float> out(shape_numel(out_shape));
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t plen = p.shape()[axis] * inner;
        const float* P = p.value().data();
        for (int64_t o = 0; o < outer; ++o)
            std::copy(P + o * plen, P + (o + 1) * plen, out.data() + o * total * inner + off);
        off += plen;
    }
    std::vector<NodePtr> parents;
    std::vector<int64_t> plens;
    for (const auto& p : parts) {
        parents.push_back(p.node());
        plens.push_back(p.shape()[axis] * inner);
    }
    return make_op("concat", out_shape, std::move(out), parents,
                   [parents, plens, outer, inner, total](TensorNode& n) {
                       int64_t off = 0;
                       for (size_t pi = 0; pi < parents.size(); ++pi) {
                           auto& p = parents[pi];
                           int64_t plen = plens[pi];
                           if (p->requires_grad) {
                               for (int64_t o = 0; o < outer; ++o) {
                                   const float* G = n.grad.data() + o * total * inner + off;
                                   float* dP = p->grad.data() + o * plen;
                                   for (int64_t i = 0; i < plen; ++i) dP[i] += G[i];
                               }
                           }
                           off += plen;
                       }
                   });
}

// ---------------------------------------------------------------------------
// nonlinearities / normalization
// ---------------------------------------------------------------------------

inline Tensor gelu(const Tensor& x) {
    std::vector<float> out(x.numel());
    const auto& xv = x.value();
    for (size_t i = 0; i < out.size(); ++i) {
        float v = xv[i];
        out[i] = 0.5f * v * (1.0f + std::erf(v * 0.70710678f));
    }
    auto xn = x.node();
    return make_op("gelu", x.shape(), std::move(out), {xn}, [xn](TensorNode& n) {
        for (size_t i = 0; i < n.value.size(); ++i) {
            float v = xn->value[i];
            float cdf = 0.5f * (1.0f + std::erf(v * 0.70710678f));
            float pdf = 0.39894228f * std::exp(-0.5f * v * v);
            xn->grad[i] += n.grad[i] * (cdf + v * pdf);
        }
    });
}

/// Softmax over the last axis.
inline Tensor softmax(const Tensor& x) {
    int V = x.shape().back();
    int64_t rows = x.numel() / V;
    std::vector<float> out(x.numel());
    const float* X = x.value().data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* Xr = X + r * V;
        float* O = out.data() + r * V;
        float mx = Xr[0];
        for (int i = 1; i < V; ++i) mx = std::max(mx, Xr[i]);
        float sum = 0.0f;
        for (int i = 0; i < V; ++i) {
            O[i] = std::exp(Xr[i] - mx);
            sum += O[i];
        }
        for (int i = 0; i < V; ++i) O[i] /= sum;
    }
    auto xn = x.node();
    return make_op("softmax", x.shape(), std::move(out), {xn}, [xn, rows, V](TensorNode& n) {
        for (int64_t r = 0; r < rows; ++r) {
            const float* Y = n.value.data() + r * V;
            const float* G = n.grad.data() + r * V;
            float dot = 0.0f;
            for (int i = 0; i < V; ++i) dot += Y[i] * G[i];
            float* dX = xn->grad.data() + r * V;
            for (int i = 0; i < V; ++i) dX[i] += Y[i] * (G[i] - dot);
        }
    });
}

/// Layer norm over the last axis, no affine (scale/shift are applied by the
/// caller where needed).
inline Tensor layer_norm(const Tensor& x, float eps = 1e-5f) {
    int C = x.shape().back();
    int64_t rows = x.numel() / C;
    std::vector<float> out(x.numel());
    std::vector<float> inv_std(rows);
    const float* X = x.value().data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* Xr = X + r * C;
        float mean = 0.0f;
        for (int i = 0; i < C; ++i) mean += Xr[i];
        mean /= C;
        float var = 0.0f;
        for (int i = 0; i < C; ++i) var += (Xr[i] - mean) * (Xr[i] - mean);
        var /= C;
        float is = 1.0f / std::sqrt(var + eps);
        inv_std[r] = is;
        float* O = out.data() + r * C;
        for (int i = 0; i < C; ++i) O[i] = (Xr[i] - mean) * is;
    }
    auto xn = x.node();
    return make_op("layer_norm", x.shape(), std::move(out), {xn},
                   [xn, rows, C, inv_std](TensorNode& n) {
                       for (int64_t r = 0; r < rows; ++r) {
                           const float* Y = n.value.data() + r * C;
                           const float* G = n.grad.data() + r * C;
                           float mg = 0.0f, mgy = 0.0f;
                           for (int i = 0; i < C; ++i) {
                               mg += G[i];
                               mgy += G[i] * Y[i];
                           }
                           mg /= C;
                           mgy /= C;
                           float* dX = xn->grad.data() + r * C;
                           float is = inv_std[r];
                           for (int i = 0; i < C; ++i) dX[i] += is * (G[i] - mg - Y[i] * mgy);
                       }
                   });
}

// ---------------------------------------------------------------------------
// indexing
// ---------------------------------------------------------------------------

/// Gather rows along axis 0: x (R, ...) + ids (N) -> (N, ...).
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& ids) {
    if (x.shape().empty()) throw ShapeError("gather_rows: x must have rank >= 1");
    int R = x.shape()[0];
    int64_t row = x.numel() / R;
    for (int id : ids)
        if (id < 0 || id >= R)
            throw ShapeError("gather_rows: index " + std::to_string(id) + " out of range [0," +
                             std::to_string(R) + ")");
    Shape out_shape(x.shape());
    out_shape[0] = static_cast<int>(ids.size());
    std::vector<float> out(ids.size() * row);
    const float* X = x.value().data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(X + ids[i] * row, X + (ids[i] + 1) * row, out.data() + i * row);
    auto xn = x.node();
    return make_op("gather_rows", out_shape, std::move(out), {xn}, [xn, ids, row](TensorNode& n) {
        for (size_t i = 0; i < ids.size(); ++i) {
            const float* G = n.grad.data() + i * row;
            float* dX = xn->grad.data() + ids[i] * row;
            for (int64_t j = 0; j < row; ++j) dX[j] += G[j];
        }
    });
}

/// Codebook/embedding lookup; same contract as gather_rows.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    return gather_rows(table, ids);
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.value()) acc += v;
    auto xn = x.node();
    return make_op("sum", {1}, {static_cast<float>(acc)}, {xn}, [xn](TensorNode& n) {
        float g = n.grad[0];
        for (auto& d : xn->grad) d += g;
    });
}

inline Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.value()) acc += v;
    int64_t n_el = x.numel();
    auto xn = x.node();
    return make_op("mean", {1}, {static_cast<float>(acc / n_el)}, {xn}, [xn, n_el](TensorNode& n) {
        float g = n.grad[0] / n_el;
        for (auto& d : xn->grad) d += g;
    });
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    double acc = 0.0;
    const auto& av = a.value();
    const auto& bv = b.value();
    for (size_t i = 0; i < av.size(); ++i) {
        double d = av[i] - bv[i];
        acc += d * d;
    }
    int64_t n_el = a.numel();
    auto an = a.node();
    auto bn = b.node();
    return make_op("mse", {1}, {static_cast<float>(acc / n_el)}, {an, bn},
                   [an, bn, n_el](TensorNode& n) {
                       float g = 2.0f * n.grad[0] / n_el;
                       for (int64_t i = 0; i < n_el; ++i) {
                           float d = an->value[i] - bn->value[i];
                           if (an->requires_grad) an->grad[i] += g * d;
                           if (bn->requires_grad) bn->grad[i] -= g * d;
                       }
                   });
}

/// Mean cross-entropy over rows of logits (..., V) against integer targets.
inline Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets) {
    int V = logits.shape().back();
    int64_t rows = logits.numel() / V;
    if (static_cast<int64_t>(targets.size()) != rows)
        throw ShapeError("cross_entropy: " + std::to_string(rows) + " rows but " +
                         std::to_string(targets.size()) + " targets");
    for (int t : targets)
        if (t < 0 || t >= V) throw ShapeError("cross_entropy: target out of range");
    const float* X = logits.value().data();
    double loss = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const float* Xr = X + r * V;
        float mx = Xr[0];
        for (int i = 1; i < V; ++i) mx = std::max(mx, Xr[i]);
        double sum = 0.0;
        for (int i = 0; i < V; ++i) sum += std::exp(static_cast<double>(Xr[i]) - mx);
        loss += mx + std::log(sum) - Xr[targets[r]];
    }
    auto xn = logits.node();
    return make_op("cross_entropy", {1}, {static_cast<float>(loss / rows)}, {xn},
                   [xn, targets, rows, V](TensorNode& n) {
                       float g = n.grad[0] / rows;
                       const float* X = xn->value.data();
                       float* dX = xn->grad.data();
                       for (int64_t r = 0; r < rows; ++r) {
                           const float* Xr = X + r * V;
                           float mx = Xr[0];
                           for (int i = 1; i < V; ++i) mx = std::max(mx, Xr[i]);
                           float sum = 0.0f;
                           for (int i = 0; i < V; ++i) sum += std::exp(Xr[i] - mx);
                           float* dXr = dX + r * V;
                           for (int i = 0; i < V; ++i)
                               dXr[i] += g * (std::exp(Xr[i] - mx) / sum -
                                              (i == targets[r] ? 1.0f : 0.0f));
                       }
                   });
}

/// Stop-gradient: value passes through, grad does not.
inline Tensor detach(const Tensor& x) {
    auto n = std::make_shared<TensorNode>();
    n->shape = x.shape();
    n->value = x.value();
    n->requires_grad = false;
    n->op = "detach";
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

/// Bias-corrected Adam over a fixed parameter list.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].numel(), 0.0f);
            v_[i].assign(params_[i].numel(), 0.0f);
        }
    }

    void step() {
        ++step_;
        float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(step_));
        float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(step_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            auto& g = p.grad();
            auto& val = p.mut_value();
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t j = 0; j < val.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
                float mh = m[j] / bc1;
                float vh = v[j] / bc2;
                val[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void set_lr(float lr) { cfg_.lr = lr; }
    int64_t step_count() const { return step_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    int64_t step_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

}  // namespace carp
