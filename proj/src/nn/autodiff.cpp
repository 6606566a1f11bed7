#include "occ4d/nn/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace occ4d::nn {

namespace {

void check(bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// rank-2 view of an arbitrary tensor: all leading axes folded into rows
std::pair<long long, long long> rows_cols(const Tensor& t) {
    check(t.rank() >= 1, "rows_cols: rank >= 1 required");
    const long long n = t.shape.back();
    return {t.numel() / n, n};
}

void accumulate(Node& parent, const Tensor& g) {
    assert(parent.grad.same_shape(parent.value));
    Real* dst = parent.grad.data();
    const Real* src = g.data();
    const long long n = g.numel();
    for (long long i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace

NodePtr constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = false;
    return n;
}

NodePtr param(Tensor t, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    n->requires_grad = true;
    n->name = std::move(name);
    return n;
}

NodePtr make_node(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward_fn = std::move(bw);
    return n;
}

void zero_grads(const std::vector<NodePtr>& params) {
    for (const auto& p : params) {
        if (!p->grad.same_shape(p->value)) p->grad = Tensor(p->value.shape);
        else std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
    }
}

void backward(const NodePtr& root) {
    check(root->value.numel() == 1, "backward: root must be scalar");
    if (!root->requires_grad) return;

    // iterative post-order topo sort over the requires_grad subgraph
    std::vector<Node*> order;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.get(), 0});
    root->visit_mark = 1;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next].get();
            ++next;
            if (p->requires_grad && p->visit_mark == 0) {
                p->visit_mark = 1;
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        n->visit_mark = 0;
        if (!n->grad.same_shape(n->value)) n->grad = Tensor(n->value.shape);
        else std::fill(n->grad.v.begin(), n->grad.v.end(), 0.0);
    }
    root->grad.v[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------- elementwise

NodePtr add(const NodePtr& a, const NodePtr& b) {
    check(a->value.same_shape(b->value), "add: shape mismatch");
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out.v[i] += b->value.v[i];
    return make_node(std::move(out), {a, b}, [](Node& self) {
        if (self.parents[0]->requires_grad) accumulate(*self.parents[0], self.grad);
        if (self.parents[1]->requires_grad) accumulate(*self.parents[1], self.grad);
    });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
    check(a->value.same_shape(b->value), "sub: shape mismatch");
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out.v[i] -= b->value.v[i];
    return make_node(std::move(out), {a, b}, [](Node& self) {
        if (self.parents[0]->requires_grad) accumulate(*self.parents[0], self.grad);
        if (self.parents[1]->requires_grad) {
            Node& p = *self.parents[1];
            for (long long i = 0; i < self.grad.numel(); ++i) p.grad.v[i] -= self.grad.v[i];
        }
    });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
    check(a->value.same_shape(b->value), "mul: shape mismatch");
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out.v[i] *= b->value.v[i];
    return make_node(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (self.parents[0]->requires_grad) {
            Node& p = *self.parents[0];
            for (long long i = 0; i < self.grad.numel(); ++i)
                p.grad.v[i] += self.grad.v[i] * bv.v[i];
        }
        if (self.parents[1]->requires_grad) {
            Node& p = *self.parents[1];
            for (long long i = 0; i < self.grad.numel(); ++i)
                p.grad.v[i] += self.grad.v[i] * av.v[i];
        }
    });
}

NodePtr div_ew(const NodePtr& a, const NodePtr& b) {
    check(a->value.same_shape(b->value), "div: shape mismatch");
    Tensor out = a->value;
    for (long long i = 0; i < out.numel(); ++i) out.v[i] /= b->value.v[i];
    return make_node(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (self.parents[0]->requires_grad) {
            Node& p = *self.parents[0];
            for (long long i = 0; i < self.grad.numel(); ++i)
                p.grad.v[i] += self.grad.v[i] / bv.v[i];
        }
        if (self.parents[1]->requires_grad) {
            Node& p = *self.parents[1];
            for (long long i = 0; i < self.grad.numel(); ++i)
                p.grad.v[i] -= self.grad.v[i] * av.v[i] / (bv.v[i] * bv.v[i]);
        }
    });
}

NodePtr scale(const NodePtr& a, Real s) {
    Tensor out = a->value;
    for (auto& x : out.v) x *= s;
    return make_node(std::move(out), {a}, [s](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (long long i = 0; i < self.grad.numel(); ++i) p.grad.v[i] += s * self.grad.v[i];
    });
}

NodePtr add_scalar(const NodePtr& a, Real s) {
    Tensor out = a->value;
    for (auto& x : out.v) x += s;
    return make_node(std::move(out), {a}, [](Node& self) {
        if (self.parents[0]->requires_grad) accumulate(*self.parents[0], self.grad);
    });
}

NodePtr exp_ew(const NodePtr& a) {
    Tensor out = a->value;
    for (auto& x : out.v) x = std::exp(x);
    return make_node(std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (long long i = 0; i < self.grad.numel(); ++i)
            p.grad.v[i] += self.grad.v[i] * self.value.v[i];
    });
}

NodePtr silu(const NodePtr& a) {
    Tensor out = a->value;
    for (auto& x : out.v) x = x / (1.0 + std::exp(-x));
    return make_node(std::move(out), {a}, [](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (long long i = 0; i < self.grad.numel(); ++i) {
            const Real x = p.value.v[i];
            const Real sig = 1.0 / (1.0 + std::exp(-x));
            p.grad.v[i] += self.grad.v[i] * sig * (1.0 + x * (1.0 - sig));
        }
    });
}

NodePtr detach(const NodePtr& a) { return constant(a->value); }

// ---------------------------------------------------------------- broadcasts

NodePtr add_rowvec(const NodePtr& x, const NodePtr& v) {
    auto [m, n] = rows_cols(x->value);
    check(v->value.numel() == n, "add_rowvec: size mismatch");
    Tensor out = x->value;
    for (long long i = 0; i < m; ++i)
        for (long long j = 0; j < n; ++j) out.v[i * n + j] += v->value.v[j];
    return make_node(std::move(out), {x, v}, [m = m, n = n](Node& self) {
        if (self.parents[0]->requires_grad) accumulate(*self.parents[0], self.grad);
        if (self.parents[1]->requires_grad) {
            Node& p = *self.parents[1];
            for (long long i = 0; i < m; ++i)
                for (long long j = 0; j < n; ++j) p.grad.v[j] += self.grad.v[i * n + j];
        }
    });
}

NodePtr mul_rowvec(const NodePtr& x, const NodePtr& v) {
    auto [m, n] = rows_cols(x->value);
    check(v->value.numel() == n, "mul_rowvec: size mismatch");
    Tensor out = x->value;
    for (long long i = 0; i < m; ++i)
        for (long long j = 0; j < n; ++j) out.v[i * n + j] *= v->value.v[j];
    return make_node(std::move(out), {x, v}, [m = m, n = n](Node& self) {
        const Tensor& xv = self.parents[0]->value;
        const Tensor& vv = self.parents[1]->value;
        if (self.parents[0]->requires_grad) {
            Node& p = *self.parents[0];
            for (long long i = 0; i < m; ++i)
                for (long long j = 0; j < n; ++j)
                    p.grad.v[i * n + j] += self.grad.v[i * n + j] * vv.v[j];
        }
        if (self.parents[1]->requires_grad) {
            Node& p = *self.parents[1];
            for (long long i = 0; i < m; ++i)
                for (long long j = 0; j < n; ++j)
                    p.grad.v[j] += self.grad.v[i * n + j] * xv.v[i * n + j];
        }
    });
}

NodePtr add_colvec(const NodePtr& x, const NodePtr& v) {
    auto [m, n] = rows_cols(x->value);
    check(v->value.numel() == m, "add_colvec: size mismatch");
    Tensor out = x->value;
    for (long long i = 0; i < m; ++i)
        for (long long j = 0; j < n; ++j) out.v[i * n + j] += v->value.v[i];
    return make_node(std::move(out), {x, v}, [m = m, n = n](Node& self) {
        if (self.parents[0]->requires_grad) accumulate(*self.parents[0], self.grad);
        if (self.parents[1]->requires_grad) {
            Node& p = *self.parents[1];
            for (long long i = 0; i < m; ++i) {
                Real s = 0.0;
                for (long long j = 0; j < n; ++j) s += self.grad.v[i * n + j];
                p.grad.v[i] += s;
            }
        }
    });
}

// --------------------------------------------------------------------- shape

NodePtr reshape(const NodePtr& a, std::vector<int> shape) {
    check(Tensor::numel_of(shape) == a->value.numel(), "reshape: numel mismatch");
    Tensor out;
    out.shape = std::move(shape);
    out.v = a->value.v;
    return make_node(std::move(out), {a}, [](Node& self) {
        if (self.parents[0]->requires_grad) {
            Node& p = *self.parents[0];
            for (long long i = 0; i < self.grad.numel(); ++i) p.grad.v[i] += self.grad.v[i];
        }
    });
}

NodePtr transpose2(const NodePtr& a) {
    check(a->value.rank() == 2, "transpose2: rank-2 required");
    const int m = a->value.shape[0], n = a->value.shape[1];
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.v[(size_t)j * m + i] = a->value.v[(size_t)i * n + j];
    return make_node(std::move(out), {a}, [m, n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) p.grad.v[(size_t)i * n + j] += self.grad.v[(size_t)j * m + i];
    });
}

namespace {

Tensor permute3_tensor(const Tensor& t, const std::array<int, 3>& perm) {
    const auto& s = t.shape;
    Tensor out({s[perm[0]], s[perm[1]], s[perm[2]]});
    const long long d0 = s[0], d1 = s[1], d2 = s[2];
    long long idx[3];
    for (long long i0 = 0; i0 < d0; ++i0)
        for (long long i1 = 0; i1 < d1; ++i1)
            for (long long i2 = 0; i2 < d2; ++i2) {
                idx[0] = i0; idx[1] = i1; idx[2] = i2;
                const long long o =
                    (idx[perm[0]] * out.shape[1] + idx[perm[1]]) * out.shape[2] + idx[perm[2]];
                out.v[o] = t.v[(i0 * d1 + i1) * d2 + i2];
            }
    return out;
}

}  // namespace

NodePtr permute3(const NodePtr& a, const std::array<int, 3>& perm) {
    check(a->value.rank() == 3, "permute3: rank-3 required");
    Tensor out = permute3_tensor(a->value, perm);
    // inverse permutation maps output axes back to input axes
    std::array<int, 3> inv{};
    for (int i = 0; i < 3; ++i) inv[perm[i]] = i;
    return make_node(std::move(out), {a}, [inv](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        Tensor g = permute3_tensor(self.grad, inv);
        accumulate(p, g);
    });
}

NodePtr slice_cols(const NodePtr& x, int c0, int c1) {
    check(x->value.rank() == 2, "slice_cols: rank-2 required");
    const int m = x->value.shape[0], n = x->value.shape[1];
    check(0 <= c0 && c0 < c1 && c1 <= n, "slice_cols: bad range");
    const int w = c1 - c0;
    Tensor out({m, w});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) out.v[(size_t)i * w + j] = x->value.v[(size_t)i * n + c0 + j];
    return make_node(std::move(out), {x}, [m, n, c0, w](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                p.grad.v[(size_t)i * n + c0 + j] += self.grad.v[(size_t)i * w + j];
    });
}

// ---------------------------------------------------------------- reductions

NodePtr mean_all(const NodePtr& a) {
    const long long n = a->value.numel();
    Real s = 0.0;
    for (Real x : a->value.v) s += x;
    return make_node(Tensor::scalar(s / static_cast<Real>(n)), {a}, [n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        const Real g = self.grad.v[0] / static_cast<Real>(n);
        for (auto& x : p.grad.v) x += g;
    });
}

NodePtr mse(const NodePtr& a, const NodePtr& b) {
    check(a->value.same_shape(b->value), "mse: shape mismatch");
    const long long n = a->value.numel();
    Real s = 0.0;
    for (long long i = 0; i < n; ++i) {
        const Real d = a->value.v[i] - b->value.v[i];
        s += d * d;
    }
    return make_node(Tensor::scalar(s / static_cast<Real>(n)), {a, b}, [n](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        const Real g = 2.0 * self.grad.v[0] / static_cast<Real>(n);
        if (self.parents[0]->requires_grad) {
            Node& p = *self.parents[0];
            for (long long i = 0; i < n; ++i) p.grad.v[i] += g * (av.v[i] - bv.v[i]);
        }
        if (self.parents[1]->requires_grad) {
            Node& p = *self.parents[1];
            for (long long i = 0; i < n; ++i) p.grad.v[i] -= g * (av.v[i] - bv.v[i]);
        }
    });
}

NodePtr cross_entropy_mean(const NodePtr& logits, const std::vector<int>& labels) {
    check(logits->value.rank() == 2, "cross_entropy: logits must be (K, V)");
    const int K = logits->value.shape[0];
    const long long V = logits->value.shape[1];
    check(static_cast<long long>(labels.size()) == V, "cross_entropy: label count mismatch");

    // forward keeps softmax probabilities for the backward pass
    Tensor probs({K, static_cast<int>(V)});
    const Real* L = logits->value.data();
    Real loss = 0.0;
    for (long long s = 0; s < V; ++s) {
        Real mx = L[s];
        for (int k = 1; k < K; ++k) mx = std::max(mx, L[(size_t)k * V + s]);
        Real z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(L[(size_t)k * V + s] - mx);
        const Real logz = std::log(z) + mx;
        for (int k = 0; k < K; ++k)
            probs.v[(size_t)k * V + s] = std::exp(L[(size_t)k * V + s] - logz);
        loss += logz - L[(size_t)labels[s] * V + s];
    }
    loss /= static_cast<Real>(V);

    return make_node(Tensor::scalar(loss), {logits},
                     [probs = std::move(probs), labels, K, V](Node& self) {
                         Node& p = *self.parents[0];
                         if (!p.requires_grad) return;
                         const Real g = self.grad.v[0] / static_cast<Real>(V);
                         for (long long s = 0; s < V; ++s) {
                             for (int k = 0; k < K; ++k)
                                 p.grad.v[(size_t)k * V + s] += g * probs.v[(size_t)k * V + s];
                             p.grad.v[(size_t)labels[s] * V + s] -= g;
                         }
                     });
}

// ------------------------------------------------------------- linear algebra

namespace {

// C(m,n) += A(m,k) * B(k,n), row-major, k-inner ordering for streaming access
void mm_acc(Real* C, const Real* A, const Real* B, long long m, long long k, long long n) {
    for (long long i = 0; i < m; ++i) {
        const Real* a = A + i * k;
        Real* c = C + i * n;
        for (long long p = 0; p < k; ++p) {
            const Real av = a[p];
            if (av == 0.0) continue;
            const Real* b = B + p * n;
            for (long long j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C(m,n) += A(m,k) * B^T where Bt is (n,k) row-major
void mm_acc_bt(Real* C, const Real* A, const Real* Bt, long long m, long long k, long long n) {
    for (long long i = 0; i < m; ++i) {
        const Real* a = A + i * k;
        Real* c = C + i * n;
        for (long long j = 0; j < n; ++j) {
            const Real* b = Bt + j * k;
            Real s = 0.0;
            for (long long p = 0; p < k; ++p) s += a[p] * b[p];
            c[j] += s;
        }
    }
}

// C(k,n) += A^T * B where A is (m,k), B is (m,n)
void mm_acc_at(Real* C, const Real* A, const Real* B, long long m, long long k, long long n) {
    for (long long i = 0; i < m; ++i) {
        const Real* a = A + i * k;
        const Real* b = B + i * n;
        for (long long p = 0; p < k; ++p) {
            const Real av = a[p];
            if (av == 0.0) continue;
            Real* c = C + p * n;
            for (long long j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

}  // namespace

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    check(a->value.rank() == 2 && b->value.rank() == 2, "matmul: rank-2 required");
    const long long m = a->value.shape[0], k = a->value.shape[1];
    check(b->value.shape[0] == k, "matmul: inner dim mismatch");
    const long long n = b->value.shape[1];
    Tensor out({static_cast<int>(m), static_cast<int>(n)});
    mm_acc(out.data(), a->value.data(), b->value.data(), m, k, n);
    return make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
        const Tensor& A = self.parents[0]->value;
        const Tensor& B = self.parents[1]->value;
        if (self.parents[0]->requires_grad)  // dA = dC * B^T
            mm_acc_bt(self.parents[0]->grad.data(), self.grad.data(), B.data(), m, n, k);
        if (self.parents[1]->requires_grad)  // dB = A^T * dC
            mm_acc_at(self.parents[1]->grad.data(), A.data(), self.grad.data(), m, k, n);
    });
}

NodePtr bmm(const NodePtr& a, const NodePtr& b) {
    check(a->value.rank() == 3 && b->value.rank() == 3, "bmm: rank-3 required");
    const long long B = a->value.shape[0], m = a->value.shape[1], k = a->value.shape[2];
    check(b->value.shape[0] == B && b->value.shape[1] == k, "bmm: shape mismatch");
    const long long n = b->value.shape[2];
    Tensor out({static_cast<int>(B), static_cast<int>(m), static_cast<int>(n)});
    for (long long q = 0; q < B; ++q)
        mm_acc(out.data() + q * m * n, a->value.data() + q * m * k, b->value.data() + q * k * n,
               m, k, n);
    return make_node(std::move(out), {a, b}, [B, m, k, n](Node& self) {
        const Tensor& A = self.parents[0]->value;
        const Tensor& Bv = self.parents[1]->value;
        for (long long q = 0; q < B; ++q) {
            const Real* dC = self.grad.data() + q * m * n;
            if (self.parents[0]->requires_grad)
                mm_acc_bt(self.parents[0]->grad.data() + q * m * k, dC, Bv.data() + q * k * n,
                          m, n, k);
            if (self.parents[1]->requires_grad)
                mm_acc_at(self.parents[1]->grad.data() + q * k * n, A.data() + q * m * k, dC,
                          m, k, n);
        }
    });
}

NodePtr bmm_shared(const NodePtr& x, const NodePtr& w) {
    check(x->value.rank() == 3 && w->value.rank() == 2, "bmm_shared: bad ranks");
    const long long B = x->value.shape[0], m = x->value.shape[1], k = x->value.shape[2];
    check(w->value.shape[0] == k, "bmm_shared: inner dim mismatch");
    const long long n = w->value.shape[1];
    Tensor out({static_cast<int>(B), static_cast<int>(m), static_cast<int>(n)});
    // fold batch into rows: (B*m, k) x (k, n)
    mm_acc(out.data(), x->value.data(), w->value.data(), B * m, k, n);
    return make_node(std::move(out), {x, w}, [B, m, k, n](Node& self) {
        const Tensor& X = self.parents[0]->value;
        const Tensor& W = self.parents[1]->value;
        if (self.parents[0]->requires_grad)
            mm_acc_bt(self.parents[0]->grad.data(), self.grad.data(), W.data(), B * m, n, k);
        if (self.parents[1]->requires_grad)
            mm_acc_at(self.parents[1]->grad.data(), X.data(), self.grad.data(), B * m, k, n);
    });
}

NodePtr softmax_rows(const NodePtr& x) {
    auto [m, n] = rows_cols(x->value);
    Tensor out = x->value;
    for (long long i = 0; i < m; ++i) {
        Real* r = out.data() + i * n;
        Real mx = r[0];
        for (long long j = 1; j < n; ++j) mx = std::max(mx, r[j]);
        Real z = 0.0;
        for (long long j = 0; j < n; ++j) {
            r[j] = std::exp(r[j] - mx);
            z += r[j];
        }
        for (long long j = 0; j < n; ++j) r[j] /= z;
    }
    return make_node(std::move(out), {x}, [m = m, n = n](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (long long i = 0; i < m; ++i) {
            const Real* y = self.value.data() + i * n;
            const Real* dy = self.grad.data() + i * n;
            Real dot = 0.0;
            for (long long j = 0; j < n; ++j) dot += y[j] * dy[j];
            Real* dx = p.grad.data() + i * n;
            for (long long j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
}

NodePtr layernorm_rows(const NodePtr& x, Real eps) {
    auto [m, n] = rows_cols(x->value);
    Tensor out = x->value;
    Tensor inv_std({static_cast<int>(m)});
    for (long long i = 0; i < m; ++i) {
        Real* r = out.data() + i * n;
        Real mean = 0.0;
        for (long long j = 0; j < n; ++j) mean += r[j];
        mean /= static_cast<Real>(n);
        Real var = 0.0;
        for (long long j = 0; j < n; ++j) {
            r[j] -= mean;
            var += r[j] * r[j];
        }
        var /= static_cast<Real>(n);
        const Real is = 1.0 / std::sqrt(var + eps);
        inv_std.v[i] = is;
        for (long long j = 0; j < n; ++j) r[j] *= is;
    }
    return make_node(std::move(out), {x},
                     [m = m, n = n, inv_std = std::move(inv_std)](Node& self) {
                         Node& p = *self.parents[0];
                         if (!p.requires_grad) return;
                         for (long long i = 0; i < m; ++i) {
                             const Real* y = self.value.data() + i * n;
                             const Real* dy = self.grad.data() + i * n;
                             Real* dx = p.grad.data() + i * n;
                             Real sum_dy = 0.0, sum_dyy = 0.0;
                             for (long long j = 0; j < n; ++j) {
                                 sum_dy += dy[j];
                                 sum_dyy += dy[j] * y[j];
                             }
                             const Real is = inv_std.v[i];
                             const Real inv_n = 1.0 / static_cast<Real>(n);
                             for (long long j = 0; j < n; ++j)
                                 dx[j] += is * (dy[j] - inv_n * sum_dy - y[j] * inv_n * sum_dyy);
                         }
                     });
}

// --------------------------------------------------------------- convolution

namespace {

struct ConvDims {
    int Ci, T, H, W;
    int Co, K;
    int oT, oH, oW;
    int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride) {
    check(x.rank() == 4 && w.rank() == 5, "conv3d: x (C,T,H,W), w (Co,Ci,k,k,k)");
    ConvDims d;
    d.Ci = x.shape[0];
    d.T = x.shape[1];
    d.H = x.shape[2];
    d.W = x.shape[3];
    d.Co = w.shape[0];
    check(w.shape[1] == d.Ci, "conv3d: channel mismatch");
    d.K = w.shape[2];
    check(w.shape[3] == d.K && w.shape[4] == d.K, "conv3d: kernel must be cubic");
    d.stride = stride;
    d.pad = d.K / 2;
    d.oT = (d.T + 2 * d.pad - d.K) / stride + 1;
    d.oH = (d.H + 2 * d.pad - d.K) / stride + 1;
    d.oW = (d.W + 2 * d.pad - d.K) / stride + 1;
    return d;
}

inline size_t off4(int c, int t, int h, int w, int T, int H, int W) {
    return (((size_t)c * T + t) * H + h) * W + w;
}

}  // namespace

NodePtr conv3d(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride) {
    const ConvDims d = conv_dims(x->value, w->value, stride);
    check(b->value.numel() == d.Co, "conv3d: bias size mismatch");

    Tensor out({d.Co, d.oT, d.oH, d.oW});
    const Real* X = x->value.data();
    const Real* Wt = w->value.data();
    for (int o = 0; o < d.Co; ++o) {
        const Real bias = b->value.v[o];
        for (int ot = 0; ot < d.oT; ++ot)
            for (int oh = 0; oh < d.oH; ++oh)
                for (int ow = 0; ow < d.oW; ++ow) {
                    Real acc = bias;
                    const int t0 = ot * stride - d.pad;
                    const int h0 = oh * stride - d.pad;
                    const int w0 = ow * stride - d.pad;
                    for (int i = 0; i < d.Ci; ++i) {
                        const Real* wk = Wt + (((size_t)o * d.Ci + i) * d.K) * d.K * d.K;
                        for (int kt = 0; kt < d.K; ++kt) {
                            const int t = t0 + kt;
                            if (t < 0 || t >= d.T) continue;
                            for (int kh = 0; kh < d.K; ++kh) {
                                const int h = h0 + kh;
                                if (h < 0 || h >= d.H) continue;
                                for (int kw = 0; kw < d.K; ++kw) {
                                    const int ww = w0 + kw;
                                    if (ww < 0 || ww >= d.W) continue;
                                    acc += wk[(kt * d.K + kh) * d.K + kw] *
                                           X[off4(i, t, h, ww, d.T, d.H, d.W)];
                                }
                            }
                        }
                    }
                    out.v[off4(o, ot, oh, ow, d.oT, d.oH, d.oW)] = acc;
                }
    }

    return make_node(std::move(out), {x, w, b}, [d](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        Node& pb = *self.parents[2];
        const Real* X = px.value.data();
        const Real* Wt = pw.value.data();
        const Real* dY = self.grad.data();
        const bool gx = px.requires_grad, gw = pw.requires_grad, gb = pb.requires_grad;
        for (int o = 0; o < d.Co; ++o) {
            for (int ot = 0; ot < d.oT; ++ot)
                for (int oh = 0; oh < d.oH; ++oh)
                    for (int ow = 0; ow < d.oW; ++ow) {
                        const Real g = dY[off4(o, ot, oh, ow, d.oT, d.oH, d.oW)];
                        if (g == 0.0) continue;
                        if (gb) pb.grad.v[o] += g;
                        const int t0 = ot * d.stride - d.pad;
                        const int h0 = oh * d.stride - d.pad;
                        const int w0 = ow * d.stride - d.pad;
                        for (int i = 0; i < d.Ci; ++i) {
                            const size_t wbase = (((size_t)o * d.Ci + i) * d.K) * d.K * d.K;
                            for (int kt = 0; kt < d.K; ++kt) {
                                const int t = t0 + kt;
                                if (t < 0 || t >= d.T) continue;
                                for (int kh = 0; kh < d.K; ++kh) {
                                    const int h = h0 + kh;
                                    if (h < 0 || h >= d.H) continue;
                                    for (int kw = 0; kw < d.K; ++kw) {
                                        const int ww = w0 + kw;
                                        if (ww < 0 || ww >= d.W) continue;
                                        const size_t xoff = off4(i, t, h, ww, d.T, d.H, d.W);
                                        const size_t woff = wbase + (kt * d.K + kh) * d.K + kw;
                                        if (gw) pw.grad.v[woff] += g * X[xoff];
                                        if (gx) px.grad.v[xoff] += g * Wt[woff];
                                    }
                                }
                            }
                        }
                    }
        }
    });
}

NodePtr conv3d_transpose(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride) {
    check(x->value.rank() == 4 && w->value.rank() == 5,
          "conv3d_transpose: x (C,t,h,w), w (Ci,Co,k,k,k)");
    const int Ci = x->value.shape[0];
    const int t = x->value.shape[1], h = x->value.shape[2], ww_ = x->value.shape[3];
    check(w->value.shape[0] == Ci, "conv3d_transpose: channel mismatch");
    const int Co = w->value.shape[1];
    const int K = w->value.shape[2];
    const int pad = K / 2;
    const int outpad = stride - 1;
    const int oT = (t - 1) * stride - 2 * pad + K + outpad;
    const int oH = (h - 1) * stride - 2 * pad + K + outpad;
    const int oW = (ww_ - 1) * stride - 2 * pad + K + outpad;
    check(b->value.numel() == Co, "conv3d_transpose: bias size mismatch");

    Tensor out({Co, oT, oH, oW});
    for (int o = 0; o < Co; ++o) {
        const Real bias = b->value.v[o];
        Real* dst = out.data() + (size_t)o * oT * oH * oW;
        const long long n = (long long)oT * oH * oW;
        for (long long i = 0; i < n; ++i) dst[i] = bias;
    }
    const Real* X = x->value.data();
    const Real* Wt = w->value.data();
    // scatter: each input site contributes a kernel patch into the output
    for (int i = 0; i < Ci; ++i)
        for (int it = 0; it < t; ++it)
            for (int ih = 0; ih < h; ++ih)
                for (int iw = 0; iw < ww_; ++iw) {
                    const Real xv = X[off4(i, it, ih, iw, t, h, ww_)];
                    if (xv == 0.0) continue;
                    for (int o = 0; o < Co; ++o) {
                        const Real* wk = Wt + (((size_t)i * Co + o) * K) * K * K;
                        for (int kt = 0; kt < K; ++kt) {
                            const int ot = it * stride - pad + kt;
                            if (ot < 0 || ot >= oT) continue;
                            for (int kh = 0; kh < K; ++kh) {
                                const int oh = ih * stride - pad + kh;
                                if (oh < 0 || oh >= oH) continue;
                                for (int kw = 0; kw < K; ++kw) {
                                    const int ow = iw * stride - pad + kw;
                                    if (ow < 0 || ow >= oW) continue;
                                    out.v[off4(o, ot, oh, ow, oT, oH, oW)] +=
                                        xv * wk[(kt * K + kh) * K + kw];
                                }
                            }
                        }
                    }
                }

    struct Dims {
        int Ci, t, h, w, Co, K, pad, stride, oT, oH, oW;
    } dm{Ci, t, h, ww_, Co, K, pad, stride, oT, oH, oW};

    return make_node(std::move(out), {x, w, b}, [dm](Node& self) {
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        Node& pb = *self.parents[2];
        const Real* X = px.value.data();
        const Real* Wt = pw.value.data();
        const Real* dY = self.grad.data();
        if (pb.requires_grad) {
            for (int o = 0; o < dm.Co; ++o) {
                const Real* g = dY + (size_t)o * dm.oT * dm.oH * dm.oW;
                Real s = 0.0;
                const long long n = (long long)dm.oT * dm.oH * dm.oW;
                for (long long i = 0; i < n; ++i) s += g[i];
                pb.grad.v[o] += s;
            }
        }
        const bool gx = px.requires_grad, gw = pw.requires_grad;
        if (!gx && !gw) return;
        for (int i = 0; i < dm.Ci; ++i)
            for (int it = 0; it < dm.t; ++it)
                for (int ih = 0; ih < dm.h; ++ih)
                    for (int iw = 0; iw < dm.w; ++iw) {
                        const size_t xoff = off4(i, it, ih, iw, dm.t, dm.h, dm.w);
                        const Real xv = X[xoff];
                        Real dx = 0.0;
                        for (int o = 0; o < dm.Co; ++o) {
                            const size_t wbase = (((size_t)i * dm.Co + o) * dm.K) * dm.K * dm.K;
                            for (int kt = 0; kt < dm.K; ++kt) {
                                const int ot = it * dm.stride - dm.pad + kt;
                                if (ot < 0 || ot >= dm.oT) continue;
                                for (int kh = 0; kh < dm.K; ++kh) {
                                    const int oh = ih * dm.stride - dm.pad + kh;
                                    if (oh < 0 || oh >= dm.oH) continue;
                                    for (int kw = 0; kw < dm.K; ++kw) {
                                        const int ow = iw * dm.stride - dm.pad + kw;
                                        if (ow < 0 || ow >= dm.oW) continue;
                                        const Real g =
                                            dY[off4(o, ot, oh, ow, dm.oT, dm.oH, dm.oW)];
                                        const size_t woff = wbase + (kt * dm.K + kh) * dm.K + kw;
                                        if (gx) dx += g * Wt[woff];
                                        if (gw) pw.grad.v[woff] += g * xv;
                                    }
                                }
                            }
                        }
                        if (gx) px.grad.v[xoff] += dx;
                    }
    });
}

// ------------------------------------------------------------------- lookups

NodePtr embed_grid(const NodePtr& table, const std::vector<uint8_t>& labels, int T, int H,
                   int W, int D) {
    check(table->value.rank() == 2, "embed_grid: table (num_classes, cp)");
    const int num_classes = table->value.shape[0];
    const int cp = table->value.shape[1];
    check(static_cast<long long>(labels.size()) == (long long)T * H * W * D,
          "embed_grid: label count mismatch");
    for (uint8_t l : labels)
        check(l < num_classes, "embed_grid: label out of range");

    const long long S = (long long)T * H * W;  // spatial sites per depth column
    Tensor out({D * cp, T, H, W});
    const Real* Tb = table->value.data();
    for (long long s = 0; s < S; ++s) {
        for (int d = 0; d < D; ++d) {
            const int lab = labels[(size_t)s * D + d];
            const Real* row = Tb + (size_t)lab * cp;
            for (int j = 0; j < cp; ++j) out.v[((size_t)(d * cp + j)) * S + s] = row[j];
        }
    }
    return make_node(std::move(out), {table}, [labels, S, D, cp](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (long long s = 0; s < S; ++s)
            for (int d = 0; d < D; ++d) {
                const int lab = labels[(size_t)s * D + d];
                for (int j = 0; j < cp; ++j)
                    p.grad.v[(size_t)lab * cp + j] += self.grad.v[((size_t)(d * cp + j)) * S + s];
            }
    });
}

NodePtr gather_rows(const NodePtr& table, const std::vector<int>& idx) {
    check(table->value.rank() == 2, "gather_rows: table rank-2");
    const int N = table->value.shape[0], c = table->value.shape[1];
    const int M = static_cast<int>(idx.size());
    for (int i : idx) check(0 <= i && i < N, "gather_rows: index out of range");
    Tensor out({M, c});
    for (int i = 0; i < M; ++i)
        std::copy_n(table->value.data() + (size_t)idx[i] * c, c, out.data() + (size_t)i * c);
    return make_node(std::move(out), {table}, [idx, c](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (size_t i = 0; i < idx.size(); ++i)
            for (int j = 0; j < c; ++j)
                p.grad.v[(size_t)idx[i] * c + j] += self.grad.v[i * c + j];
    });
}

NodePtr depth_unfold(const NodePtr& x, int D, int K) {
    check(x->value.rank() == 4, "depth_unfold: rank-4 required");
    check(x->value.shape[0] == D * K, "depth_unfold: channel dim must be D*K");
    const int T = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    const long long S = (long long)T * H * W;
    Tensor out({K, T, H, W, D});
    for (int k = 0; k < K; ++k)
        for (long long s = 0; s < S; ++s)
            for (int d = 0; d < D; ++d)
                out.v[((size_t)k * S + s) * D + d] = x->value.v[((size_t)(d * K + k)) * S + s];
    return make_node(std::move(out), {x}, [D, K, S](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (int k = 0; k < K; ++k)
            for (long long s = 0; s < S; ++s)
                for (int d = 0; d < D; ++d)
                    p.grad.v[((size_t)(d * K + k)) * S + s] +=
                        self.grad.v[((size_t)k * S + s) * D + d];
    });
}

std::vector<int> nearest_codes(const Tensor& latent, const Tensor& codebook) {
    if (latent.rank() != 2 || codebook.rank() != 2)
        throw std::invalid_argument("nearest_codes: latent (c,S), codebook (N,c)");
    const int c = latent.shape[0];
    const long long S = latent.shape[1];
    const int N = codebook.shape[0];
    if (codebook.shape[1] != c)
        throw std::invalid_argument("nearest_codes: code dim mismatch");
    if (!latent.all_finite()) throw std::domain_error("nearest_codes: non-finite latent");

    std::vector<int> idx(S);
    for (long long s = 0; s < S; ++s) {
        Real best = std::numeric_limits<Real>::infinity();
        int best_i = 0;
        for (int n = 0; n < N; ++n) {
            const Real* code = codebook.data() + (size_t)n * c;
            Real dist = 0.0;
            for (int j = 0; j < c; ++j) {
                const Real d = latent.v[(size_t)j * S + s] - code[j];
                dist += d * d;
            }
            if (dist < best) {  // strict < keeps the lowest index on ties
                best = dist;
                best_i = n;
            }
        }
        idx[s] = best_i;
    }
    return idx;
}

NodePtr vq_straight_through(const NodePtr& latent, const Tensor& codebook,
                            std::vector<int>& indices_out) {
    indices_out = nearest_codes(latent->value, codebook);
    const int c = latent->value.shape[0];
    const long long S = latent->value.shape[1];
    Tensor out(latent->value.shape);
    for (long long s = 0; s < S; ++s) {
        const Real* code = codebook.data() + (size_t)indices_out[s] * c;
        for (int j = 0; j < c; ++j) out.v[(size_t)j * S + s] = code[j];
    }
    return make_node(std::move(out), {latent}, [](Node& self) {
        // straight-through: pass the gradient unchanged to the latent
        if (self.parents[0]->requires_grad) accumulate(*self.parents[0], self.grad);
    });
}

NodePtr dropout(const NodePtr& x, Real rate, Rng& rng) {
    if (rate <= 0.0) return x;
    check(rate < 1.0, "dropout: rate must be < 1");
    const Real keep = 1.0 - rate;
    Tensor mask(x->value.shape);
    for (auto& m : mask.v) m = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
    Tensor out = x->value;
    for (long long i = 0; i < out.numel(); ++i) out.v[i] *= mask.v[i];
    return make_node(std::move(out), {x}, [mask = std::move(mask)](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (long long i = 0; i < self.grad.numel(); ++i)
            p.grad.v[i] += self.grad.v[i] * mask.v[i];
    });
}

Tensor sinusoidal_table(int C, int M) {
    if (C <= 0 || C % 2 != 0) throw std::invalid_argument("sinusoidal_table: C must be even");
    if (M < 1) throw std::invalid_argument("sinusoidal_table: M >= 1 required");
    Tensor out({C, M});
    for (int k = 0; 2 * k < C; ++k) {
        const Real freq = std::pow(10000.0, -static_cast<Real>(2 * k) / static_cast<Real>(C));
        for (int i = 0; i < M; ++i) {
            const Real a = static_cast<Real>(i) * freq;
            out.v[(size_t)(2 * k) * M + i] = std::sin(a);
            out.v[(size_t)(2 * k + 1) * M + i] = std::cos(a);
        }
    }
    return out;
}

}  // namespace occ4d::nn
