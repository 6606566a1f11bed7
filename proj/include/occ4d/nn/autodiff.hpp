// Reverse-mode autodiff over dense double tensors. The graph is built
// dynamically per forward pass; parameters are long-lived leaf nodes.
//
// Calling convention for a training step:
//   zero_grads(params); auto loss = ...; backward(loss); optimizer.step(params);
// backward() is single-threaded with respect to the parameter set it touches.
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "occ4d/nn/rng.hpp"
#include "occ4d/nn/tensor.hpp"

namespace occ4d::nn {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // sized lazily by backward(); valid for nodes on a grad path
    bool requires_grad = false;
    int visit_mark = 0;  // scratch for topo sort
    std::string name;    // set for parameters, used in diagnostics
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;
};

NodePtr constant(Tensor t);
NodePtr param(Tensor t, std::string name);
NodePtr make_node(Tensor value, std::vector<NodePtr> parents, std::function<void(Node&)> bw);

// Runs reverse-mode accumulation from a scalar root. Grads of all visited
// nodes are zeroed first, so intermediate grads are fresh per call.
void backward(const NodePtr& root);
void zero_grads(const std::vector<NodePtr>& params);

// ---- elementwise ----
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr div_ew(const NodePtr& a, const NodePtr& b);
NodePtr scale(const NodePtr& a, Real s);
NodePtr add_scalar(const NodePtr& a, Real s);
NodePtr exp_ew(const NodePtr& a);
NodePtr silu(const NodePtr& a);
NodePtr detach(const NodePtr& a);

// ---- broadcasts over a rank-2 view (rows, cols) ----
NodePtr add_rowvec(const NodePtr& x, const NodePtr& v);  // x:(m,n) v:(n)
NodePtr mul_rowvec(const NodePtr& x, const NodePtr& v);
NodePtr add_colvec(const NodePtr& x, const NodePtr& v);  // x:(m,n) v:(m)

// ---- shape ----
NodePtr reshape(const NodePtr& a, std::vector<int> shape);
NodePtr transpose2(const NodePtr& a);                       // (m,n) -> (n,m)
NodePtr permute3(const NodePtr& a, const std::array<int, 3>& perm);
NodePtr slice_cols(const NodePtr& x, int c0, int c1);       // (m,n) -> (m,c1-c0)

// ---- reductions & losses ----
NodePtr mean_all(const NodePtr& a);
NodePtr mse(const NodePtr& a, const NodePtr& b);  // mean (a-b)^2
// logits (K, V) column per sample; labels[v] in [0, K)
NodePtr cross_entropy_mean(const NodePtr& logits, const std::vector<int>& labels);

// ---- linear algebra ----
NodePtr matmul(const NodePtr& a, const NodePtr& b);          // (m,k)x(k,n)
NodePtr bmm(const NodePtr& a, const NodePtr& b);             // (B,m,k)x(B,k,n)
NodePtr bmm_shared(const NodePtr& x, const NodePtr& w);      // (B,m,k)x(k,n)
NodePtr softmax_rows(const NodePtr& x);                      // over last axis
NodePtr layernorm_rows(const NodePtr& x, Real eps = 1e-5);   // per-row, no affine

// ---- 3-D convolution over (C, T, H, W), padding = ksize/2 ----
NodePtr conv3d(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride);
// transposed conv, weight (Ci, Co, k, k, k); output side = in*stride for
// stride 2 (output_padding = stride-1) and side = in for stride 1
NodePtr conv3d_transpose(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride);

// ---- lookups ----
// labels laid out (T,H,W,D) row-major; result (D*cp, T, H, W) with channel d*cp+j
NodePtr embed_grid(const NodePtr& table, const std::vector<uint8_t>& labels,
                   int T, int H, int W, int D);
NodePtr gather_rows(const NodePtr& table, const std::vector<int>& idx);  // (N,c) -> (M,c)
// (D*K, T,H,W) -> (K, T,H,W,D) with input channel d*K+k
NodePtr depth_unfold(const NodePtr& x, int D, int K);

// Nearest-code snap with identity (straight-through) gradient to `latent`.
// The codebook receives no gradient through this op; its training signal
// comes from the codebook loss term. latent (c,S), codebook (N,c).
NodePtr vq_straight_through(const NodePtr& latent, const Tensor& codebook,
                            std::vector<int>& indices_out);

// Inverted dropout; identity when rate == 0.
NodePtr dropout(const NodePtr& x, Real rate, Rng& rng);

// ---- plain-tensor helpers (no autodiff) ----
// Nearest-code indices, ties resolved to the lowest index. latent (c,S).
std::vector<int> nearest_codes(const Tensor& latent, const Tensor& codebook);
// emb[2k, i] = sin(i / 10000^{2k/C}), emb[2k+1, i] = cos(same); shape (C, M)
Tensor sinusoidal_table(int C, int M);

}  // namespace occ4d::nn
