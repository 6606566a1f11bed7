// AdamW with decoupled weight decay. Decay applies to weight matrices and
// conv kernels only; biases, embeddings, and the codebook are exempt.
#pragma once

#include <cmath>
#include <vector>

#include "occ4d/errors.hpp"
#include "occ4d/nn/autodiff.hpp"

namespace occ4d::nn {

class AdamW {
public:
    Real lr = 1e-3;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
    Real weight_decay = 0.01;

    void init(const std::vector<NodePtr>& params) {
        t_ = 0;
        m_.clear();
        v_.clear();
        decay_.clear();
        for (const auto& p : params) {
            m_.emplace_back(p->value.shape);
            v_.emplace_back(p->value.shape);
            decay_.push_back(default_decay_rule(*p) ? 1 : 0);
        }
    }

    static bool default_decay_rule(const Node& p) {
        if (p.value.rank() < 2) return false;
        return p.name.find("codebook") == std::string::npos &&
               p.name.find("embed") == std::string::npos;
    }

    void step(const std::vector<NodePtr>& params) {
        if (m_.size() != params.size()) init(params);
        ++t_;
        const Real bc1 = 1.0 - std::pow(beta1, static_cast<Real>(t_));
        const Real bc2 = 1.0 - std::pow(beta2, static_cast<Real>(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            Node& p = *params[i];
            if (!p.grad.same_shape(p.value)) continue;  // param not in this graph
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            const bool decay = decay_[i] != 0;
            for (long long j = 0; j < p.value.numel(); ++j) {
                const Real g = p.grad.v[j];
                if (!std::isfinite(g))
                    throw NumericError("non-finite gradient in parameter '" + p.name + "'");
                m.v[j] = beta1 * m.v[j] + (1.0 - beta1) * g;
                v.v[j] = beta2 * v.v[j] + (1.0 - beta2) * g * g;
                const Real mhat = m.v[j] / bc1;
                const Real vhat = v.v[j] / bc2;
                Real upd = mhat / (std::sqrt(vhat) + eps);
                if (decay) upd += weight_decay * p.value.v[j];
                p.value.v[j] -= lr * upd;
            }
        }
    }

    long long step_count() const { return t_; }
    void set_step_count(long long t) { t_ = t; }
    std::vector<Tensor>& moments_m() { return m_; }
    std::vector<Tensor>& moments_v() { return v_; }
    const std::vector<Tensor>& moments_m() const { return m_; }
    const std::vector<Tensor>& moments_v() const { return v_; }

private:
    long long t_ = 0;
    std::vector<Tensor> m_, v_;
    std::vector<uint8_t> decay_;
};

}  // namespace occ4d::nn
