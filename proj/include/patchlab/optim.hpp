#pragma once

#include <cmath>
#include <vector>

#include "patchlab/tensor.hpp"

namespace patchlab {

// Plain Adam over a fixed set of parameter tensors. Gradients arrive as raw
// vectors aligned with the parameter list.
class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void set_lr(double lr) { lr_ = lr; }

    void step(const std::vector<diffcore::Tensor*>& params,
              const std::vector<std::vector<double>>& grads) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i]->size(), 0.0);
                v_[i].assign(params[i]->size(), 0.0);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(b1_, t_);
        const double bc2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            diffcore::Tensor& p = *params[i];
            const std::vector<double>& g = grads[i];
            for (std::size_t j = 0; j < p.size(); ++j) {
                m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g[j];
                v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g[j] * g[j];
                p[j] -= lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
            }
        }
    }

private:
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace patchlab
