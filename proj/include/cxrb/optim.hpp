#pragma once

#include "cxrb/tensor.hpp"

#include <cmath>
#include <map>
#include <span>
#include <vector>

namespace cxrb {

/// SGD with heavy-ball momentum: v <- momentum*v + grad; p <- p - lr*v.
/// Gradients are zeroed after each step. Velocity is keyed by tensor storage,
/// so the same optimizer can be handed the parameter list in any order.
/// With clip_norm > 0 the gradients are first rescaled so that their joint
/// L2 norm does not exceed clip_norm.
template <class T = float>
class Sgd {
public:
    Sgd(double lr, double momentum, double clip_norm = 0.0) : lr_(lr), momentum_(momentum), clip_norm_(clip_norm)
    {
        if (!(clip_norm >= 0.0)) throw UsageError("sgd clip_norm must be non-negative");
        if (!(lr >= 0.0)) throw UsageError("sgd learning rate must be non-negative");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("sgd momentum must be in [0, 1)");
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    double momentum() const { return momentum_; }
    double clip_norm() const { return clip_norm_; }
    /// Gradient norm seen by the last step (only tracked when clipping).
    double last_norm() const { return last_norm_; }

    void step(std::span<Tensor<T>> params)
    {
        for (const auto& p : params)
            if (!p.requires_grad() || !p.has_grad())
                throw UsageError("sgd step on a parameter without a gradient, shape " + to_string(p.shape()));
        double factor = 1.0;
        if (clip_norm_ > 0.0) {
            double sq = 0.0;
            for (const auto& p : params)
                for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
            const double norm = std::sqrt(sq);
            last_norm_ = norm;
            if (norm > clip_norm_) factor = clip_norm_ / norm;
        }
        for (auto& p : params) {
            auto& v = velocity_[p.storage().get()];
            if (v.size() != p.numel()) v.assign(p.numel(), 0.0);
            auto data = p.data();
            auto grad = p.grad();
            for (std::size_t i = 0; i < data.size(); ++i) {
                v[i] = momentum_ * v[i] + factor * static_cast<double>(grad[i]);
                data[i] = static_cast<T>(static_cast<double>(data[i]) - lr_ * v[i]);
            }
            p.zero_grad();
        }
    }

private:
    double lr_;
    double momentum_;
    double clip_norm_;
    double last_norm_ = 0.0;
    std::map<const void*, std::vector<double>> velocity_;
};

/// Plain gradient step with no velocity state.
template <class T>
void sgd_step(std::span<Tensor<T>> params, double lr)
{
    Sgd<T>(lr, 0.0).step(params);
}

} // namespace cxrb
