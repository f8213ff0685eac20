#pragma once

#include "cde/tensor.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace cde {

struct AdamWHyper {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// Per-parameter-group optimizer state: first/second moment accumulators and
/// a shared step counter.
struct AdamWState {
    AdamWHyper hyper;
    std::uint64_t step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    void init(const std::vector<Tensor>& params);
    bool initialized() const { return !m.empty(); }
};

/// Decoupled weight decay update: p *= (1 - lr*wd), then the bias-corrected
/// Adam step. Shapes of params/grads/state must agree.
void adamw_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamWState& state);

/// base_lr * (1 + cos(pi * step/total)) / 2; steps past the end clamp to the
/// final value (0).
double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr);

/// Central-difference gradient estimate of a scalar function, one coordinate
/// at a time. This is the test oracle the reverse-mode engine is checked
/// against; it only ever calls f.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

} // namespace cde
