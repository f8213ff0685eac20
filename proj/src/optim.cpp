#include "cde/optim.hpp"

#include "cde/errors.hpp"

#include <cmath>

namespace cde {

void AdamWState::init(const std::vector<Tensor>& params) {
    step = 0;
    m.clear();
    v.clear();
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Tensor& p : params) {
        m.push_back(Tensor::zeros(p.shape()));
        v.push_back(Tensor::zeros(p.shape()));
    }
}

void adamw_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamWState& state) {
    if (!state.initialized()) state.init(params);
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw NumericsError("adamw_step: parameter/gradient/state count mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].same_shape(grads[i]) || !params[i].same_shape(state.m[i])) {
            throw NumericsError("adamw_step: shape mismatch at parameter " + std::to_string(i) +
                                ": param " + params[i].shape_str() + " grad " +
                                grads[i].shape_str());
        }
    }
    state.step += 1;
    const AdamWHyper& h = state.hyper;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    const double decay = 1.0 - h.lr * h.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        double* p = params[i].data();
        const double* g = grads[i].data();
        double* m = state.m[i].data();
        double* v = state.v[i].data();
        const std::size_t sz = params[i].size();
        for (std::size_t j = 0; j < sz; ++j) {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            p[j] *= decay;
            p[j] -= h.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + h.eps);
        }
        params[i].ensure_finite("adamw parameter " + std::to_string(i));
    }
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr) {
    if (total_steps == 0) throw NumericsError("cosine_lr: total_steps must be > 0");
    if (step >= total_steps) return 0.0; // clamp to the final value
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    constexpr double pi = 3.14159265358979323846;
    return base_lr * (1.0 + std::cos(pi * frac)) / 2.0;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (h <= 0.0) throw NumericsError("finite_diff_grad: h must be positive");
    Tensor grad = Tensor::zeros(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe.at(i);
        probe.at(i) = orig + h;
        const double fp = f(probe);
        probe.at(i) = orig - h;
        const double fm = f(probe);
        probe.at(i) = orig;
        grad.at(i) = (fp - fm) / (2.0 * h);
    }
    return grad;
}

} // namespace cde
