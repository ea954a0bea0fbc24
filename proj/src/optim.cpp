#include "mim/optim.h"

#include <cmath>

#include "mim/error.h"
#include "mim/kernels.h"

namespace mim {

void LrSchedule::validate() const {
    if (warmup_steps < 0 || warmup_steps >= total_steps)
        throw RangeError("schedule requires 0 <= warmup_steps < total_steps");
    if (min_lr > base_lr) throw RangeError("schedule requires min_lr <= base_lr");
    if (base_lr < 0.0 || min_lr < 0.0) throw RangeError("learning rates must be non-negative");
}

double lr_at(const LrSchedule& s, std::int64_t step) {
    s.validate();
    if (step < 0 || step > s.total_steps)
        throw RangeError("step " + std::to_string(step) + " outside [0, " +
                         std::to_string(s.total_steps) + "]");
    if (step < s.warmup_steps)
        return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const double progress = static_cast<double>(step - s.warmup_steps) /
                            static_cast<double>(s.total_steps - s.warmup_steps);
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(M_PI * progress));
}

Tensor& OptimizerState::moment1(const std::string& name, const std::vector<std::size_t>& shape) {
    auto it = m_.find(name);
    if (it == m_.end()) {
        it = m_.emplace(name, Tensor(shape)).first;
        v_.emplace(name, Tensor(shape));
        order_.push_back(name);
    }
    return it->second;
}

Tensor& OptimizerState::moment2(const std::string& name, const std::vector<std::size_t>& shape) {
    moment1(name, shape);
    return v_.at(name);
}

std::vector<std::string> OptimizerState::moment_names() const { return order_; }

void adamw_step(ParamStore& params, const Gradients& grads, OptimizerState& state, double lr) {
    // Validate the full step before mutating anything.
    for (const auto& e : params.entries()) {
        const Tensor* g = grads.find(e.name);
        if (!e.trainable) {
            if (g) throw ContractError("frozen parameter " + e.name + " received a gradient");
            continue;
        }
        if (!g) throw ContractError("trainable parameter " + e.name + " has no gradient");
        if (!g->same_shape(e.value))
            throw ContractError("gradient shape " + g->shape_str() + " does not match parameter " +
                                e.name + " " + e.value.shape_str());
        if (!g->all_finite()) throw NumericError("non-finite gradient for parameter " + e.name);
    }

    const AdamwHyper& h = state.hyper();
    const std::int64_t t = state.step_count() + 1;
    const double bias1 = 1.0 - std::pow(static_cast<double>(h.beta1), static_cast<double>(t));
    const double bias2 = 1.0 - std::pow(static_cast<double>(h.beta2), static_cast<double>(t));

    for (auto& e : params.entries_mut()) {
        if (!e.trainable) continue;
        const Tensor& g = *grads.find(e.name);
        Tensor& m = state.moment1(e.name, e.value.shape());
        Tensor& v = state.moment2(e.name, e.value.shape());
        if (!m.same_shape(e.value))
            throw ContractError("optimizer moment shape does not match parameter " + e.name);
        kern::ops().adamw_update(e.value.data(), g.data(), m.data(), v.data(), e.value.size(),
                                 static_cast<float>(lr), h.beta1, h.beta2, h.epsilon,
                                 h.weight_decay, bias1, bias2);
    }
    state.set_step_count(t);
}

Gradients finite_diff_grad(const ScalarFn& f, ParamStore& params, float h) {
    if (!(h > 0.0f)) throw RangeError("finite-difference step must be positive");
    Gradients out;
    for (auto& e : params.entries_mut()) {
        if (!e.trainable) continue;
        Tensor& grad = out.accum(e.name, e.value.shape());
        for (std::size_t i = 0; i < e.value.size(); ++i) {
            const float saved = e.value[i];
            // The perturbed values round to f32, so divide by the step that
            // was actually realized, not by 2h.
            const float up = saved + h;
            const float dn = saved - h;
            const double denom = static_cast<double>(up) - static_cast<double>(dn);
            if (!(denom > 0.0))
                throw RangeError("finite-difference step underflows at " + e.name);
            e.value[i] = up;
            const double fp = f(params);
            e.value[i] = dn;
            const double fm = f(params);
            e.value[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("non-finite objective while differencing " + e.name);
            grad[i] = static_cast<float>((fp - fm) / denom);
        }
    }
    return out;
}

std::vector<double> finite_diff_at(const ScalarFn& f, ParamStore& params, float h,
                                   const std::vector<CoordRef>& coords) {
    if (!(h > 0.0f)) throw RangeError("finite-difference step must be positive");
    std::vector<double> out;
    out.reserve(coords.size());
    for (const auto& c : coords) {
        Tensor& t = params.get(c.name);
        if (c.index >= t.size()) throw ContractError("coordinate index out of range for " + c.name);
        const float saved = t[c.index];
        const float up = saved + h;
        const float dn = saved - h;
        const double denom = static_cast<double>(up) - static_cast<double>(dn);
        if (!(denom > 0.0))
            throw RangeError("finite-difference step underflows at " + c.name);
        t[c.index] = up;
        const double fp = f(params);
        t[c.index] = dn;
        const double fm = f(params);
        t[c.index] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("non-finite objective while differencing " + c.name);
        out.push_back((fp - fm) / denom);
    }
    return out;
}

}  // namespace mim
