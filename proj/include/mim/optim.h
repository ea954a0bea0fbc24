#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mim/tensor.h"

namespace mim {

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay from
// base_lr to min_lr over the remaining steps.
struct LrSchedule {
    double base_lr = 1.5e-3;
    double min_lr = 0.0;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 1;

    void validate() const;
};

double lr_at(const LrSchedule& s, std::int64_t step);

struct AdamwHyper {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
    float weight_decay = 5e-2f;
};

// First/second moments per trainable parameter plus the step counter.
class OptimizerState {
public:
    OptimizerState() = default;
    explicit OptimizerState(AdamwHyper h) : hyper_(h) {}

    const AdamwHyper& hyper() const { return hyper_; }
    AdamwHyper& hyper() { return hyper_; }
    std::int64_t step_count() const { return step_; }

    Tensor& moment1(const std::string& name, const std::vector<std::size_t>& shape);
    Tensor& moment2(const std::string& name, const std::vector<std::size_t>& shape);
    bool has_moments(const std::string& name) const { return m_.count(name) != 0; }
    const Tensor& moment1(const std::string& name) const { return m_.at(name); }
    const Tensor& moment2(const std::string& name) const { return v_.at(name); }

    void set_step_count(std::int64_t s) { step_ = s; }

    // For checkpointing: moments in a deterministic order.
    std::vector<std::string> moment_names() const;

private:
    friend void adamw_step(ParamStore&, const Gradients&, OptimizerState&, double);
    AdamwHyper hyper_;
    std::int64_t step_ = 0;
    std::unordered_map<std::string, Tensor> m_, v_;
    std::vector<std::string> order_;
};

// One AdamW update over every trainable parameter. Frozen entries must not
// appear in grads and are left bit-untouched. Throws ContractError on a
// missing/mismatched gradient and NumericError (naming the parameter) on a
// non-finite gradient.
void adamw_step(ParamStore& params, const Gradients& grads, OptimizerState& state, double lr);

// Central-difference gradient of a scalar function of the store, perturbing
// trainable entries coordinate by coordinate. The test oracle for every
// hand-derived backward pass.
using ScalarFn = std::function<double(const ParamStore&)>;

Gradients finite_diff_grad(const ScalarFn& f, ParamStore& params, float h);

// Sampled variant: only the listed (name, flat index) coordinates, for
// full-pipeline checks where the exhaustive sweep would be too slow.
struct CoordRef {
    std::string name;
    std::size_t index;
};
std::vector<double> finite_diff_at(const ScalarFn& f, ParamStore& params, float h,
                                   const std::vector<CoordRef>& coords);

}  // namespace mim
