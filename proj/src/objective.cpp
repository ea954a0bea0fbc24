#include "mim/objective.h"

#include <cmath>
#include <string>
#include <vector>

#include "mim/error.h"
#include "mim/kernels.h"
#include "mim/rng.h"

namespace mim {

namespace {

constexpr double kCosEps = 1e-8;

void check_pair(const Tensor& F, const Tensor& G) {
    if (F.rank() != 2 || G.rank() != 2)
        throw ContractError("loss inputs must be token matrices");
    if (F.rows() != G.rows())
        throw ContractError("token count mismatch: prediction has " + std::to_string(F.rows()) +
                            " rows, teacher has " + std::to_string(G.rows()));
    if (F.cols() != G.cols())
        throw ContractError("feature width mismatch: prediction " + std::to_string(F.cols()) +
                            " vs teacher " + std::to_string(G.cols()));
}

// Cosine of one token pair plus, optionally, its gradient w.r.t. the F row
// scaled by `grad_scale` (the -1/token_count factor folded in by the caller).
double token_cosine(const float* f, const float* g, std::size_t dim, double grad_scale,
                    float* df) {
    const kern::Ops& K = kern::ops();
    const double a2 = K.sum_sq(f, dim);
    const double b2 = K.sum_sq(g, dim);
    const double a = std::sqrt(a2);
    const double b = std::sqrt(b2);
    const double d = K.dot(f, g, dim);
    const double denom = a * b + kCosEps;
    const double c = d / denom;
    if (df != nullptr) {
        // dc/df_i = g_i/denom - c * b * (f_i/a) / denom; the norm's
        // subgradient at a = 0 is taken as zero (then d = 0 as well).
        const double coef_g = grad_scale / denom;
        const double coef_f = a > 0.0 ? grad_scale * d * b / (denom * denom * a) : 0.0;
        for (std::size_t i = 0; i < dim; ++i)
            df[i] = static_cast<float>(coef_g * static_cast<double>(g[i]) -
                                       coef_f * static_cast<double>(f[i]));
    }
    return c;
}

void check_spec(const Tensor& F, const MaskSpec& spec) {
    if (F.rows() != spec.cell_count() + 1)
        throw ContractError("mask grid " + std::to_string(spec.grid_h) + "x" +
                            std::to_string(spec.grid_w) + " does not match " +
                            std::to_string(F.rows()) + " prediction rows");
}

}  // namespace

void add_head(ParamStore& params, std::size_t embed_dim, std::size_t teacher_dim,
              std::uint64_t seed) {
    if (embed_dim == 0 || teacher_dim == 0) throw ContractError("head dims must be positive");
    Rng rng(substream(seed, "head-init"));
    Tensor w({teacher_dim, embed_dim});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.trunc_normal(0.02f);
    Tensor b({teacher_dim});
    b.fill(0.0f);
    params.add("head.weight", std::move(w));
    params.add("head.bias", std::move(b));
}

TokenSequence predict(const TokenSequence& features, const ParamStore& params) {
    const Tensor& w = params.get("head.weight");
    const Tensor& b = params.get("head.bias");
    if (features.cols() != w.cols())
        throw ContractError("feature width " + std::to_string(features.cols()) +
                            " does not match head input width " + std::to_string(w.cols()));
    Tensor out({features.rows(), w.rows()});
    kern::ops().linear_forward(w.data(), b.data(), features.data(), out.data(), features.rows(),
                               w.rows(), features.cols());
    return out;
}

Tensor predict_backward(const Tensor& d_prediction, const TokenSequence& features,
                        const ParamStore& params, Gradients& grads) {
    const Tensor& w = params.get("head.weight");
    if (d_prediction.rows() != features.rows() || d_prediction.cols() != w.rows())
        throw ContractError("prediction gradient shape " + d_prediction.shape_str() +
                            " does not match head output");
    if (features.cols() != w.cols())
        throw ContractError("feature width does not match head input width");
    Tensor d_features({features.rows(), features.cols()});
    d_features.fill(0.0f);
    Tensor& dw = grads.accum("head.weight", w.shape());
    Tensor& db = grads.accum("head.bias", {w.rows()});
    kern::ops().linear_backward(w.data(), features.data(), d_prediction.data(), dw.data(),
                                db.data(), d_features.data(), features.rows(), w.rows(),
                                features.cols());
    return d_features;
}

double mvp_loss(const Tensor& F, const Tensor& G) {
    check_pair(F, G);
    const std::size_t tokens = F.rows();
    double acc = 0.0;
    for (std::size_t t = 0; t < tokens; ++t)
        acc += token_cosine(F.row(t), G.row(t), F.cols(), 0.0, nullptr);
    return -acc / static_cast<double>(tokens);
}

double mvp_loss_backward(const Tensor& F, const Tensor& G, Tensor& dF) {
    check_pair(F, G);
    if (!dF.same_shape(F)) throw ContractError("dF shape does not match F");
    const std::size_t tokens = F.rows();
    const double scale = -1.0 / static_cast<double>(tokens);
    double acc = 0.0;
    for (std::size_t t = 0; t < tokens; ++t)
        acc += token_cosine(F.row(t), G.row(t), F.cols(), scale, dF.row(t));
    return -acc / static_cast<double>(tokens);
}

double masked_only_loss(const Tensor& F, const Tensor& G, const MaskSpec& spec) {
    check_pair(F, G);
    check_spec(F, spec);
    const std::size_t terms = 1 + spec.masked.size();
    double acc = token_cosine(F.row(0), G.row(0), F.cols(), 0.0, nullptr);
    for (std::size_t cell : spec.masked)
        acc += token_cosine(F.row(cell + 1), G.row(cell + 1), F.cols(), 0.0, nullptr);
    return -acc / static_cast<double>(terms);
}

double masked_only_loss_backward(const Tensor& F, const Tensor& G, const MaskSpec& spec,
                                 Tensor& dF) {
    check_pair(F, G);
    check_spec(F, spec);
    if (!dF.same_shape(F)) throw ContractError("dF shape does not match F");
    dF.fill(0.0f);  // unmasked patch tokens contribute nothing
    const std::size_t terms = 1 + spec.masked.size();
    const double scale = -1.0 / static_cast<double>(terms);
    double acc = token_cosine(F.row(0), G.row(0), F.cols(), scale, dF.row(0));
    for (std::size_t cell : spec.masked)
        acc += token_cosine(F.row(cell + 1), G.row(cell + 1), F.cols(), scale, dF.row(cell + 1));
    return -acc / static_cast<double>(terms);
}

}  // namespace mim
