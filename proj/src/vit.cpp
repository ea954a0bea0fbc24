#include "mim/vit.h"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mim/error.h"
#include "mim/kernels.h"
#include "mim/rng.h"

namespace mim {
namespace {

constexpr double kLnEps = 1e-6;

// Row-wise (x - mean)/sqrt(var + eps) * gamma + beta, keeping per-row mean
// and reciprocal stddev for the backward pass.
void layernorm_rows(const Tensor& x, const float* gamma, const float* beta, Tensor& y,
                    std::vector<double>& mu, std::vector<double>& rstd) {
    const std::size_t rows = x.rows(), d = x.cols();
    mu.resize(rows);
    rstd.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = x.row(r);
        const double m = kern::ops().sum(xr, d) / static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double diff = static_cast<double>(xr[i]) - m;
            var += diff * diff;
        }
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        mu[r] = m;
        rstd[r] = rs;
        float* yr = y.row(r);
        for (std::size_t i = 0; i < d; ++i) {
            const double xhat = (static_cast<double>(xr[i]) - m) * rs;
            yr[i] = static_cast<float>(xhat * static_cast<double>(gamma[i]) +
                                       static_cast<double>(beta[i]));
        }
    }
}

// dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)); accumulates
// dgamma/dbeta. dx rows are written, not accumulated.
void layernorm_backward_rows(const Tensor& dy, const Tensor& x, const std::vector<double>& mu,
                             const std::vector<double>& rstd, const float* gamma, Tensor& dx,
                             Tensor& dgamma, Tensor& dbeta) {
    const std::size_t rows = x.rows(), d = x.cols();
    std::vector<double> dxhat(d), xhat(d);
    std::vector<double> dg(d, 0.0), db(d, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = x.row(r);
        const float* dyr = dy.row(r);
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            xhat[i] = (static_cast<double>(xr[i]) - mu[r]) * rstd[r];
            dxhat[i] = static_cast<double>(dyr[i]) * static_cast<double>(gamma[i]);
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[i];
            dg[i] += static_cast<double>(dyr[i]) * xhat[i];
            db[i] += static_cast<double>(dyr[i]);
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        float* dxr = dx.row(r);
        for (std::size_t i = 0; i < d; ++i)
            dxr[i] = static_cast<float>(rstd[r] *
                                        (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat));
    }
    for (std::size_t i = 0; i < d; ++i) {
        dgamma[i] = static_cast<float>(static_cast<double>(dgamma[i]) + dg[i]);
        dbeta[i] = static_cast<float>(static_cast<double>(dbeta[i]) + db[i]);
    }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

void check_finite(const Tensor& t, const std::string& where) {
    if (!t.all_finite()) throw NumericError("non-finite activation after " + where);
}

std::string block_name(std::size_t i) { return "blocks." + std::to_string(i); }

struct BlockParams {
    const Tensor *ln1_w, *ln1_b, *qw, *qb, *kw, *kb, *vw, *vb, *pw, *pb;
    const Tensor *ln2_w, *ln2_b, *f1w, *f1b, *f2w, *f2b;
};

BlockParams block_params(const ParamStore& p, std::size_t i) {
    const std::string b = block_name(i) + ".";
    return BlockParams{
        &p.get(b + "ln1.weight"),      &p.get(b + "ln1.bias"),
        &p.get(b + "attn.q.weight"),   &p.get(b + "attn.q.bias"),
        &p.get(b + "attn.k.weight"),   &p.get(b + "attn.k.bias"),
        &p.get(b + "attn.v.weight"),   &p.get(b + "attn.v.bias"),
        &p.get(b + "attn.proj.weight"), &p.get(b + "attn.proj.bias"),
        &p.get(b + "ln2.weight"),      &p.get(b + "ln2.bias"),
        &p.get(b + "mlp.fc1.weight"),  &p.get(b + "mlp.fc1.bias"),
        &p.get(b + "mlp.fc2.weight"),  &p.get(b + "mlp.fc2.bias"),
    };
}

}  // namespace

void ViTConfig::validate() const {
    if (patch_size == 0 || image_size % patch_size != 0)
        throw UserError("image_size must be a positive multiple of patch_size");
    if (heads == 0 || embed_dim % heads != 0)
        throw UserError("embed_dim must be divisible by heads");
    if (depth < 1) throw UserError("depth must be at least 1");
    if (channels == 0) throw UserError("channels must be positive");
    if (mlp_dim() < 1) throw UserError("mlp_ratio too small for embed_dim");
}

std::size_t ViTConfig::mlp_dim() const {
    return static_cast<std::size_t>(
        std::llround(static_cast<double>(embed_dim) * static_cast<double>(mlp_ratio)));
}

ViTConfig vit_preset(std::string_view name) {
    if (name == "vit-micro") return ViTConfig{32, 8, 3, 64, 4, 4, 4.0f};
    if (name == "vit-mini") return ViTConfig{64, 8, 3, 128, 6, 4, 4.0f};
    if (name == "vit-b16") return ViTConfig{224, 16, 3, 768, 12, 12, 4.0f};
    if (name == "vit-l16") return ViTConfig{224, 16, 3, 1024, 24, 16, 4.0f};
    throw UserError("unknown model preset '" + std::string(name) +
                    "' (expected vit-micro, vit-mini, vit-b16, or vit-l16)");
}

const std::vector<std::string>& vit_preset_names() {
    static const std::vector<std::string> names{"vit-micro", "vit-mini", "vit-b16", "vit-l16"};
    return names;
}

ParamStore init_params(const ViTConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng(substream(seed, "vit-init"));
    ParamStore p;
    const auto weight = [&](const std::string& name, std::vector<std::size_t> shape) {
        Tensor t(std::move(shape));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.trunc_normal(0.02f);
        p.add(name, std::move(t));
    };
    const auto zeros = [&](const std::string& name, std::vector<std::size_t> shape) {
        p.add(name, Tensor(std::move(shape)));
    };
    const auto ones = [&](const std::string& name, std::vector<std::size_t> shape) {
        Tensor t(std::move(shape));
        t.fill(1.0f);
        p.add(name, std::move(t));
    };

    const std::size_t d = c.embed_dim;
    weight("patch_embed.weight", {d, c.patch_dim()});
    zeros("patch_embed.bias", {d});
    weight("cls_token", {d});
    weight("pos_embed", {c.token_count(), d});
    weight("mask_token", {d});
    for (std::size_t i = 0; i < c.depth; ++i) {
        const std::string b = block_name(i) + ".";
        ones(b + "ln1.weight", {d});
        zeros(b + "ln1.bias", {d});
        for (const char* proj : {"q", "k", "v", "proj"}) {
            weight(b + "attn." + proj + ".weight", {d, d});
            zeros(b + "attn." + proj + ".bias", {d});
        }
        ones(b + "ln2.weight", {d});
        zeros(b + "ln2.bias", {d});
        weight(b + "mlp.fc1.weight", {c.mlp_dim(), d});
        zeros(b + "mlp.fc1.bias", {c.mlp_dim()});
        weight(b + "mlp.fc2.weight", {d, c.mlp_dim()});
        zeros(b + "mlp.fc2.bias", {d});
    }
    ones("norm.weight", {d});
    zeros("norm.bias", {d});
    return p;
}

Tensor patchify(const Tensor& image, const ViTConfig& c) {
    if (image.rank() != 3 || image.dim(0) != c.image_size || image.dim(1) != c.image_size ||
        image.dim(2) != c.channels)
        throw ContractError("image shape " + image.shape_str() + " does not match config (" +
                            std::to_string(c.image_size) + "x" + std::to_string(c.image_size) +
                            "x" + std::to_string(c.channels) + ")");
    const std::size_t g = c.grid(), ps = c.patch_size, ch = c.channels, w = c.image_size;
    Tensor patches({c.patch_count(), c.patch_dim()});
    for (std::size_t gy = 0; gy < g; ++gy) {
        for (std::size_t gx = 0; gx < g; ++gx) {
            float* row = patches.row(gy * g + gx);
            std::size_t j = 0;
            for (std::size_t py = 0; py < ps; ++py) {
                const std::size_t y = gy * ps + py;
                const float* src = image.data() + (y * w + gx * ps) * ch;
                for (std::size_t k = 0; k < ps * ch; ++k) row[j++] = src[k];
            }
        }
    }
    return patches;
}

TokenSequence embed(const Tensor& patches, const ParamStore& params, const ViTConfig& c) {
    const std::size_t m = c.patch_count(), d = c.embed_dim;
    if (patches.rows() != m || patches.cols() != c.patch_dim())
        throw ContractError("patch matrix shape " + patches.shape_str() +
                            " does not match config");
    const Tensor& w = params.get("patch_embed.weight");
    const Tensor& b = params.get("patch_embed.bias");
    const Tensor& cls = params.get("cls_token");
    const Tensor& pos = params.get("pos_embed");
    if (pos.rows() != m + 1 || pos.cols() != d)
        throw ContractError("pos_embed shape " + pos.shape_str() + " does not match config");

    TokenSequence tokens({m + 1, d});
    for (std::size_t i = 0; i < d; ++i) tokens[i] = cls[i];
    kern::ops().linear_forward(w.data(), b.data(), patches.data(), tokens.row(1), m, d,
                               c.patch_dim());
    kern::ops().add(tokens.data(), pos.data(), (m + 1) * d);
    return tokens;
}

void embed_backward(const Tensor& d_embedded, const Tensor& patches, const ViTConfig& c,
                    Gradients& grads) {
    const std::size_t m = c.patch_count(), d = c.embed_dim;
    if (d_embedded.rows() != m + 1 || d_embedded.cols() != d)
        throw ContractError("embedding gradient shape " + d_embedded.shape_str() +
                            " does not match config");
    kern::ops().add(grads.accum("pos_embed", {m + 1, d}).data(), d_embedded.data(), (m + 1) * d);
    kern::ops().add(grads.accum("cls_token", {d}).data(), d_embedded.data(), d);
    kern::ops().linear_backward(nullptr, patches.data(), d_embedded.row(1),
                                grads.accum("patch_embed.weight", {d, c.patch_dim()}).data(),
                                grads.accum("patch_embed.bias", {d}).data(), nullptr, m, d,
                                c.patch_dim());
}

TokenSequence vit_forward(const TokenSequence& tokens, const ParamStore& params,
                          const ViTConfig& c, VitActivations* acts, AttentionRecord* attn) {
    c.validate();
    const std::size_t t_count = tokens.rows(), d = c.embed_dim;
    if (tokens.cols() != d)
        throw ContractError("token width " + std::to_string(tokens.cols()) +
                            " does not match embed_dim " + std::to_string(d));
    const std::size_t hd = c.head_dim(), mlp = c.mlp_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    const kern::Ops& K = kern::ops();

    if (acts) {
        acts->blocks.clear();
        acts->blocks.resize(c.depth);
    }
    if (attn) {
        attn->layers.assign(c.depth, {});
    }

    Tensor x = tokens;
    std::vector<double> srow(t_count), erow(t_count);
    for (std::size_t layer = 0; layer < c.depth; ++layer) {
        const BlockParams bp = block_params(params, layer);
        BlockCache local;
        BlockCache& bc = acts ? (*acts).blocks[layer] : local;
        bc.x = x;

        bc.h1 = Tensor({t_count, d});
        layernorm_rows(x, bp.ln1_w->data(), bp.ln1_b->data(), bc.h1, bc.mu1, bc.rstd1);

        bc.q = Tensor({t_count, d});
        bc.k = Tensor({t_count, d});
        bc.v = Tensor({t_count, d});
        K.linear_forward(bp.qw->data(), bp.qb->data(), bc.h1.data(), bc.q.data(), t_count, d, d);
        K.linear_forward(bp.kw->data(), bp.kb->data(), bc.h1.data(), bc.k.data(), t_count, d, d);
        K.linear_forward(bp.vw->data(), bp.vb->data(), bc.h1.data(), bc.v.data(), t_count, d, d);

        bc.attn.assign(c.heads, Tensor({t_count, t_count}));
        bc.attn_concat = Tensor({t_count, d});
        std::vector<double> acc(hd);
        for (std::size_t h = 0; h < c.heads; ++h) {
            const std::size_t off = h * hd;
            Tensor& a = bc.attn[h];
            for (std::size_t t = 0; t < t_count; ++t) {
                // scaled scores for one query row, then a stable softmax
                double mx = -HUGE_VAL;
                for (std::size_t u = 0; u < t_count; ++u) {
                    srow[u] = K.dot(bc.q.row(t) + off, bc.k.row(u) + off, hd) * inv_sqrt_hd;
                    mx = std::max(mx, srow[u]);
                }
                double z = 0.0;
                for (std::size_t u = 0; u < t_count; ++u) {
                    erow[u] = std::exp(srow[u] - mx);
                    z += erow[u];
                }
                float* arow = a.row(t);
                for (std::size_t u = 0; u < t_count; ++u)
                    arow[u] = static_cast<float>(erow[u] / z);

                std::fill(acc.begin(), acc.end(), 0.0);
                for (std::size_t u = 0; u < t_count; ++u)
                    K.accum_scaled(acc.data(), bc.v.row(u) + off,
                                   static_cast<double>(arow[u]), hd);
                float* orow = bc.attn_concat.row(t) + off;
                for (std::size_t i = 0; i < hd; ++i) orow[i] = static_cast<float>(acc[i]);
            }
            if (attn) attn->layers[layer].push_back(a);
        }

        Tensor attn_out({t_count, d});
        K.linear_forward(bp.pw->data(), bp.pb->data(), bc.attn_concat.data(), attn_out.data(),
                         t_count, d, d);
        bc.x2 = x;
        K.add(bc.x2.data(), attn_out.data(), t_count * d);

        bc.h2 = Tensor({t_count, d});
        layernorm_rows(bc.x2, bp.ln2_w->data(), bp.ln2_b->data(), bc.h2, bc.mu2, bc.rstd2);

        bc.pre_act = Tensor({t_count, mlp});
        K.linear_forward(bp.f1w->data(), bp.f1b->data(), bc.h2.data(), bc.pre_act.data(),
                         t_count, mlp, d);
        bc.act = Tensor({t_count, mlp});
        for (std::size_t i = 0; i < bc.pre_act.size(); ++i)
            bc.act[i] = static_cast<float>(gelu(static_cast<double>(bc.pre_act[i])));

        Tensor f2({t_count, d});
        K.linear_forward(bp.f2w->data(), bp.f2b->data(), bc.act.data(), f2.data(), t_count, d,
                         mlp);
        x = bc.x2;
        K.add(x.data(), f2.data(), t_count * d);
        check_finite(x, block_name(layer));
    }

    Tensor out({t_count, d});
    std::vector<double> mu_f, rstd_f;
    layernorm_rows(x, params.get("norm.weight").data(), params.get("norm.bias").data(), out,
                   mu_f, rstd_f);
    check_finite(out, "norm");
    if (acts) {
        acts->final_in = std::move(x);
        acts->mu_f = std::move(mu_f);
        acts->rstd_f = std::move(rstd_f);
    }
    return out;
}

Tensor vit_backward(const Tensor& d_out, const VitActivations& acts, const ParamStore& params,
                    const ViTConfig& c, Gradients& grads) {
    const std::size_t t_count = d_out.rows(), d = c.embed_dim;
    if (acts.blocks.size() != c.depth)
        throw ContractError("activation cache depth does not match config");
    if (d_out.cols() != d) throw ContractError("output gradient width mismatch");
    const std::size_t hd = c.head_dim(), mlp = c.mlp_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    const kern::Ops& K = kern::ops();

    Tensor dx({t_count, d});
    layernorm_backward_rows(d_out, acts.final_in, acts.mu_f, acts.rstd_f,
                            params.get("norm.weight").data(), dx,
                            grads.accum("norm.weight", {d}), grads.accum("norm.bias", {d}));

    std::vector<double> acc(std::max(hd, d));
    for (std::size_t layer = c.depth; layer-- > 0;) {
        const BlockParams bp = block_params(params, layer);
        const BlockCache& bc = acts.blocks[layer];
        const std::string b = block_name(layer) + ".";

        // out = x2 + fc2(act); dx is d(out)
        Tensor d_act({t_count, mlp});
        K.linear_backward(bp.f2w->data(), bc.act.data(), dx.data(),
                          grads.accum(b + "mlp.fc2.weight", {d, mlp}).data(),
                          grads.accum(b + "mlp.fc2.bias", {d}).data(), d_act.data(), t_count, d,
                          mlp);
        Tensor d_pre({t_count, mlp});
        for (std::size_t i = 0; i < d_pre.size(); ++i)
            d_pre[i] = static_cast<float>(static_cast<double>(d_act[i]) *
                                          gelu_grad(static_cast<double>(bc.pre_act[i])));
        Tensor d_h2({t_count, d});
        K.linear_backward(bp.f1w->data(), bc.h2.data(), d_pre.data(),
                          grads.accum(b + "mlp.fc1.weight", {mlp, d}).data(),
                          grads.accum(b + "mlp.fc1.bias", {mlp}).data(), d_h2.data(), t_count,
                          mlp, d);
        Tensor d_x2({t_count, d});
        layernorm_backward_rows(d_h2, bc.x2, bc.mu2, bc.rstd2, bp.ln2_w->data(), d_x2,
                                grads.accum(b + "ln2.weight", {d}),
                                grads.accum(b + "ln2.bias", {d}));
        K.add(d_x2.data(), dx.data(), t_count * d);  // MLP residual

        // x2 = x + proj(attn_concat); d_x2 covers both paths
        Tensor d_concat({t_count, d});
        K.linear_backward(bp.pw->data(), bc.attn_concat.data(), d_x2.data(),
                          grads.accum(b + "attn.proj.weight", {d, d}).data(),
                          grads.accum(b + "attn.proj.bias", {d}).data(), d_concat.data(),
                          t_count, d, d);

        Tensor d_q({t_count, d}), d_k({t_count, d}), d_v({t_count, d});
        Tensor dA({t_count, t_count}), dS({t_count, t_count});
        for (std::size_t h = 0; h < c.heads; ++h) {
            const std::size_t off = h * hd;
            const Tensor& a = bc.attn[h];
            for (std::size_t t = 0; t < t_count; ++t)
                for (std::size_t u = 0; u < t_count; ++u)
                    dA.at(t, u) = static_cast<float>(
                        K.dot(d_concat.row(t) + off, bc.v.row(u) + off, hd));
            for (std::size_t t = 0; t < t_count; ++t) {
                double dot_aa = 0.0;
                const float* ar = a.row(t);
                const float* dar = dA.row(t);
                for (std::size_t u = 0; u < t_count; ++u)
                    dot_aa += static_cast<double>(ar[u]) * static_cast<double>(dar[u]);
                float* dsr = dS.row(t);
                for (std::size_t u = 0; u < t_count; ++u)
                    dsr[u] = static_cast<float>(static_cast<double>(ar[u]) *
                                                (static_cast<double>(dar[u]) - dot_aa));
            }
            for (std::size_t t = 0; t < t_count; ++t) {
                std::fill(acc.begin(), acc.begin() + hd, 0.0);
                const float* dsr = dS.row(t);
                for (std::size_t u = 0; u < t_count; ++u)
                    K.accum_scaled(acc.data(), bc.k.row(u) + off,
                                   static_cast<double>(dsr[u]), hd);
                float* out = d_q.row(t) + off;
                for (std::size_t i = 0; i < hd; ++i)
                    out[i] = static_cast<float>(acc[i] * inv_sqrt_hd);
            }
            for (std::size_t u = 0; u < t_count; ++u) {
                std::fill(acc.begin(), acc.begin() + hd, 0.0);
                for (std::size_t t = 0; t < t_count; ++t)
                    K.accum_scaled(acc.data(), bc.q.row(t) + off,
                                   static_cast<double>(dS.at(t, u)), hd);
                float* out = d_k.row(u) + off;
                for (std::size_t i = 0; i < hd; ++i)
                    out[i] = static_cast<float>(acc[i] * inv_sqrt_hd);
            }
            for (std::size_t u = 0; u < t_count; ++u) {
                std::fill(acc.begin(), acc.begin() + hd, 0.0);
                for (std::size_t t = 0; t < t_count; ++t)
                    K.accum_scaled(acc.data(), d_concat.row(t) + off,
                                   static_cast<double>(a.at(t, u)), hd);
                float* out = d_v.row(u) + off;
                for (std::size_t i = 0; i < hd; ++i) out[i] = static_cast<float>(acc[i]);
            }
        }

        Tensor d_h1({t_count, d});
        K.linear_backward(bp.qw->data(), bc.h1.data(), d_q.data(),
                          grads.accum(b + "attn.q.weight", {d, d}).data(),
                          grads.accum(b + "attn.q.bias", {d}).data(), d_h1.data(), t_count, d, d);
        K.linear_backward(bp.kw->data(), bc.h1.data(), d_k.data(),
                          grads.accum(b + "attn.k.weight", {d, d}).data(),
                          grads.accum(b + "attn.k.bias", {d}).data(), d_h1.data(), t_count, d, d);
        K.linear_backward(bp.vw->data(), bc.h1.data(), d_v.data(),
                          grads.accum(b + "attn.v.weight", {d, d}).data(),
                          grads.accum(b + "attn.v.bias", {d}).data(), d_h1.data(), t_count, d, d);

        Tensor d_x1({t_count, d});
        layernorm_backward_rows(d_h1, bc.x, bc.mu1, bc.rstd1, bp.ln1_w->data(), d_x1,
                                grads.accum(b + "ln1.weight", {d}),
                                grads.accum(b + "ln1.bias", {d}));

        dx = d_x2;  // attention residual
        K.add(dx.data(), d_x1.data(), t_count * d);
    }
    return dx;
}

Tensor cls_attention_map(const AttentionRecord& record, std::size_t layer, const ViTConfig& c) {
    if (layer >= record.layers.size())
        throw RangeError("attention layer " + std::to_string(layer) + " out of range (depth " +
                         std::to_string(record.layers.size()) + ")");
    const auto& heads = record.layers[layer];
    if (heads.empty()) throw ContractError("attention record has no heads at requested layer");
    const std::size_t t_count = heads[0].rows();
    if (t_count != c.token_count())
        throw ContractError("attention record token count does not match config grid");
    Tensor map({c.grid(), c.grid()});
    for (std::size_t j = 0; j + 1 < t_count; ++j) {
        double s = 0.0;
        for (const Tensor& a : heads) s += static_cast<double>(a.at(0, j + 1));
        map[j] = static_cast<float>(s / static_cast<double>(heads.size()));
    }
    return map;
}

}  // namespace mim
