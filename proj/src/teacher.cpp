#include "mim/teacher.h"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mim/error.h"
#include "mim/kernels.h"
#include "mim/objective.h"
#include "mim/optim.h"
#include "mim/rng.h"
#include "mim/tensor_io.h"

namespace mim {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_image_dims(const Tensor& image, std::size_t size, std::size_t channels) {
    if (image.rank() != 3 || image.shape()[0] != size || image.shape()[1] != size ||
        image.shape()[2] != channels)
        throw ContractError("teacher expects " + std::to_string(size) + "x" +
                            std::to_string(size) + "x" + std::to_string(channels) +
                            " images, got " + image.shape_str());
}

float luminance(const Tensor& image, std::size_t y, std::size_t x, std::size_t channels) {
    const float* px = image.data() + (y * image.shape()[1] + x) * channels;
    float acc = 0.0f;
    for (std::size_t c = 0; c < channels; ++c) acc += px[c];
    return acc / static_cast<float>(channels);
}

Tensor extract_vit(const Tensor& image, const ParamStore& params, const ViTConfig& cfg) {
    const Tensor patches = patchify(image, cfg);
    const TokenSequence tokens = embed(patches, params, cfg);
    return vit_forward(tokens, params, cfg);
}

}  // namespace

const char* guidance_name(GuidanceKind kind) {
    switch (kind) {
        case GuidanceKind::FrozenVit: return "frozen-vit";
        case GuidanceKind::Pixel: return "pixel";
        case GuidanceKind::HogLike: return "hog";
        case GuidanceKind::ToySemantic: return "toy-semantic";
    }
    return "?";
}

GuidanceKind guidance_from_name(const std::string& name) {
    if (name == "frozen-vit") return GuidanceKind::FrozenVit;
    if (name == "pixel") return GuidanceKind::Pixel;
    if (name == "hog") return GuidanceKind::HogLike;
    if (name == "toy-semantic") return GuidanceKind::ToySemantic;
    throw UserError("unknown guidance kind '" + name +
                    "' (expected frozen-vit, pixel, hog, or toy-semantic)");
}

void PatchGeometry::validate() const {
    if (image_size == 0 || patch_size == 0 || channels == 0)
        throw UserError("patch geometry dimensions must be positive");
    if (image_size % patch_size != 0)
        throw UserError("patch size " + std::to_string(patch_size) + " must divide image size " +
                        std::to_string(image_size));
}

const ViTConfig& Teacher::vit_config() const {
    if (!has_vit_) throw ContractError("teacher has no backbone config");
    return vit_;
}

Teacher Teacher::frozen_vit(const ViTConfig& config, std::uint64_t seed) {
    config.validate();
    Teacher t;
    t.kind_ = GuidanceKind::FrozenVit;
    t.vit_ = config;
    t.has_vit_ = true;
    t.feature_dim_ = config.embed_dim;
    t.patch_count_ = config.patch_count();
    t.params_ = init_params(config, seed);
    t.params_.freeze_all();
    return t;
}

Teacher Teacher::frozen_vit_from_file(const ViTConfig& config, const std::string& path) {
    config.validate();
    ParamStore loaded = tensor_load(path);
    const ParamStore expect = init_params(config, 0);
    for (const auto& e : expect.entries()) {
        if (!loaded.has(e.name))
            throw FormatError("teacher weights missing entry " + e.name + " in " + path, 0);
        if (!loaded.get(e.name).same_shape(e.value))
            throw FormatError("shape mismatch for entry " + e.name + " in " + path + ": expected " +
                                  e.value.shape_str() + ", found " + loaded.get(e.name).shape_str(),
                              0);
    }
    for (const auto& e : loaded.entries())
        if (!expect.has(e.name))
            throw FormatError("unexpected entry " + e.name + " in teacher weights " + path, 0);

    Teacher t;
    t.kind_ = GuidanceKind::FrozenVit;
    t.vit_ = config;
    t.has_vit_ = true;
    t.feature_dim_ = config.embed_dim;
    t.patch_count_ = config.patch_count();
    t.params_ = std::move(loaded);
    t.params_.freeze_all();
    return t;
}

Teacher Teacher::pixel(const PatchGeometry& geometry) {
    geometry.validate();
    Teacher t;
    t.kind_ = GuidanceKind::Pixel;
    t.geom_ = geometry;
    t.feature_dim_ = geometry.patch_dim();
    t.patch_count_ = geometry.patch_count();
    return t;
}

Teacher Teacher::hog(const PatchGeometry& geometry, std::size_t bins, std::size_t cell) {
    geometry.validate();
    if (bins == 0) throw UserError("orientation bins must be positive");
    if (cell == 0 || geometry.patch_size % cell != 0)
        throw UserError("cell size " + std::to_string(cell) + " must divide patch size " +
                        std::to_string(geometry.patch_size));
    Teacher t;
    t.kind_ = GuidanceKind::HogLike;
    t.geom_ = geometry;
    t.bins_ = bins;
    t.cell_ = cell;
    const std::size_t cells = (geometry.patch_size / cell) * (geometry.patch_size / cell);
    t.feature_dim_ = bins * cells;
    t.patch_count_ = geometry.patch_count();
    return t;
}

Teacher Teacher::toy_semantic(const ViTConfig& config, ParamStore weights) {
    config.validate();
    Teacher t;
    t.kind_ = GuidanceKind::ToySemantic;
    t.vit_ = config;
    t.has_vit_ = true;
    t.feature_dim_ = config.embed_dim;
    t.patch_count_ = config.patch_count();
    t.params_ = std::move(weights);
    t.params_.freeze_all();
    return t;
}

Tensor Teacher::extract(const Tensor& image) const {
    switch (kind_) {
        case GuidanceKind::FrozenVit:
        case GuidanceKind::ToySemantic:
            return extract_vit(image, params_, vit_);
        case GuidanceKind::Pixel: {
            check_image_dims(image, geom_.image_size, geom_.channels);
            const std::size_t g = geom_.grid(), p = geom_.patch_size, ch = geom_.channels;
            const std::size_t dim = feature_dim_;
            Tensor out({patch_count_ + 1, dim});
            std::vector<double> cls(dim, 0.0);
            for (std::size_t gy = 0; gy < g; ++gy)
                for (std::size_t gx = 0; gx < g; ++gx) {
                    float* row = out.row(1 + gy * g + gx);
                    std::size_t k = 0;
                    for (std::size_t py = 0; py < p; ++py) {
                        const float* src =
                            image.data() + ((gy * p + py) * geom_.image_size + gx * p) * ch;
                        for (std::size_t j = 0; j < p * ch; ++j) row[k++] = src[j];
                    }
                    const double norm = std::sqrt(kern::ops().sum_sq(row, dim));
                    if (norm > 0.0) {
                        const float inv = static_cast<float>(1.0 / norm);
                        for (std::size_t j = 0; j < dim; ++j) row[j] *= inv;
                    }
                    for (std::size_t j = 0; j < dim; ++j) cls[j] += row[j];
                }
            for (std::size_t j = 0; j < dim; ++j)
                out.at(0, j) = static_cast<float>(cls[j] / static_cast<double>(patch_count_));
            return out;
        }
        case GuidanceKind::HogLike: {
            check_image_dims(image, geom_.image_size, geom_.channels);
            const std::size_t g = geom_.grid(), p = geom_.patch_size, ch = geom_.channels;
            const std::size_t s = geom_.image_size;
            const std::size_t cells_per_side = p / cell_;
            const std::size_t dim = feature_dim_;
            const auto clamp_ax = [&](std::ptrdiff_t v) {
                if (v < 0) return std::size_t{0};
                if (static_cast<std::size_t>(v) >= s) return s - 1;
                return static_cast<std::size_t>(v);
            };
            Tensor out({patch_count_ + 1, dim});
            std::vector<double> cls(dim, 0.0);
            for (std::size_t gy = 0; gy < g; ++gy)
                for (std::size_t gx = 0; gx < g; ++gx) {
                    float* row = out.row(1 + gy * g + gx);
                    std::vector<double> hist(dim, 0.0);
                    for (std::size_t py = 0; py < p; ++py)
                        for (std::size_t px = 0; px < p; ++px) {
                            const std::size_t y = gy * p + py, x = gx * p + px;
                            const double gxv =
                                luminance(image, y, clamp_ax((std::ptrdiff_t)x + 1), ch) -
                                luminance(image, y, clamp_ax((std::ptrdiff_t)x - 1), ch);
                            const double gyv =
                                luminance(image, clamp_ax((std::ptrdiff_t)y + 1), x, ch) -
                                luminance(image, clamp_ax((std::ptrdiff_t)y - 1), x, ch);
                            const double mag = std::sqrt(gxv * gxv + gyv * gyv);
                            if (mag == 0.0) continue;
                            double theta = std::atan2(gyv, gxv);  // (-pi, pi]
                            if (theta < 0.0) theta += kPi;        // unsigned orientation
                            std::size_t bin =
                                static_cast<std::size_t>(theta / kPi * static_cast<double>(bins_));
                            if (bin >= bins_) bin = bins_ - 1;
                            const std::size_t cell_idx =
                                (py / cell_) * cells_per_side + (px / cell_);
                            hist[cell_idx * bins_ + bin] += mag;
                        }
                    for (std::size_t j = 0; j < dim; ++j) {
                        row[j] = static_cast<float>(hist[j]);
                        cls[j] += hist[j];
                    }
                }
            for (std::size_t j = 0; j < dim; ++j)
                out.at(0, j) = static_cast<float>(cls[j] / static_cast<double>(patch_count_));
            return out;
        }
    }
    throw ContractError("unreachable teacher kind");
}

ToyTeacherResult train_toy_teacher(const Corpus& corpus, const ViTConfig& config,
                                   std::size_t steps, std::uint64_t seed) {
    config.validate();
    if (corpus.size() < 2) throw ContractError("toy teacher needs at least 2 images");
    if (!corpus.labeled()) throw ContractError("toy teacher needs a fully labeled corpus");

    std::uint32_t max_label = 0;
    for (std::uint32_t l : corpus.labels) max_label = std::max(max_label, l);
    const std::size_t classes = max_label + 1;
    if (classes < 2) throw ContractError("toy teacher needs at least 2 classes");

    // Deterministic 80/20 split.
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng(substream(seed, "toy-split"));
    split_rng.shuffle(order.begin(), order.end());
    const std::size_t eval_count = std::max<std::size_t>(1, corpus.size() / 5);
    const std::size_t train_count = corpus.size() - eval_count;
    if (train_count == 0) throw ContractError("toy teacher corpus too small to split");

    ParamStore params = init_params(config, substream(seed, "toy-init"));
    // Supervised training never corrupts tokens, so the mask embedding gets
    // no gradient; leave it out of the optimizer's view.
    params.set_trainable("mask_token", false);
    {
        Rng head_rng(substream(seed, "toy-head"));
        Tensor w({classes, config.embed_dim});
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = head_rng.trunc_normal(0.02f);
        Tensor b({classes});
        b.fill(0.0f);
        params.add("cls_head.weight", std::move(w));
        params.add("cls_head.bias", std::move(b));
    }

    OptimizerState opt(AdamwHyper{0.9f, 0.999f, 1e-8f, 5e-2f});
    LrSchedule sched;
    sched.base_lr = 1e-3f;
    sched.min_lr = 0.0f;
    sched.total_steps = std::max<std::size_t>(steps, 1);
    sched.warmup_steps = std::min<std::size_t>(100, steps / 10);

    // Shift-crop plus flip augmentation; without it the backbone memorizes a
    // few hundred training images long before the held-out accuracy moves.
    const std::size_t aug_pad = 4;
    const std::size_t batch = std::min<std::size_t>(32, train_count);
    const kern::Ops& K = kern::ops();

    for (std::size_t step = 0; step < steps; ++step) {
        Rng batch_rng(substream(seed, "toy-batch", step));
        Gradients grads;
        double loss = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t idx = order[batch_rng.below(train_count)];
            const Tensor image = random_crop_flip(corpus.images[idx], aug_pad, batch_rng);
            const std::uint32_t label = corpus.labels[idx];

            const Tensor patches = patchify(image, config);
            const TokenSequence tokens = embed(patches, params, config);
            VitActivations acts;
            const TokenSequence feats = vit_forward(tokens, params, config, &acts);

            const Tensor& hw = params.get("cls_head.weight");
            const Tensor& hb = params.get("cls_head.bias");
            std::vector<float> logits(classes);
            K.linear_forward(hw.data(), hb.data(), feats.row(0), logits.data(), 1, classes,
                             config.embed_dim);

            double mx = logits[0];
            for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, (double)logits[c]);
            double z = 0.0;
            for (std::size_t c = 0; c < classes; ++c) z += std::exp((double)logits[c] - mx);
            loss += -((double)logits[label] - mx - std::log(z));

            std::vector<float> d_logits(classes);
            for (std::size_t c = 0; c < classes; ++c) {
                const double p = std::exp((double)logits[c] - mx) / z;
                d_logits[c] = static_cast<float>(
                    (p - (c == label ? 1.0 : 0.0)) / static_cast<double>(batch));
            }

            Tensor d_feats({config.token_count(), config.embed_dim});
            d_feats.fill(0.0f);
            Tensor& dhw = grads.accum("cls_head.weight", hw.shape());
            Tensor& dhb = grads.accum("cls_head.bias", hb.shape());
            K.linear_backward(hw.data(), feats.row(0), d_logits.data(), dhw.data(), dhb.data(),
                              d_feats.row(0), 1, classes, config.embed_dim);

            const Tensor d_tokens = vit_backward(d_feats, acts, params, config, grads);
            embed_backward(d_tokens, patches, config, grads);
        }
        loss /= static_cast<double>(batch);
        if (!std::isfinite(loss))
            throw NumericError("toy teacher training diverged at step " + std::to_string(step));
        adamw_step(params, grads, opt, lr_at(sched, step));
    }

    // Held-out accuracy with the head still attached.
    std::size_t correct = 0;
    for (std::size_t e = 0; e < eval_count; ++e) {
        const std::size_t idx = order[train_count + e];
        const TokenSequence feats = extract_vit(corpus.images[idx], params, config);
        const Tensor& hw = params.get("cls_head.weight");
        const Tensor& hb = params.get("cls_head.bias");
        std::vector<float> logits(classes);
        K.linear_forward(hw.data(), hb.data(), feats.row(0), logits.data(), 1, classes,
                         config.embed_dim);
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c)
            if (logits[c] > logits[best]) best = c;
        if (best == corpus.labels[idx]) ++correct;
    }

    params.remove("cls_head.weight");
    params.remove("cls_head.bias");
    params.freeze_all();

    ToyTeacherResult result;
    result.teacher = Teacher::toy_semantic(config, std::move(params));
    result.accuracy = static_cast<double>(correct) / static_cast<double>(eval_count);
    result.eval_count = eval_count;
    return result;
}

}  // namespace mim
