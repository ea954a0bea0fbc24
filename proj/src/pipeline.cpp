#include "mim/pipeline.h"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mim/error.h"
#include "mim/mask.h"
#include "mim/objective.h"
#include "mim/rng.h"
#include "mim/tensor_io.h"
#include "mim/vit.h"

namespace fs = std::filesystem;

namespace mim {

namespace {

constexpr float kCheckpointVersion = 1.0f;

std::string step_name(std::size_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "checkpoint-%06zu.mimt", step);
    return buf;
}

void append_metric(std::ofstream& out, std::size_t step, double loss, double lr, double ms) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g\n", step, loss, lr, ms);
    out << buf;
    out.flush();
}

// Entry-by-entry comparison against a freshly initialized store, so a resume
// from foreign weights fails with a name instead of a shape blowup later.
void check_param_table(const ParamStore& loaded, const ParamStore& expect,
                       const std::string& path) {
    for (const auto& e : expect.entries()) {
        if (!loaded.has(e.name))
            throw FormatError("checkpoint missing parameter " + e.name + " in " + path);
        if (!loaded.get(e.name).same_shape(e.value))
            throw FormatError("shape mismatch for parameter " + e.name + " in " + path +
                              ": expected " + e.value.shape_str() + ", found " +
                              loaded.get(e.name).shape_str());
    }
    for (const auto& e : loaded.entries())
        if (!expect.has(e.name))
            throw FormatError("unexpected parameter " + e.name + " in checkpoint " + path);
}

}  // namespace

Corpus load_dataset(const TrainConfig& config) {
    Corpus corpus = config.data.path.empty()
                        ? synth_dataset(config.data.seed, config.data.count, config.data.classes,
                                        config.model.image_size, config.model.channels)
                        : load_corpus(config.data.path);
    if (!config.data.path.empty()) {
        // Segmentation masks ride beside the corpus as a one-channel sidecar.
        const std::string seg_path = config.data.path + ".seg";
        if (fs::exists(seg_path)) {
            Corpus seg = load_corpus(seg_path);
            if (seg.size() != corpus.size())
                throw UserError("segmentation sidecar " + seg_path + " holds " +
                                std::to_string(seg.size()) + " images, the corpus holds " +
                                std::to_string(corpus.size()));
            for (std::size_t i = 0; i < seg.size(); ++i) {
                const Tensor& m = seg.images[i];
                if (m.rank() != 3 || m.shape()[0] != config.model.image_size ||
                    m.shape()[1] != config.model.image_size || m.shape()[2] != 1)
                    throw UserError("segmentation image " + std::to_string(i) + " is " +
                                    m.shape_str() + ", expected " +
                                    std::to_string(config.model.image_size) + "x" +
                                    std::to_string(config.model.image_size) + "x1");
            }
            corpus.seg = std::move(seg.images);
        }
    }
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const Tensor& img = corpus.images[i];
        if (img.rank() != 3 || img.shape()[0] != config.model.image_size ||
            img.shape()[1] != config.model.image_size ||
            img.shape()[2] != config.model.channels)
            throw UserError("corpus image " + std::to_string(i) + " is " + img.shape_str() +
                            ", the model expects " + std::to_string(config.model.image_size) +
                            "x" + std::to_string(config.model.image_size) + "x" +
                            std::to_string(config.model.channels));
    }
    if (!config.data.mean.empty())
        normalize_corpus(corpus, config.data.mean, config.data.std_dev);
    return corpus;
}

Teacher make_teacher(const TrainConfig& config, const Corpus& corpus) {
    const PatchGeometry geom{config.model.image_size, config.model.patch_size,
                             config.model.channels};
    switch (config.teacher.kind) {
        case GuidanceKind::Pixel:
            return Teacher::pixel(geom);
        case GuidanceKind::HogLike:
            return Teacher::hog(geom, config.teacher.bins, config.teacher.cell);
        case GuidanceKind::FrozenVit: {
            const ViTConfig tc = vit_preset(config.teacher.preset);
            return config.teacher.weights.empty()
                       ? Teacher::frozen_vit(tc, config.teacher.seed)
                       : Teacher::frozen_vit_from_file(tc, config.teacher.weights);
        }
        case GuidanceKind::ToySemantic: {
            const ViTConfig tc = vit_preset(config.teacher.preset);
            if (!config.teacher.weights.empty()) {
                // Same file validation as the frozen loader, rewrapped under
                // the toy-semantic kind.
                const Teacher checked =
                    Teacher::frozen_vit_from_file(tc, config.teacher.weights);
                ParamStore weights;
                for (const auto& e : checked.params().entries())
                    weights.add(e.name, e.value, e.trainable);
                return Teacher::toy_semantic(tc, std::move(weights));
            }
            if (!corpus.labeled())
                throw UserError("toy-semantic teacher needs a fully labeled corpus");
            return train_toy_teacher(corpus, tc, config.teacher.steps, config.teacher.seed)
                .teacher;
        }
    }
    throw ContractError("unreachable teacher kind");
}

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const OptimizerState& opt, std::size_t step, const std::string& digest) {
    if (digest.size() != 16) throw ContractError("config digest must be 16 characters");
    ParamStore store;
    {
        Tensor v({1});
        v[0] = kCheckpointVersion;
        store.add("meta.version", std::move(v));
    }
    {
        Tensor s({1});
        s[0] = static_cast<float>(step);
        store.add("meta.step", std::move(s));
    }
    {
        Tensor d({16});
        for (std::size_t i = 0; i < 16; ++i)
            d[i] = static_cast<float>(static_cast<unsigned char>(digest[i]));
        store.add("meta.digest", std::move(d));
    }
    for (const auto& e : params.entries()) store.add("param." + e.name, e.value);
    for (const std::string& name : opt.moment_names()) {
        store.add("opt.m." + name, opt.moment1(name));
        store.add("opt.v." + name, opt.moment2(name));
    }
    tensor_save(store, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    const ParamStore store = tensor_load(path);
    if (!store.has("meta.version") || !store.has("meta.step") || !store.has("meta.digest"))
        throw FormatError("checkpoint " + path + " is missing its meta entries");
    const float version = store.get("meta.version")[0];
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " +
                          path);

    Checkpoint ck;
    ck.step = static_cast<std::size_t>(store.get("meta.step")[0]);
    const Tensor& d = store.get("meta.digest");
    if (d.size() != 16) throw FormatError("malformed digest in checkpoint " + path);
    for (std::size_t i = 0; i < 16; ++i)
        ck.digest += static_cast<char>(static_cast<unsigned char>(d[i]));

    for (const auto& e : store.entries()) {
        if (e.name.rfind("meta.", 0) == 0) continue;
        if (e.name.rfind("param.", 0) == 0) {
            ck.params.add(e.name.substr(6), e.value);
        } else if (e.name.rfind("opt.m.", 0) == 0) {
            ck.opt.moment1(e.name.substr(6), e.value.shape()) = e.value;
        } else if (e.name.rfind("opt.v.", 0) == 0) {
            const std::string name = e.name.substr(6);
            if (!ck.opt.has_moments(name))
                throw FormatError("checkpoint " + path + " lists opt.v." + name +
                                  " before its first moment");
            ck.opt.moment2(name, e.value.shape()) = e.value;
        } else {
            throw FormatError("unexpected entry " + e.name + " in checkpoint " + path);
        }
    }
    ck.opt.set_step_count(static_cast<std::int64_t>(ck.step));
    return ck;
}

PretrainResult run_pretraining(const TrainConfig& config, const std::string& resume_from) {
    config.validate();
    const Corpus corpus = load_dataset(config);
    if (corpus.size() == 0) throw UserError("pre-training needs a non-empty corpus");
    const Teacher teacher = make_teacher(config, corpus);
    if (teacher.token_count() != config.model.token_count())
        throw ContractError("teacher emits " + std::to_string(teacher.token_count()) +
                            " tokens, the student expects " +
                            std::to_string(config.model.token_count()));

    const std::string digest = config_digest(config);
    fs::create_directories(config.out_dir);

    ParamStore params = init_params(config.model, substream(config.seed, "student-init"));
    add_head(params, config.model.embed_dim, teacher.feature_dim(), config.seed);

    OptimizerState opt(config.opt);
    std::size_t start_step = 0;
    if (!resume_from.empty()) {
        Checkpoint ck = load_checkpoint(resume_from);
        if (ck.digest != digest)
            throw UserError("checkpoint " + resume_from +
                            " was produced by a different configuration");
        check_param_table(ck.params, params, resume_from);
        if (ck.step > config.steps)
            throw UserError("checkpoint step " + std::to_string(ck.step) +
                            " lies beyond the configured " + std::to_string(config.steps));
        params = std::move(ck.params);
        opt = std::move(ck.opt);
        opt.hyper() = config.opt;
        start_step = ck.step;
    }
    // An unmasked run gives the mask embedding no gradient; keep it frozen so
    // the optimizer's everything-trainable-has-a-gradient contract holds.
    if (config.mask_target == 0) params.set_trainable("mask_token", false);

    const bool augment = config.aug_pad > 0 || config.aug_flip;
    std::vector<Tensor> feature_cache(augment ? 0 : corpus.size());

    const std::string metrics_path = config.out_dir + "/metrics.csv";
    std::ofstream metrics;
    if (start_step == 0) {
        metrics.open(metrics_path, std::ios::trunc);
        metrics << "step,loss,lr,ms\n";
    } else {
        metrics.open(metrics_path, std::ios::app);
    }
    if (!metrics) throw UserError("cannot write metrics file " + metrics_path);

    const std::size_t grid = config.model.grid();
    PretrainResult result;
    for (std::size_t s = start_step; s < config.steps; ++s) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng step_rng(substream(config.seed, "batch", s));
        Gradients grads;
        double loss_sum = 0.0;

        for (std::size_t b = 0; b < config.batch; ++b) {
            const std::size_t idx = static_cast<std::size_t>(step_rng.below(corpus.size()));
            Tensor view = corpus.images[idx];
            if (augment)
                view = random_crop_flip(view, config.aug_pad, step_rng, nullptr,
                                        config.aug_flip);

            const Tensor* target = nullptr;
            Tensor fresh_target;
            if (augment) {
                fresh_target = teacher.extract(view);
                target = &fresh_target;
            } else {
                if (feature_cache[idx].empty()) feature_cache[idx] = teacher.extract(view);
                target = &feature_cache[idx];
            }

            const MaskSpec spec =
                blockwise_mask(grid, grid, config.mask_target,
                               substream(config.seed, "mask", s * config.batch + b),
                               config.mask_min_block);

            const Tensor patches = patchify(view, config.model);
            const TokenSequence tokens = embed(patches, params, config.model);
            const TokenSequence masked =
                apply_mask(tokens, spec, params.get("mask_token"), params.get("pos_embed"));
            VitActivations acts;
            const TokenSequence feats = vit_forward(masked, params, config.model, &acts);
            const TokenSequence pred = predict(feats, params);

            Tensor d_pred(pred.shape());
            const double image_loss =
                config.loss == LossVariant::AllToken
                    ? mvp_loss_backward(pred, *target, d_pred)
                    : masked_only_loss_backward(pred, *target, spec, d_pred);
            loss_sum += image_loss;
            const float inv_batch = 1.0f / static_cast<float>(config.batch);
            for (std::size_t i = 0; i < d_pred.size(); ++i) d_pred[i] *= inv_batch;

            const Tensor d_feats = predict_backward(d_pred, feats, params, grads);
            const Tensor d_tokens = vit_backward(d_feats, acts, params, config.model, grads);

            Tensor d_plain;
            if (config.mask_target > 0) {
                Tensor& d_mask = grads.accum("mask_token", params.get("mask_token").shape());
                Tensor& d_pos = grads.accum("pos_embed", params.get("pos_embed").shape());
                d_plain = apply_mask_backward(d_tokens, spec, d_mask, d_pos);
            } else {
                d_plain = d_tokens;
            }
            embed_backward(d_plain, patches, config.model, grads);
        }

        const double loss = loss_sum / static_cast<double>(config.batch);
        const double lr = lr_at(config.schedule, static_cast<std::int64_t>(s));
        if (!std::isfinite(loss))
            throw NumericError("pre-training loss went non-finite at step " + std::to_string(s) +
                               "; the last checkpoint is retained");
        adamw_step(params, grads, opt, lr);

        const double ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
        append_metric(metrics, s, loss, lr, ms);
        result.final_loss = loss;

        if ((s + 1) % config.checkpoint_every == 0)
            save_checkpoint(config.out_dir + "/" + step_name(s + 1), params, opt, s + 1, digest);
    }

    const std::string final_path = config.out_dir + "/checkpoint-final.mimt";
    save_checkpoint(final_path, params, opt, config.steps, digest);

    result.params = std::move(params);
    result.opt = std::move(opt);
    result.steps_done = config.steps - start_step;
    result.checkpoint_path = final_path;
    result.metrics_path = metrics_path;
    return result;
}

}  // namespace mim
