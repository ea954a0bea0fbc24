#include "mim/eval.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "mim/error.h"
#include "mim/kernels.h"
#include "mim/objective.h"
#include "mim/optim.h"
#include "mim/pipeline.h"
#include "mim/rng.h"
#include "mim/teacher.h"
#include "mim/tensor_io.h"
#include "mim/vit.h"

namespace fs = std::filesystem;

namespace mim {

namespace {

void check_corpus_dims(const Corpus& corpus, const ViTConfig& c) {
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const Tensor& img = corpus.images[i];
        if (img.rank() != 3 || img.shape()[0] != c.image_size || img.shape()[1] != c.image_size ||
            img.shape()[2] != c.channels)
            throw ContractError("image " + std::to_string(i) + " is " + img.shape_str() +
                                ", the backbone expects " + std::to_string(c.image_size) + "x" +
                                std::to_string(c.image_size) + "x" + std::to_string(c.channels));
    }
}

TokenSequence forward_features(const Tensor& image, const ParamStore& params,
                               const ViTConfig& c) {
    const Tensor patches = patchify(image, c);
    const TokenSequence tokens = embed(patches, params, c);
    return vit_forward(tokens, params, c);
}

std::size_t label_range(const Corpus& corpus) {
    std::uint32_t max_label = 0;
    for (std::uint32_t l : corpus.labels) max_label = std::max(max_label, l);
    return max_label + 1;
}

std::size_t argmax_row(const float* logits, std::size_t classes) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c)
        if (logits[c] > logits[best]) best = c;
    return best;
}

// Cross-entropy over one logit row, accumulated in double; writes the logit
// gradient scaled by inv_batch.
double ce_row(const float* logits, std::size_t classes, std::uint32_t label, float* d_logits,
              double inv_batch) {
    double mx = logits[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, (double)logits[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp((double)logits[c] - mx);
    for (std::size_t c = 0; c < classes; ++c) {
        const double p = std::exp((double)logits[c] - mx) / z;
        d_logits[c] = static_cast<float>((p - (c == label ? 1.0 : 0.0)) * inv_batch);
    }
    return -((double)logits[label] - mx - std::log(z));
}

}  // namespace

std::vector<char> heldout_split(std::size_t image_count, std::uint64_t seed,
                                const std::string& tag) {
    std::vector<std::size_t> order(image_count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng split_rng(substream(seed, tag));
    split_rng.shuffle(order.begin(), order.end());
    const std::size_t eval_count = std::max<std::size_t>(1, image_count / 5);
    std::vector<char> heldout(image_count, 0);
    for (std::size_t e = 0; e < eval_count; ++e) heldout[order[image_count - 1 - e]] = 1;
    return heldout;
}

double mean_class_iou(const std::vector<std::uint32_t>& pred,
                      const std::vector<std::uint32_t>& truth, std::size_t classes) {
    if (pred.size() != truth.size())
        throw ContractError("IoU needs matching prediction and truth lengths");
    if (pred.empty()) throw ContractError("IoU needs at least one sample");
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred[i] == c, t = truth[i] == c;
            inter += p && t;
            uni += p || t;
        }
        if (uni > 0) {
            sum += static_cast<double>(inter) / static_cast<double>(uni);
            ++counted;
        }
    }
    return sum / static_cast<double>(counted);
}

ProbeResult fit_probe(const FeatureSet& set, std::size_t classes, ProbeMetric metric,
                      const TrainConfig& config) {
    const std::size_t rows = set.labels.size();
    if (rows == 0) throw ContractError("probe needs at least one sample");
    if (set.features.rank() != 2 || set.features.shape()[0] != rows)
        throw ContractError("probe feature matrix does not match its labels");
    if (set.image_of.size() != rows) throw ContractError("probe sample ownership is incomplete");
    if (classes < 2) throw ContractError("probe needs at least 2 classes");
    if (set.image_count < 2) throw ContractError("probe needs at least 2 images to split");
    for (std::size_t i = 0; i < rows; ++i) {
        if (set.labels[i] >= classes) throw ContractError("probe label out of range");
        if (set.image_of[i] >= set.image_count)
            throw ContractError("probe image index out of range");
    }
    const std::size_t dim = set.features.shape()[1];

    const std::vector<char> heldout = heldout_split(set.image_count, config.seed, "probe-split");
    std::vector<std::size_t> train_rows, eval_rows;
    for (std::size_t i = 0; i < rows; ++i)
        (heldout[set.image_of[i]] ? eval_rows : train_rows).push_back(i);
    if (train_rows.empty() || eval_rows.empty())
        throw ContractError("probe split left one side without samples");

    ParamStore head;
    {
        Rng head_rng(substream(config.seed, "probe-head"));
        Tensor w({classes, dim});
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = head_rng.trunc_normal(0.02f);
        Tensor b({classes});
        b.fill(0.0f);
        head.add("probe.weight", std::move(w));
        head.add("probe.bias", std::move(b));
    }

    // The probe itself takes no weight decay.
    OptimizerState opt(AdamwHyper{0.9f, 0.999f, 1e-8f, 0.0f});
    LrSchedule sched;
    sched.base_lr = config.probe_lr;
    sched.min_lr = 0.0f;
    sched.total_steps = std::max<std::size_t>(config.probe_steps, 1);
    sched.warmup_steps = std::min<std::size_t>(100, config.probe_steps / 10);

    const std::size_t batch = std::min<std::size_t>(config.probe_batch, train_rows.size());
    if (config.probe_steps > 0 && batch == 0)
        throw ContractError("probe batch must be positive");
    const kern::Ops& K = kern::ops();

    Tensor X({std::max<std::size_t>(batch, 1), dim});
    std::vector<std::uint32_t> y(batch);
    std::vector<float> logits(batch * classes), d_logits(batch * classes);
    for (std::size_t step = 0; step < config.probe_steps; ++step) {
        Rng batch_rng(substream(config.seed, "probe-batch", step));
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t row = train_rows[batch_rng.below(train_rows.size())];
            std::copy(set.features.row(row), set.features.row(row) + dim, X.row(b));
            y[b] = set.labels[row];
        }
        const Tensor& w = head.get("probe.weight");
        const Tensor& bias = head.get("probe.bias");
        K.linear_forward(w.data(), bias.data(), X.data(), logits.data(), batch, classes, dim);

        double loss = 0.0;
        for (std::size_t b = 0; b < batch; ++b)
            loss += ce_row(logits.data() + b * classes, classes, y[b],
                           d_logits.data() + b * classes, 1.0 / static_cast<double>(batch));
        loss /= static_cast<double>(batch);
        if (!std::isfinite(loss))
            throw NumericError("probe training diverged at step " + std::to_string(step));

        Gradients grads;
        Tensor& dw = grads.accum("probe.weight", w.shape());
        Tensor& db = grads.accum("probe.bias", bias.shape());
        K.linear_backward(w.data(), X.data(), d_logits.data(), dw.data(), db.data(), nullptr,
                          batch, classes, dim);
        adamw_step(head, grads, opt, lr_at(sched, static_cast<std::int64_t>(step)));
    }

    // Held-out predictions in one batched pass.
    Tensor Xe({eval_rows.size(), dim});
    for (std::size_t e = 0; e < eval_rows.size(); ++e)
        std::copy(set.features.row(eval_rows[e]), set.features.row(eval_rows[e]) + dim,
                  Xe.row(e));
    std::vector<float> eval_logits(eval_rows.size() * classes);
    K.linear_forward(head.get("probe.weight").data(), head.get("probe.bias").data(), Xe.data(),
                     eval_logits.data(), eval_rows.size(), classes, dim);

    std::vector<std::uint32_t> pred(eval_rows.size()), truth(eval_rows.size());
    for (std::size_t e = 0; e < eval_rows.size(); ++e) {
        pred[e] = static_cast<std::uint32_t>(
            argmax_row(eval_logits.data() + e * classes, classes));
        truth[e] = set.labels[eval_rows[e]];
    }

    ProbeResult result;
    result.classes = classes;
    result.samples = eval_rows.size();
    result.digest = config_digest(config);
    if (metric == ProbeMetric::Accuracy) {
        std::size_t correct = 0;
        for (std::size_t e = 0; e < pred.size(); ++e) correct += pred[e] == truth[e];
        result.metric = static_cast<double>(correct) / static_cast<double>(pred.size());
    } else {
        result.metric = mean_class_iou(pred, truth, classes);
    }
    return result;
}

FeatureSet image_features(const ParamStore& backbone, const Corpus& corpus,
                          const TrainConfig& config) {
    if (!corpus.labeled()) throw ContractError("linear probe needs a fully labeled corpus");
    check_corpus_dims(corpus, config.model);
    const std::size_t dim = config.model.embed_dim;
    const std::size_t tokens = config.model.token_count();

    FeatureSet set;
    set.features = Tensor({corpus.size(), dim});
    set.image_count = corpus.size();
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const TokenSequence feats = forward_features(corpus.images[i], backbone, config.model);
        float* out = set.features.row(i);
        if (config.probe_feature == ProbeFeature::Cls) {
            std::copy(feats.row(0), feats.row(0) + dim, out);
        } else {
            for (std::size_t d = 0; d < dim; ++d) {
                double acc = 0.0;
                for (std::size_t t = 1; t < tokens; ++t) acc += feats.row(t)[d];
                out[d] = static_cast<float>(acc / static_cast<double>(tokens - 1));
            }
        }
        set.labels.push_back(corpus.labels[i]);
        set.image_of.push_back(i);
    }
    return set;
}

FeatureSet token_features(const ParamStore& backbone, const Corpus& corpus,
                          const TrainConfig& config) {
    if (!corpus.has_seg() || corpus.seg.size() != corpus.size())
        throw ContractError("dense probe needs a segmentation mask per image");
    check_corpus_dims(corpus, config.model);
    const std::size_t dim = config.model.embed_dim;
    const std::size_t grid = config.model.grid();
    const std::size_t patch = config.model.patch_size;

    FeatureSet set;
    set.features = Tensor({corpus.size() * config.model.patch_count(), dim});
    set.image_count = corpus.size();
    std::size_t row = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const Tensor& seg = corpus.seg[i];
        if (seg.rank() != 3 || seg.shape()[0] != config.model.image_size ||
            seg.shape()[1] != config.model.image_size || seg.shape()[2] != 1)
            throw ContractError("segmentation mask " + std::to_string(i) + " is " +
                                seg.shape_str() + ", expected " +
                                std::to_string(config.model.image_size) + "x" +
                                std::to_string(config.model.image_size) + "x1");

        const TokenSequence feats = forward_features(corpus.images[i], backbone, config.model);
        for (std::size_t py = 0; py < grid; ++py) {
            for (std::size_t px = 0; px < grid; ++px) {
                std::copy(feats.row(1 + py * grid + px), feats.row(1 + py * grid + px) + dim,
                          set.features.row(row));
                std::size_t fg = 0;
                for (std::size_t y = py * patch; y < (py + 1) * patch; ++y)
                    for (std::size_t x = px * patch; x < (px + 1) * patch; ++x)
                        fg += seg[y * config.model.image_size + x] > 0.5f;
                // Majority vote; ties count as background.
                set.labels.push_back(fg * 2 > patch * patch ? 1 : 0);
                set.image_of.push_back(i);
                ++row;
            }
        }
    }
    return set;
}

ProbeResult linear_probe(const ParamStore& backbone, const Corpus& corpus,
                         const TrainConfig& config) {
    const FeatureSet set = image_features(backbone, corpus, config);
    std::size_t classes = 0;
    for (std::uint32_t l : set.labels) classes = std::max<std::size_t>(classes, l + 1);
    if (classes < 2) throw ContractError("linear probe needs at least 2 classes");
    return fit_probe(set, classes, ProbeMetric::Accuracy, config);
}

ProbeResult dense_probe(const ParamStore& backbone, const Corpus& corpus,
                        const TrainConfig& config) {
    return fit_probe(token_features(backbone, corpus, config), 2, ProbeMetric::MeanIou, config);
}

ProbeResult finetune(const ParamStore& backbone, const Corpus& corpus,
                     const TrainConfig& config) {
    if (corpus.size() < 2) throw ContractError("fine-tuning needs at least 2 images");
    if (!corpus.labeled()) throw ContractError("fine-tuning needs a fully labeled corpus");
    check_corpus_dims(corpus, config.model);
    const std::size_t classes = label_range(corpus);
    if (classes < 2) throw ContractError("fine-tuning needs at least 2 classes");

    // Work on a copy: the feature-prediction head plays no part in
    // classification, and with no masking the mask embedding gets no gradient.
    ParamStore params;
    for (const auto& e : backbone.entries())
        if (e.name.rfind("head.", 0) != 0) params.add(e.name, e.value, true);
    if (params.has("mask_token")) params.set_trainable("mask_token", false);
    {
        Rng head_rng(substream(config.seed, "finetune-head"));
        Tensor w({classes, config.model.embed_dim});
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = head_rng.trunc_normal(0.02f);
        Tensor b({classes});
        b.fill(0.0f);
        params.add("cls_head.weight", std::move(w));
        params.add("cls_head.bias", std::move(b));
    }

    const std::vector<char> heldout =
        heldout_split(corpus.size(), config.seed, "finetune-split");
    std::vector<std::size_t> train_set, eval_set;
    for (std::size_t i = 0; i < corpus.size(); ++i)
        (heldout[i] ? eval_set : train_set).push_back(i);

    OptimizerState opt(config.opt);
    LrSchedule sched;
    sched.base_lr = config.finetune_lr;
    sched.min_lr = 0.0f;
    sched.total_steps = std::max<std::size_t>(config.finetune_steps, 1);
    sched.warmup_steps = std::min<std::size_t>(100, config.finetune_steps / 10);

    // Same shift-crop-and-flip recipe as the supervised runs; without it the
    // backbone memorizes small corpora instead of generalizing.
    const std::size_t aug_pad = 4;
    const std::size_t batch = std::min<std::size_t>(config.finetune_batch, train_set.size());
    if (config.finetune_steps > 0 && batch == 0)
        throw ContractError("fine-tune batch must be positive");
    const kern::Ops& K = kern::ops();

    for (std::size_t step = 0; step < config.finetune_steps; ++step) {
        Rng batch_rng(substream(config.seed, "finetune-batch", step));
        Gradients grads;
        double loss = 0.0;
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t idx = train_set[batch_rng.below(train_set.size())];
            const Tensor image = random_crop_flip(corpus.images[idx], aug_pad, batch_rng);

            const Tensor patches = patchify(image, config.model);
            const TokenSequence tokens = embed(patches, params, config.model);
            VitActivations acts;
            const TokenSequence feats = vit_forward(tokens, params, config.model, &acts);

            const Tensor& hw = params.get("cls_head.weight");
            const Tensor& hb = params.get("cls_head.bias");
            std::vector<float> logits(classes), d_logits(classes);
            K.linear_forward(hw.data(), hb.data(), feats.row(0), logits.data(), 1, classes,
                             config.model.embed_dim);
            loss += ce_row(logits.data(), classes, corpus.labels[idx], d_logits.data(),
                           1.0 / static_cast<double>(batch));

            Tensor d_feats({config.model.token_count(), config.model.embed_dim});
            d_feats.fill(0.0f);
            Tensor& dhw = grads.accum("cls_head.weight", hw.shape());
            Tensor& dhb = grads.accum("cls_head.bias", hb.shape());
            K.linear_backward(hw.data(), feats.row(0), d_logits.data(), dhw.data(), dhb.data(),
                              d_feats.row(0), 1, classes, config.model.embed_dim);

            const Tensor d_tokens = vit_backward(d_feats, acts, params, config.model, grads);
            embed_backward(d_tokens, patches, config.model, grads);
        }
        loss /= static_cast<double>(batch);
        if (!std::isfinite(loss))
            throw NumericError("fine-tuning diverged at step " + std::to_string(step));
        adamw_step(params, grads, opt, lr_at(sched, static_cast<std::int64_t>(step)));
    }

    std::size_t correct = 0;
    for (const std::size_t idx : eval_set) {
        const TokenSequence feats = forward_features(corpus.images[idx], params, config.model);
        std::vector<float> logits(classes);
        K.linear_forward(params.get("cls_head.weight").data(),
                         params.get("cls_head.bias").data(), feats.row(0), logits.data(), 1,
                         classes, config.model.embed_dim);
        correct += argmax_row(logits.data(), classes) == corpus.labels[idx];
    }

    ProbeResult result;
    result.metric = static_cast<double>(correct) / static_cast<double>(eval_set.size());
    result.classes = classes;
    result.samples = eval_set.size();
    result.digest = config_digest(config);
    return result;
}

Tensor attention_map(const ParamStore& backbone, const Tensor& image,
                     const TrainConfig& config) {
    const ViTConfig& c = config.model;
    if (image.rank() != 3 || image.shape()[0] != c.image_size ||
        image.shape()[1] != c.image_size || image.shape()[2] != c.channels)
        throw ContractError("attention map expects " + std::to_string(c.image_size) + "x" +
                            std::to_string(c.image_size) + "x" + std::to_string(c.channels) +
                            " images, got " + image.shape_str());
    const std::size_t layer =
        config.attn_layer == TrainConfig::kAttnLastLayer ? c.depth - 1 : config.attn_layer;

    const Tensor patches = patchify(image, c);
    const TokenSequence tokens = embed(patches, backbone, c);
    AttentionRecord attn;
    vit_forward(tokens, backbone, c, nullptr, &attn);
    return cls_attention_map(attn, layer, c);
}

std::pair<std::string, std::string> write_attention_map(const Tensor& map,
                                                        const std::string& stem) {
    if (map.rank() != 2) throw ContractError("attention map must be two-dimensional");
    float mn = map[0], mx = map[0];
    for (std::size_t i = 0; i < map.size(); ++i) {
        mn = std::min(mn, map[i]);
        mx = std::max(mx, map[i]);
    }
    Tensor norm(map.shape());
    if (mx > mn) {
        for (std::size_t i = 0; i < map.size(); ++i) norm[i] = (map[i] - mn) / (mx - mn);
    } else {
        norm.fill(0.0f);
    }

    const std::string pgm_path = stem + ".pgm";
    write_pgm(pgm_path, norm);

    const std::string csv_path = stem + ".csv";
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw UserError("cannot write attention values to " + csv_path);
    for (std::size_t y = 0; y < map.shape()[0]; ++y) {
        for (std::size_t x = 0; x < map.shape()[1]; ++x) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.9g", map.at(y, x));
            out << (x ? "," : "") << buf;
        }
        out << '\n';
    }
    if (!out) throw UserError("cannot write attention values to " + csv_path);
    return {pgm_path, csv_path};
}

AblationResult run_ablation(const TrainConfig& config) {
    // The base teacher kind is ignored; each arm swaps in its own kind and
    // validates below. Pixel stands in here so a base config whose teacher
    // settings only suit some other kind still passes the shared checks.
    {
        TrainConfig base_check = config;
        base_check.teacher.kind = GuidanceKind::Pixel;
        base_check.validate();
    }
    fs::create_directories(config.out_dir);

    const Corpus corpus = load_dataset(config);
    if (corpus.size() == 0) throw UserError("ablation needs a non-empty corpus");
    if (!corpus.labeled()) throw UserError("the ablation's linear probe needs a labeled corpus");
    if (!corpus.has_seg())
        throw UserError("the ablation's dense probe needs segmentation masks");

    // Plan and validate every arm before spending time on any of them.
    const bool wants_toy =
        std::find(config.ablate_guidance.begin(), config.ablate_guidance.end(),
                  GuidanceKind::ToySemantic) != config.ablate_guidance.end();
    std::string toy_weights = config.teacher.weights;
    if (wants_toy && toy_weights.empty())
        toy_weights = (fs::path(config.out_dir) / "toy-teacher.mimt").string();

    std::vector<TrainConfig> arms;
    for (const GuidanceKind g : config.ablate_guidance) {
        for (std::size_t i = 0; i < config.ablate_seeds; ++i) {
            TrainConfig arm = config;
            arm.teacher.kind = g;
            if (g == GuidanceKind::ToySemantic) arm.teacher.weights = toy_weights;
            arm.seed = config.seed + i;
            arm.out_dir = (fs::path(config.out_dir) /
                           (std::string(guidance_name(g)) + "-seed" + std::to_string(arm.seed)))
                              .string();
            arm.validate();
            arms.push_back(std::move(arm));
        }
    }

    // The toy teacher is trained once and shared across its arms.
    if (wants_toy && config.teacher.weights.empty()) {
        const ViTConfig tc = vit_preset(config.teacher.preset);
        const ToyTeacherResult toy =
            train_toy_teacher(corpus, tc, config.teacher.steps, config.teacher.seed);
        tensor_save(toy.teacher.params(), toy_weights);
    }

    AblationResult result;
    result.csv_path = (fs::path(config.out_dir) / "ablation.csv").string();
    result.summary_path = (fs::path(config.out_dir) / "ablation-summary.csv").string();
    std::ofstream csv(result.csv_path, std::ios::trunc);
    if (!csv) throw UserError("cannot write ablation table " + result.csv_path);
    csv << "guidance,seed,probe_acc,dense_iou\n";
    csv.flush();

    for (const TrainConfig& arm : arms) {
        const PretrainResult pre = run_pretraining(arm);
        AblationRow row;
        row.guidance = arm.teacher.kind;
        row.seed = arm.seed;
        row.probe_acc = linear_probe(pre.params, corpus, arm).metric;
        row.dense_iou = dense_probe(pre.params, corpus, arm).metric;

        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s,%llu,%.9g,%.9g\n", guidance_name(row.guidance),
                      static_cast<unsigned long long>(row.seed), row.probe_acc, row.dense_iou);
        csv << buf;
        csv.flush();
        result.rows.push_back(row);
    }

    for (const GuidanceKind g : config.ablate_guidance) {
        double pa = 0.0, pa2 = 0.0, iu = 0.0, iu2 = 0.0;
        std::size_t n = 0;
        for (const AblationRow& row : result.rows) {
            if (row.guidance != g) continue;
            pa += row.probe_acc;
            pa2 += row.probe_acc * row.probe_acc;
            iu += row.dense_iou;
            iu2 += row.dense_iou * row.dense_iou;
            ++n;
        }
        AblationGroup group;
        group.guidance = g;
        group.probe_mean = pa / n;
        group.probe_std = std::sqrt(std::max(0.0, pa2 / n - group.probe_mean * group.probe_mean));
        group.iou_mean = iu / n;
        group.iou_std = std::sqrt(std::max(0.0, iu2 / n - group.iou_mean * group.iou_mean));
        result.groups.push_back(group);
    }

    std::ofstream summary(result.summary_path, std::ios::trunc);
    if (!summary) throw UserError("cannot write ablation summary " + result.summary_path);
    summary << "guidance,probe_mean,probe_std,iou_mean,iou_std\n";
    for (const AblationGroup& group : result.groups) {
        char buf[192];
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%.9g\n",
                      guidance_name(group.guidance), group.probe_mean, group.probe_std,
                      group.iou_mean, group.iou_std);
        summary << buf;
    }
    return result;
}

}  // namespace mim
