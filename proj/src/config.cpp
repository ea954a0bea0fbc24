#include "mim/config.h"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mim/error.h"

namespace mim {

const char* loss_variant_name(LossVariant v) {
    return v == LossVariant::AllToken ? "all-token" : "masked-only";
}

LossVariant loss_variant_from_name(const std::string& name) {
    if (name == "all-token") return LossVariant::AllToken;
    if (name == "masked-only") return LossVariant::MaskedOnly;
    throw UserError("unknown loss variant '" + name + "' (expected all-token or masked-only)");
}

const char* probe_feature_name(ProbeFeature f) {
    return f == ProbeFeature::Cls ? "cls" : "mean-pool";
}

ProbeFeature probe_feature_from_name(const std::string& name) {
    if (name == "cls") return ProbeFeature::Cls;
    if (name == "mean-pool") return ProbeFeature::MeanPool;
    throw UserError("unknown probe feature '" + name + "' (expected cls or mean-pool)");
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const char* expected) {
    throw UserError("config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "an unsigned integer");
    return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_f64(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a number");
    return out;
}

float parse_f32(const std::string& key, const std::string& v) {
    float out = 0.0f;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a number");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "true or false");
}

std::vector<float> parse_f32_list(const std::string& key, const std::string& v) {
    std::vector<float> out;
    std::string item;
    std::istringstream ss(v);
    while (std::getline(ss, item, ',')) out.push_back(parse_f32(key, trim(item)));
    return out;
}

// Shortest decimal form that parses back to the same value.
template <typename T>
std::string fmt_num(T v) {
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, p);
}

std::string join_f32_list(const std::vector<float>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ",";
        out += fmt_num(xs[i]);
    }
    return out;
}

std::string join_guidance(const std::vector<GuidanceKind>& gs) {
    std::string out;
    for (std::size_t i = 0; i < gs.size(); ++i) {
        if (i) out += ",";
        out += guidance_name(gs[i]);
    }
    return out;
}

std::vector<GuidanceKind> parse_guidance_list(const std::string& key, const std::string& v) {
    std::vector<GuidanceKind> out;
    std::string item;
    std::istringstream ss(v);
    while (std::getline(ss, item, ',')) {
        const std::string name = trim(item);
        if (name.empty()) bad_value(key, v, "a comma-separated list of guidance kinds");
        out.push_back(guidance_from_name(name));
    }
    return out;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys{
        {"model.preset", "vit-micro",
         "Student backbone preset: vit-micro, vit-mini, vit-b16, or vit-l16."},
        {"model.image_size", "", "Input edge in pixels (defaults follow model.preset)."},
        {"model.patch_size", "", "Patch edge in pixels."},
        {"model.channels", "", "Image channels."},
        {"model.embed_dim", "", "Token embedding width."},
        {"model.depth", "", "Encoder block count."},
        {"model.heads", "", "Attention heads per block."},
        {"model.mlp_ratio", "", "Hidden width of each MLP as a multiple of embed_dim."},
        {"teacher.kind", "toy-semantic",
         "Guidance source: frozen-vit, pixel, hog, or toy-semantic."},
        {"teacher.preset", "vit-micro",
         "Backbone preset of a frozen-vit or toy-semantic teacher."},
        {"teacher.weights", "",
         "Tensor file with frozen-vit weights; empty draws random weights from teacher.seed."},
        {"teacher.seed", "1", "Seed for random frozen weights and toy-teacher training."},
        {"teacher.steps", "2000", "Supervised steps when training the toy-semantic teacher."},
        {"teacher.bins", "8", "Orientation bins of the hog teacher."},
        {"teacher.cell", "4", "Cell edge in pixels of the hog teacher; must divide the patch."},
        {"mask.target", "6", "Patch tokens replaced by the mask embedding per image."},
        {"mask.min_block", "4", "Smallest cell count of one sampled mask block."},
        {"data.path", "",
         "Corpus file or image directory; empty generates the synthetic shape corpus."},
        {"data.seed", "123", "Generator seed of the synthetic corpus."},
        {"data.count", "512", "Image count of the synthetic corpus."},
        {"data.classes", "4", "Shape classes of the synthetic corpus (2 to 4)."},
        {"data.mean", "", "Comma-separated per-channel means; empty skips normalization."},
        {"data.std", "", "Comma-separated per-channel stds; empty skips normalization."},
        {"train.steps", "500", "Pre-training steps."},
        {"train.batch", "32", "Images per pre-training step."},
        {"train.lr", "0.0015", "Peak learning rate."},
        {"train.min_lr", "0", "Final learning rate of the cosine decay."},
        {"train.warmup", "50", "Linear warmup steps (clamped below train.steps)."},
        {"train.weight_decay", "0.05", "Decoupled weight decay."},
        {"train.beta1", "0.9", "Adam first-moment decay."},
        {"train.beta2", "0.999", "Adam second-moment decay."},
        {"train.epsilon", "1e-08", "Adam denominator floor."},
        {"train.loss", "all-token",
         "Alignment objective: all-token, or masked-only (CLS plus masked positions)."},
        {"train.checkpoint_every", "100", "Steps between checkpoints."},
        {"train.aug_pad", "0",
         "Replicate-pad margin of the random-crop augmentation; 0 disables cropping."},
        {"train.aug_flip", "false", "Random horizontal flip during pre-training."},
        {"probe.steps", "400", "Linear-probe training steps."},
        {"probe.batch", "32", "Images per probe step."},
        {"probe.lr", "0.001", "Probe learning rate (no weight decay)."},
        {"probe.feature", "cls", "Probe input: cls, or mean-pool over patch tokens."},
        {"finetune.steps", "400", "Fine-tuning steps."},
        {"finetune.batch", "32", "Images per fine-tuning step."},
        {"finetune.lr", "0.004", "Fine-tuning peak learning rate."},
        {"attnmap.layer", "last", "Encoder layer of the attention dump (index or `last`)."},
        {"attnmap.image", "0", "Corpus index of the image to visualize."},
        {"ablate.seeds", "3", "Seeds per guidance arm of the ablation."},
        {"ablate.guidance", "toy-semantic,frozen-vit",
         "Comma-separated guidance kinds the ablation compares."},
        {"seed", "0", "Run seed controlling init, batches, and masks."},
        {"out.dir", "out", "Output directory for checkpoints, metrics, and reports."},
    };
    return keys;
}

KeyValues parse_config_text(const std::string& text) {
    KeyValues kv;
    std::istringstream ss(text);
    std::string raw;
    for (std::size_t lineno = 1; std::getline(ss, raw); ++lineno) {
        std::string line = raw.substr(0, raw.find('#'));
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UserError("config line " + std::to_string(lineno) +
                            ": expected `key = value`, got '" + trim(raw) + "'");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty())
            throw UserError("config line " + std::to_string(lineno) + ": empty key");
        kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

KeyValues load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UserError("cannot open config file " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config_text(text.str());
}

void apply_override(KeyValues& kv, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty())
        throw UserError("override '" + assignment + "' is not of the form key=value");
    kv[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

TrainConfig resolve_config(const KeyValues& kv) {
    for (const auto& [key, value] : kv) {
        (void)value;
        const auto& keys = config_keys();
        const bool known = std::any_of(keys.begin(), keys.end(),
                                       [&](const ConfigKey& k) { return k.name == key; });
        if (!known) {
            std::string msg = "unknown config key '" + key + "'; valid keys:";
            for (const auto& k : keys) msg += "\n  " + k.name;
            throw UserError(msg);
        }
    }
    const auto get = [&](const char* name) -> const std::string* {
        const auto it = kv.find(name);
        return it == kv.end() ? nullptr : &it->second;
    };

    TrainConfig c;
    if (const auto* v = get("model.preset")) {
        c.model_preset = *v;
        c.model = vit_preset(*v);
    }
    if (const auto* v = get("model.image_size"))
        c.model.image_size = parse_size("model.image_size", *v);
    if (const auto* v = get("model.patch_size"))
        c.model.patch_size = parse_size("model.patch_size", *v);
    if (const auto* v = get("model.channels")) c.model.channels = parse_size("model.channels", *v);
    if (const auto* v = get("model.embed_dim"))
        c.model.embed_dim = parse_size("model.embed_dim", *v);
    if (const auto* v = get("model.depth")) c.model.depth = parse_size("model.depth", *v);
    if (const auto* v = get("model.heads")) c.model.heads = parse_size("model.heads", *v);
    if (const auto* v = get("model.mlp_ratio"))
        c.model.mlp_ratio = parse_f32("model.mlp_ratio", *v);

    if (const auto* v = get("teacher.kind")) c.teacher.kind = guidance_from_name(*v);
    if (const auto* v = get("teacher.preset")) {
        vit_preset(*v);  // reject unknown names early
        c.teacher.preset = *v;
    }
    if (const auto* v = get("teacher.weights")) c.teacher.weights = *v;
    if (const auto* v = get("teacher.seed")) c.teacher.seed = parse_u64("teacher.seed", *v);
    if (const auto* v = get("teacher.steps")) c.teacher.steps = parse_size("teacher.steps", *v);
    if (const auto* v = get("teacher.bins")) c.teacher.bins = parse_size("teacher.bins", *v);
    if (const auto* v = get("teacher.cell")) c.teacher.cell = parse_size("teacher.cell", *v);

    if (const auto* v = get("mask.target")) c.mask_target = parse_size("mask.target", *v);
    if (const auto* v = get("mask.min_block"))
        c.mask_min_block = parse_size("mask.min_block", *v);

    if (const auto* v = get("data.path")) c.data.path = *v;
    if (const auto* v = get("data.seed")) c.data.seed = parse_u64("data.seed", *v);
    if (const auto* v = get("data.count")) c.data.count = parse_size("data.count", *v);
    if (const auto* v = get("data.classes")) c.data.classes = parse_size("data.classes", *v);
    if (const auto* v = get("data.mean")) c.data.mean = parse_f32_list("data.mean", *v);
    if (const auto* v = get("data.std")) c.data.std_dev = parse_f32_list("data.std", *v);

    if (const auto* v = get("train.steps")) c.steps = parse_size("train.steps", *v);
    if (const auto* v = get("train.batch")) c.batch = parse_size("train.batch", *v);
    if (const auto* v = get("train.lr")) c.schedule.base_lr = parse_f64("train.lr", *v);
    if (const auto* v = get("train.min_lr")) c.schedule.min_lr = parse_f64("train.min_lr", *v);
    if (const auto* v = get("train.warmup"))
        c.schedule.warmup_steps = static_cast<std::int64_t>(parse_u64("train.warmup", *v));
    if (const auto* v = get("train.weight_decay"))
        c.opt.weight_decay = parse_f32("train.weight_decay", *v);
    if (const auto* v = get("train.beta1")) c.opt.beta1 = parse_f32("train.beta1", *v);
    if (const auto* v = get("train.beta2")) c.opt.beta2 = parse_f32("train.beta2", *v);
    if (const auto* v = get("train.epsilon")) c.opt.epsilon = parse_f32("train.epsilon", *v);
    if (const auto* v = get("train.loss")) c.loss = loss_variant_from_name(*v);
    if (const auto* v = get("train.checkpoint_every"))
        c.checkpoint_every = parse_size("train.checkpoint_every", *v);
    if (const auto* v = get("train.aug_pad")) c.aug_pad = parse_size("train.aug_pad", *v);
    if (const auto* v = get("train.aug_flip")) c.aug_flip = parse_bool("train.aug_flip", *v);

    if (const auto* v = get("probe.steps")) c.probe_steps = parse_size("probe.steps", *v);
    if (const auto* v = get("probe.batch")) c.probe_batch = parse_size("probe.batch", *v);
    if (const auto* v = get("probe.lr")) c.probe_lr = parse_f32("probe.lr", *v);
    if (const auto* v = get("probe.feature")) c.probe_feature = probe_feature_from_name(*v);

    if (const auto* v = get("finetune.steps")) c.finetune_steps = parse_size("finetune.steps", *v);
    if (const auto* v = get("finetune.batch")) c.finetune_batch = parse_size("finetune.batch", *v);
    if (const auto* v = get("finetune.lr")) c.finetune_lr = parse_f32("finetune.lr", *v);

    if (const auto* v = get("attnmap.layer"))
        c.attn_layer = (*v == "last") ? TrainConfig::kAttnLastLayer
                                      : parse_size("attnmap.layer", *v);
    if (const auto* v = get("attnmap.image")) c.attn_image = parse_size("attnmap.image", *v);

    if (const auto* v = get("ablate.seeds")) c.ablate_seeds = parse_size("ablate.seeds", *v);
    if (const auto* v = get("ablate.guidance"))
        c.ablate_guidance = parse_guidance_list("ablate.guidance", *v);

    if (const auto* v = get("seed")) c.seed = parse_u64("seed", *v);
    if (const auto* v = get("out.dir")) c.out_dir = *v;

    c.schedule.total_steps = static_cast<std::int64_t>(std::max<std::size_t>(c.steps, 1));
    c.schedule.warmup_steps =
        std::min<std::int64_t>(c.schedule.warmup_steps, c.schedule.total_steps - 1);

    c.validate();
    return c;
}

void TrainConfig::validate() const {
    model.validate();
    if (mask_target > model.patch_count())
        throw UserError("mask.target " + std::to_string(mask_target) + " exceeds the model's " +
                        std::to_string(model.patch_count()) + " patch tokens");
    if (mask_min_block == 0) throw UserError("mask.min_block must be at least 1");
    if (batch == 0 || probe_batch == 0 || finetune_batch == 0)
        throw UserError("batch sizes must be at least 1");
    if (checkpoint_every == 0) throw UserError("train.checkpoint_every must be at least 1");
    schedule.validate();
    if (opt.beta1 < 0.0f || opt.beta1 >= 1.0f || opt.beta2 < 0.0f || opt.beta2 >= 1.0f)
        throw UserError("Adam betas must lie in [0, 1)");
    if (opt.epsilon <= 0.0f) throw UserError("train.epsilon must be positive");
    if (opt.weight_decay < 0.0f) throw UserError("train.weight_decay must be non-negative");

    if (data.path.empty()) {
        if (data.count == 0) throw UserError("data.count must be at least 1");
        if (data.classes < 2 || data.classes > 4)
            throw UserError("data.classes must lie in [2, 4]");
    }
    if (data.mean.size() != data.std_dev.size())
        throw UserError("data.mean and data.std must list the same number of channels");
    if (!data.mean.empty() && data.mean.size() != model.channels)
        throw UserError("data.mean lists " + std::to_string(data.mean.size()) +
                        " channels, the model expects " + std::to_string(model.channels));
    for (const float s : data.std_dev)
        if (s <= 0.0f) throw UserError("data.std entries must be positive");

    if (teacher.kind == GuidanceKind::FrozenVit || teacher.kind == GuidanceKind::ToySemantic) {
        const ViTConfig t = vit_preset(teacher.preset);
        if (t.image_size != model.image_size || t.patch_size != model.patch_size ||
            t.channels != model.channels)
            throw UserError("teacher preset '" + teacher.preset +
                            "' does not share the student's patch geometry");
    }
    if (teacher.kind == GuidanceKind::HogLike) {
        if (teacher.bins == 0) throw UserError("teacher.bins must be at least 1");
        if (teacher.cell == 0 || model.patch_size % teacher.cell != 0)
            throw UserError("teacher.cell must divide the patch size " +
                            std::to_string(model.patch_size));
    }

    if (attn_layer != kAttnLastLayer && attn_layer >= model.depth)
        throw UserError("attnmap.layer " + std::to_string(attn_layer) +
                        " outside the model's " + std::to_string(model.depth) + " layers");
    if (ablate_seeds == 0) throw UserError("ablate.seeds must be at least 1");
    if (ablate_guidance.empty()) throw UserError("ablate.guidance must name at least one kind");
}

std::string serialize_config(const TrainConfig& c) {
    std::string out;
    const auto line = [&](const char* key, const std::string& value) {
        out += key;
        out += " = ";
        out += value;
        out += "\n";
    };
    line("model.preset", c.model_preset);
    line("model.image_size", std::to_string(c.model.image_size));
    line("model.patch_size", std::to_string(c.model.patch_size));
    line("model.channels", std::to_string(c.model.channels));
    line("model.embed_dim", std::to_string(c.model.embed_dim));
    line("model.depth", std::to_string(c.model.depth));
    line("model.heads", std::to_string(c.model.heads));
    line("model.mlp_ratio", fmt_num(c.model.mlp_ratio));
    line("teacher.kind", guidance_name(c.teacher.kind));
    line("teacher.preset", c.teacher.preset);
    line("teacher.weights", c.teacher.weights);
    line("teacher.seed", std::to_string(c.teacher.seed));
    line("teacher.steps", std::to_string(c.teacher.steps));
    line("teacher.bins", std::to_string(c.teacher.bins));
    line("teacher.cell", std::to_string(c.teacher.cell));
    line("mask.target", std::to_string(c.mask_target));
    line("mask.min_block", std::to_string(c.mask_min_block));
    line("data.path", c.data.path);
    line("data.seed", std::to_string(c.data.seed));
    line("data.count", std::to_string(c.data.count));
    line("data.classes", std::to_string(c.data.classes));
    line("data.mean", join_f32_list(c.data.mean));
    line("data.std", join_f32_list(c.data.std_dev));
    line("train.steps", std::to_string(c.steps));
    line("train.batch", std::to_string(c.batch));
    line("train.lr", fmt_num(c.schedule.base_lr));
    line("train.min_lr", fmt_num(c.schedule.min_lr));
    line("train.warmup", std::to_string(c.schedule.warmup_steps));
    line("train.weight_decay", fmt_num(c.opt.weight_decay));
    line("train.beta1", fmt_num(c.opt.beta1));
    line("train.beta2", fmt_num(c.opt.beta2));
    line("train.epsilon", fmt_num(c.opt.epsilon));
    line("train.loss", loss_variant_name(c.loss));
    line("train.checkpoint_every", std::to_string(c.checkpoint_every));
    line("train.aug_pad", std::to_string(c.aug_pad));
    line("train.aug_flip", c.aug_flip ? "true" : "false");
    line("probe.steps", std::to_string(c.probe_steps));
    line("probe.batch", std::to_string(c.probe_batch));
    line("probe.lr", fmt_num(c.probe_lr));
    line("probe.feature", probe_feature_name(c.probe_feature));
    line("finetune.steps", std::to_string(c.finetune_steps));
    line("finetune.batch", std::to_string(c.finetune_batch));
    line("finetune.lr", fmt_num(c.finetune_lr));
    line("attnmap.layer",
         c.attn_layer == TrainConfig::kAttnLastLayer ? "last" : std::to_string(c.attn_layer));
    line("attnmap.image", std::to_string(c.attn_image));
    line("ablate.seeds", std::to_string(c.ablate_seeds));
    line("ablate.guidance", join_guidance(c.ablate_guidance));
    line("seed", std::to_string(c.seed));
    line("out.dir", c.out_dir);
    return out;
}

std::string config_digest(const TrainConfig& c) {
    // The digest gates checkpoint resume, so it covers every key except
    // out.dir: where artifacts land has no bearing on the trajectory, and a
    // run may legitimately be resumed into a fresh directory.
    std::string text = serialize_config(c);
    const std::size_t at = text.find("out.dir = ");
    if (at != std::string::npos)
        text.erase(at, text.find('\n', at) - at + 1);
    std::uint64_t h = 1469598103934665603ULL;
    for (const unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 16);
}

}  // namespace mim
