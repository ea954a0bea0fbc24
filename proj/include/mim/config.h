#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mim/optim.h"
#include "mim/teacher.h"
#include "mim/vit.h"

namespace mim {

enum class LossVariant { AllToken, MaskedOnly };
enum class ProbeFeature { Cls, MeanPool };

const char* loss_variant_name(LossVariant v);
LossVariant loss_variant_from_name(const std::string& name);
const char* probe_feature_name(ProbeFeature f);
ProbeFeature probe_feature_from_name(const std::string& name);

struct TeacherSettings {
    GuidanceKind kind = GuidanceKind::ToySemantic;
    std::string preset = "vit-micro";   // backbone of frozen-vit / toy-semantic
    std::string weights;                // .mimt path; empty draws random weights
    std::uint64_t seed = 1;
    std::size_t steps = 2000;           // toy-semantic supervised steps
    std::size_t bins = 8;               // hog orientation bins
    std::size_t cell = 4;               // hog cell edge in pixels
};

struct DataSettings {
    std::string path;                   // corpus file or directory; empty -> synthetic
    std::uint64_t seed = 123;
    std::size_t count = 512;
    std::size_t classes = 4;
    std::vector<float> mean;            // per-channel; empty -> no normalization
    std::vector<float> std_dev;
};

// Every tunable of the training and evaluation commands, resolved from the
// documented key list. Field defaults are the authority; the registry mirrors
// them for --help and the tests cross-check the two.
struct TrainConfig {
    std::string model_preset = "vit-micro";
    ViTConfig model = vit_preset("vit-micro");
    TeacherSettings teacher;
    DataSettings data;

    std::size_t mask_target = 6;
    std::size_t mask_min_block = 4;

    std::size_t steps = 500;
    std::size_t batch = 32;
    LrSchedule schedule{1.5e-3, 0.0, 50, 500};  // total_steps follows `steps`
    AdamwHyper opt;
    LossVariant loss = LossVariant::AllToken;
    std::size_t checkpoint_every = 100;
    std::size_t aug_pad = 0;            // 0 disables crop augmentation
    bool aug_flip = false;
    std::uint64_t seed = 0;
    std::string out_dir = "out";

    std::size_t probe_steps = 400;
    std::size_t probe_batch = 32;
    float probe_lr = 1e-3f;
    ProbeFeature probe_feature = ProbeFeature::Cls;

    std::size_t finetune_steps = 400;
    std::size_t finetune_batch = 32;
    float finetune_lr = 4e-3f;

    static constexpr std::size_t kAttnLastLayer = static_cast<std::size_t>(-1);
    std::size_t attn_layer = kAttnLastLayer;
    std::size_t attn_image = 0;

    std::size_t ablate_seeds = 3;
    std::vector<GuidanceKind> ablate_guidance{GuidanceKind::ToySemantic,
                                              GuidanceKind::FrozenVit};

    void validate() const;
};

struct ConfigKey {
    std::string name;
    std::string fallback;               // "" means derived (e.g. from the preset)
    std::string help;
};

// The documented key list, in canonical file order.
const std::vector<ConfigKey>& config_keys();

// Raw key -> value pairs; later assignments win.
using KeyValues = std::map<std::string, std::string>;

// Flat `key = value` lines; `#` starts a comment. Syntax errors name the line.
KeyValues parse_config_text(const std::string& text);
KeyValues load_config_file(const std::string& path);

// Applies one `key=value` override as given to --set.
void apply_override(KeyValues& kv, const std::string& assignment);

// Materializes and validates a TrainConfig. Unknown keys and malformed
// values raise UserError; the unknown-key message lists every valid key.
TrainConfig resolve_config(const KeyValues& kv);

// Canonical text form: every key with its resolved value, one per line.
// resolve_config(parse_config_text(serialize_config(c))) reproduces c.
std::string serialize_config(const TrainConfig& c);

// FNV-1a 64-bit hash of the canonical form, as 16 hex digits. Stored in
// checkpoints so resume can detect a changed configuration.
std::string config_digest(const TrainConfig& c);

}  // namespace mim
