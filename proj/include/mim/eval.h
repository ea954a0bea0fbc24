#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mim/config.h"
#include "mim/data.h"
#include "mim/tensor.h"

namespace mim {

// Held-out metric from a probe or fine-tuning run.
struct ProbeResult {
    double metric = 0.0;      // accuracy, or mean per-class IoU for the dense probe
    std::size_t classes = 0;
    std::size_t samples = 0;  // held-out sample count
    std::string digest;       // digest of the configuration that produced it
};

// Feature rows ready for affine probing. image_of names the owning image of
// each row so the train/eval split never cuts through an image.
struct FeatureSet {
    Tensor features;                    // rows x dim
    std::vector<std::uint32_t> labels;  // one per row
    std::vector<std::size_t> image_of;  // one per row
    std::size_t image_count = 0;
};

enum class ProbeMetric { Accuracy, MeanIou };

// Deterministic 80/20 split keyed by (seed, tag); a set byte marks a held-out
// image. Both probes share the "probe-split" tag so they score the same
// held-out images.
std::vector<char> heldout_split(std::size_t image_count, std::uint64_t seed,
                                const std::string& tag);

// Mean intersection-over-union across the classes present in either vector.
double mean_class_iou(const std::vector<std::uint32_t>& pred,
                      const std::vector<std::uint32_t>& truth, std::size_t classes);

// Trains a single affine layer on the set's training split and scores the
// held-out split. The backbone never enters this function, which is what
// keeps the probes read-only.
ProbeResult fit_probe(const FeatureSet& set, std::size_t classes, ProbeMetric metric,
                      const TrainConfig& config);

// One row per image: the CLS feature, or the mean over patch tokens when the
// config selects mean pooling. Labels come from the corpus.
FeatureSet image_features(const ParamStore& backbone, const Corpus& corpus,
                          const TrainConfig& config);

// One row per patch token; the label is the majority foreground/background
// vote over the patch's segmentation pixels.
FeatureSet token_features(const ParamStore& backbone, const Corpus& corpus,
                          const TrainConfig& config);

// Frozen-backbone classification accuracy on a held-out split.
ProbeResult linear_probe(const ParamStore& backbone, const Corpus& corpus,
                         const TrainConfig& config);

// Frozen-backbone per-token foreground segmentation, scored as mean IoU.
ProbeResult dense_probe(const ParamStore& backbone, const Corpus& corpus,
                        const TrainConfig& config);

// End-to-end classification training of a copy of the backbone plus a fresh
// affine head; returns held-out accuracy.
ProbeResult finetune(const ParamStore& backbone, const Corpus& corpus,
                     const TrainConfig& config);

// CLS-query attention row at the configured layer, averaged over heads, as a
// [grid x grid] map.
Tensor attention_map(const ParamStore& backbone, const Tensor& image,
                     const TrainConfig& config);

// Writes stem.pgm (min-max normalized; constant maps come out all black) and
// stem.csv (raw values, one line per grid row); returns the two paths.
std::pair<std::string, std::string> write_attention_map(const Tensor& map,
                                                        const std::string& stem);

struct AblationRow {
    GuidanceKind guidance = GuidanceKind::Pixel;
    std::uint64_t seed = 0;
    double probe_acc = 0.0;
    double dense_iou = 0.0;
};

struct AblationGroup {
    GuidanceKind guidance = GuidanceKind::Pixel;
    double probe_mean = 0.0;
    double probe_std = 0.0;
    double iou_mean = 0.0;
    double iou_std = 0.0;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::vector<AblationGroup> groups;
    std::string csv_path;
    std::string summary_path;
};

// Pretrains and probes one arm per (guidance, seed) pair; rows land in
// ablation.csv as they finish so a failing arm leaves the earlier ones on
// disk. A toy-semantic teacher is trained once up front and shared across its
// arms through a weights file.
AblationResult run_ablation(const TrainConfig& config);

}  // namespace mim
