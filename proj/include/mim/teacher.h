#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "mim/data.h"
#include "mim/tensor.h"
#include "mim/vit.h"

namespace mim {

// Guidance sources for the frozen feature target.
enum class GuidanceKind { FrozenVit, Pixel, HogLike, ToySemantic };

const char* guidance_name(GuidanceKind kind);
GuidanceKind guidance_from_name(const std::string& name);  // UserError on unknown

// Patch-grid geometry shared by the raw-feature teachers.
struct PatchGeometry {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 3;

    void validate() const;
    std::size_t grid() const { return image_size / patch_size; }
    std::size_t patch_count() const { return grid() * grid(); }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
};

// A frozen feature extractor mapping a clean image to one feature vector per
// token (row 0 = CLS). Immutable after construction; extraction is a pure
// function of (weights, image).
class Teacher {
public:
    // Default state is an empty pixel teacher; use the named constructors.
    Teacher() = default;

    // Random frozen backbone initialized from the seed.
    static Teacher frozen_vit(const ViTConfig& config, std::uint64_t seed);
    // Backbone weights from a tensor file; every entry must match the
    // config's parameter table (FormatError naming the offender otherwise).
    static Teacher frozen_vit_from_file(const ViTConfig& config, const std::string& path);
    // Flattened patch pixels, each token unit-normalized; CLS = patch mean.
    static Teacher pixel(const PatchGeometry& geometry);
    // Per-patch gradient-orientation histograms over cell x cell sub-tiles;
    // CLS = patch mean. cell must divide patch_size.
    static Teacher hog(const PatchGeometry& geometry, std::size_t bins = 8, std::size_t cell = 4);
    // Wraps already-trained backbone weights (train_toy_teacher's output).
    static Teacher toy_semantic(const ViTConfig& config, ParamStore weights);

    GuidanceKind kind() const { return kind_; }
    std::size_t feature_dim() const { return feature_dim_; }
    std::size_t token_count() const { return patch_count_ + 1; }
    const ParamStore& params() const { return params_; }
    const ViTConfig& vit_config() const;

    Tensor extract(const Tensor& image) const;

private:
    GuidanceKind kind_ = GuidanceKind::Pixel;
    ViTConfig vit_{};
    bool has_vit_ = false;
    PatchGeometry geom_{};
    std::size_t bins_ = 8, cell_ = 4;
    std::size_t feature_dim_ = 0, patch_count_ = 0;
    ParamStore params_;
};

// Supervised training of a small classification ViT on a labeled corpus;
// the classifier head is dropped afterwards and the backbone frozen.
// Reported accuracy comes from a held-out fifth of the corpus.
struct ToyTeacherResult {
    Teacher teacher;
    double accuracy = 0.0;
    std::size_t eval_count = 0;
};

ToyTeacherResult train_toy_teacher(const Corpus& corpus, const ViTConfig& config,
                                   std::size_t steps, std::uint64_t seed);

}  // namespace mim
