#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mim/rng.h"
#include "mim/tensor.h"

namespace mim {

inline constexpr std::uint32_t kNoLabel = 0xFFFFFFFFu;

// An ordered set of images with optional class labels and optional per-pixel
// foreground masks (H x W x 1, values 0 or 1) used by the dense probe.
struct Corpus {
    std::vector<Tensor> images;          // each H x W x C
    std::vector<std::uint32_t> labels;   // kNoLabel when absent
    std::vector<Tensor> seg;             // empty, or one mask per image

    std::size_t size() const { return images.size(); }
    bool labeled() const;
    bool has_seg() const { return !seg.empty(); }
};

// Procedural shape corpus: one bright geometric figure (circle, square,
// triangle, or cross by class index) with position/size jitter over a noisy
// background tone. Figure color is drawn independently of the class so color
// alone cannot separate the classes. Labels cycle 0..classes-1, pixels lie
// in [0,1], and per-pixel masks are filled in. Deterministic per seed.
Corpus synth_dataset(std::uint64_t seed, std::size_t count, std::size_t classes,
                     std::size_t image_size = 32, std::size_t channels = 3);

// Corpus container format, little-endian throughout:
//   magic "MIMCORP1", u32 image count,
//   per image: u32 height, width, channels, u32 label (0xFFFFFFFF = none),
//              then height*width*channels f32 pixel values.
// Masks are not part of the container; store them as a second corpus of
// 1-channel images.
void save_corpus(const Corpus& corpus, const std::string& path);

// Loads a corpus container, or every .pgm/.ppm file of a directory in
// filename order (unlabeled). Malformed input raises FormatError.
Corpus load_corpus(const std::string& path);

// In-place per-channel (x - mean) / std. Vector sizes must match the channel
// count; std entries must be positive.
void normalize_corpus(Corpus& corpus, const std::vector<float>& mean,
                      const std::vector<float>& std_dev);

// Shift-crop augmentation: replicate-pad by `pad` pixels, take a random
// same-sized crop, then (unless disabled) flip horizontally with probability
// one half. The mask, when given, undergoes the same transform.
Tensor random_crop_flip(const Tensor& image, std::size_t pad, Rng& rng,
                        Tensor* mask = nullptr, bool allow_flip = true);

// 8-bit binary graymap (P5). Values are clamped to [0,1] then scaled to 255.
void write_pgm(const std::string& path, const Tensor& gray);

// Single raster files; P5 loads as H x W x 1, P6 as H x W x 3, scaled to [0,1].
Tensor read_pnm(const std::string& path);

}  // namespace mim
