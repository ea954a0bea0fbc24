#include "mim/mask.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "mim/error.h"
#include "mim/rng.h"

namespace mim {

namespace {

constexpr double kMinAspect = 0.3;  // height/width ratio range, log-uniform

std::size_t clamp_dim(double v, std::size_t limit) {
    const auto r = static_cast<std::size_t>(std::llround(std::max(1.0, v)));
    return std::min(r, limit);
}

void check_grid(std::size_t grid_h, std::size_t grid_w, std::size_t target) {
    if (grid_h == 0 || grid_w == 0) throw ContractError("mask grid must be non-empty");
    if (target > grid_h * grid_w)
        throw RangeError("mask target " + std::to_string(target) + " exceeds grid of " +
                         std::to_string(grid_h * grid_w) + " cells");
}

}  // namespace

bool MaskSpec::contains(std::size_t index) const {
    return std::binary_search(masked.begin(), masked.end(), index);
}

MaskSpec blockwise_mask(std::size_t grid_h, std::size_t grid_w, std::size_t target_count,
                        std::uint64_t seed, std::size_t min_block) {
    check_grid(grid_h, grid_w, target_count);
    if (min_block == 0) throw ContractError("min_block must be positive");

    MaskSpec spec;
    spec.grid_h = grid_h;
    spec.grid_w = grid_w;
    spec.seed = seed;

    Rng rng(substream(seed, "blockwise-mask"));
    std::vector<char> covered(grid_h * grid_w, 0);
    std::size_t count = 0;
    std::vector<std::size_t> last_new;  // cells only the latest block contributed

    std::size_t stalled = 0;
    while (count < target_count) {
        const std::size_t remaining = target_count - count;
        const std::size_t area_hi = std::max(min_block, remaining);
        const std::size_t area =
            min_block + rng.below(static_cast<std::uint64_t>(area_hi - min_block + 1));
        const double aspect =
            std::exp(rng.uniform(std::log(kMinAspect), std::log(1.0 / kMinAspect)));
        const double af = static_cast<double>(area);
        MaskBlock blk;
        blk.height = clamp_dim(std::sqrt(af * aspect), grid_h);
        // Width from the exact area so rounding never shrinks the block below
        // the sampled area (and hence below min_block) unless the grid clips it.
        blk.width = std::min(grid_w, (area + blk.height - 1) / blk.height);
        blk.top = rng.below(static_cast<std::uint64_t>(grid_h - blk.height + 1));
        blk.left = rng.below(static_cast<std::uint64_t>(grid_w - blk.width + 1));

        std::vector<std::size_t> fresh;
        for (std::size_t r = blk.top; r < blk.top + blk.height; ++r)
            for (std::size_t c = blk.left; c < blk.left + blk.width; ++c) {
                const std::size_t idx = r * grid_w + c;
                if (!covered[idx]) {
                    covered[idx] = 1;
                    fresh.push_back(idx);
                }
            }
        if (fresh.empty()) {
            // A fully redundant block; random placement escapes this quickly,
            // the cap only guards against a logic regression looping forever.
            if (++stalled > 100000) throw ContractError("blockwise mask failed to make progress");
            continue;
        }
        stalled = 0;
        spec.blocks.push_back(blk);
        count += fresh.size();
        last_new = std::move(fresh);
    }

    // Trim uniformly chosen surplus cells; all of them were first covered by
    // the final block, so the block log plus trim list still reconstructs
    // the masked set.
    std::size_t surplus = count - target_count;
    if (surplus > 0) {
        rng.shuffle(last_new.begin(), last_new.end());
        spec.trimmed.assign(last_new.begin(), last_new.begin() + surplus);
        for (std::size_t idx : spec.trimmed) covered[idx] = 0;
    }

    spec.masked.reserve(target_count);
    for (std::size_t i = 0; i < covered.size(); ++i)
        if (covered[i]) spec.masked.push_back(i);
    return spec;
}

MaskSpec random_mask(std::size_t grid_h, std::size_t grid_w, std::size_t target_count,
                     std::uint64_t seed) {
    check_grid(grid_h, grid_w, target_count);
    MaskSpec spec;
    spec.grid_h = grid_h;
    spec.grid_w = grid_w;
    spec.seed = seed;

    Rng rng(substream(seed, "random-mask"));
    std::vector<std::size_t> cells(grid_h * grid_w);
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
    // Partial Fisher-Yates: the first target_count slots become the sample.
    for (std::size_t i = 0; i < target_count; ++i) {
        const std::size_t j =
            i + static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(cells.size() - i)));
        std::swap(cells[i], cells[j]);
    }
    spec.masked.assign(cells.begin(), cells.begin() + target_count);
    std::sort(spec.masked.begin(), spec.masked.end());
    return spec;
}

TokenSequence apply_mask(const TokenSequence& tokens, const MaskSpec& spec,
                         const Tensor& mask_embedding, const Tensor& pos_embed) {
    const std::size_t dim = tokens.cols();
    if (tokens.rows() != spec.cell_count() + 1)
        throw ContractError("mask grid " + std::to_string(spec.grid_h) + "x" +
                            std::to_string(spec.grid_w) + " does not match " +
                            std::to_string(tokens.rows()) + " tokens");
    if (mask_embedding.size() != dim)
        throw ContractError("mask embedding width " + std::to_string(mask_embedding.size()) +
                            " does not match embed dim " + std::to_string(dim));
    if (!pos_embed.same_shape(tokens))
        throw ContractError("positional embedding shape " + pos_embed.shape_str() +
                            " does not match tokens " + tokens.shape_str());

    TokenSequence out = tokens;
    for (std::size_t cell : spec.masked) {
        const std::size_t row = cell + 1;
        float* dst = out.row(row);
        const float* pos = pos_embed.row(row);
        for (std::size_t i = 0; i < dim; ++i) dst[i] = mask_embedding[i] + pos[i];
    }
    return out;
}

Tensor apply_mask_backward(const Tensor& d_tokens, const MaskSpec& spec,
                           Tensor& d_mask_embedding, Tensor& d_pos_embed) {
    const std::size_t dim = d_tokens.cols();
    if (d_tokens.rows() != spec.cell_count() + 1)
        throw ContractError("mask grid does not match gradient rows");
    if (d_mask_embedding.size() != dim || !d_pos_embed.same_shape(d_tokens))
        throw ContractError("gradient accumulator shapes do not match tokens");

    Tensor pass = d_tokens;
    for (std::size_t cell : spec.masked) {
        const std::size_t row = cell + 1;
        float* src = pass.row(row);
        float* pos = d_pos_embed.row(row);
        for (std::size_t i = 0; i < dim; ++i) {
            d_mask_embedding[i] += src[i];
            pos[i] += src[i];
            src[i] = 0.0f;
        }
    }
    return pass;
}

}  // namespace mim
