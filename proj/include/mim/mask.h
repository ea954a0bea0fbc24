#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mim/tensor.h"

namespace mim {

// One rectangle from the mask generator's log, in grid cells.
struct MaskBlock {
    std::size_t top = 0, left = 0, height = 0, width = 0;
    std::size_t area() const { return height * width; }
};

// A set of masked patch positions over a grid_h x grid_w patch grid.
// Flat indices are row-major over the grid and never include the CLS slot;
// token row for cell i is i + 1. The block log and trim list allow the
// masked set to be reconstructed as (union of blocks) minus the trimmed
// cells of the final block.
struct MaskSpec {
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::vector<std::size_t> masked;   // sorted, unique
    std::uint64_t seed = 0;
    std::vector<MaskBlock> blocks;
    std::vector<std::size_t> trimmed;  // cells dropped from the last block

    std::size_t cell_count() const { return grid_h * grid_w; }
    bool contains(std::size_t index) const;
};

// Unions random rectangles until at least target_count cells are covered,
// then trims uniformly chosen surplus cells that only the last block
// contributed, so the result has exactly target_count cells. Deterministic
// per seed. Throws RangeError when target_count exceeds the grid and
// ContractError on an empty grid.
MaskSpec blockwise_mask(std::size_t grid_h, std::size_t grid_w, std::size_t target_count,
                        std::uint64_t seed, std::size_t min_block = 4);

// Uniform per-cell baseline with the same exact-count contract.
MaskSpec random_mask(std::size_t grid_h, std::size_t grid_w, std::size_t target_count,
                     std::uint64_t seed);

// Replaces each masked token row with mask_embedding plus that row's
// positional embedding. CLS and unmasked rows are copied bit-for-bit.
TokenSequence apply_mask(const TokenSequence& tokens, const MaskSpec& spec,
                         const Tensor& mask_embedding, const Tensor& pos_embed);

// Reverse of apply_mask for the gradient: accumulates masked rows of
// d_tokens into d_mask_embedding and the matching rows of d_pos_embed,
// and returns d_tokens with those rows zeroed (the share flowing back
// into the uncorrupted embedding).
Tensor apply_mask_backward(const Tensor& d_tokens, const MaskSpec& spec,
                           Tensor& d_mask_embedding, Tensor& d_pos_embed);

}  // namespace mim
