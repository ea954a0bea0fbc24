#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "mim/tensor.h"

namespace mim {

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    std::size_t embed_dim = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    float mlp_ratio = 4.0f;

    void validate() const;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t patch_count() const { return grid() * grid(); }
    std::size_t token_count() const { return patch_count() + 1; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t head_dim() const { return embed_dim / heads; }
    std::size_t mlp_dim() const;
};

// Named reference configs: "vit-micro", "vit-mini", "vit-b16", "vit-l16".
ViTConfig vit_preset(std::string_view name);
const std::vector<std::string>& vit_preset_names();

// Truncated-normal weights (std 0.02, clipped at 2 sigma), zero biases, unit
// layer-norm scales. Layout:
//   patch_embed.{weight,bias}, cls_token, pos_embed, mask_token,
//   blocks.<i>.{ln1,ln2}.{weight,bias},
//   blocks.<i>.attn.{q,k,v,proj}.{weight,bias},
//   blocks.<i>.mlp.{fc1,fc2}.{weight,bias},
//   norm.{weight,bias}
ParamStore init_params(const ViTConfig& c, std::uint64_t seed);

// [H x W x C] image -> [M x patch_dim] rows in row-major grid order.
Tensor patchify(const Tensor& image, const ViTConfig& c);

// Patch projection + positional embeddings, CLS token at row 0.
TokenSequence embed(const Tensor& patches, const ParamStore& params, const ViTConfig& c);

// Accumulates patch_embed.*, cls_token, and pos_embed gradients from the
// gradient w.r.t. embed()'s output. Rows belonging to mask-substituted
// tokens must be zeroed by the caller first (their gradient flows to the
// mask embedding instead).
void embed_backward(const Tensor& d_embedded, const Tensor& patches, const ViTConfig& c,
                    Gradients& grads);

// Per-layer, per-head [(M+1) x (M+1)] post-softmax attention weights.
struct AttentionRecord {
    std::vector<std::vector<Tensor>> layers;
};

// Forward activations kept for the hand-derived backward pass.
struct BlockCache {
    Tensor x;                        // block input
    Tensor h1;                       // ln1 output
    std::vector<double> mu1, rstd1;  // ln1 row statistics
    Tensor q, k, v;
    std::vector<Tensor> attn;        // per-head softmax rows
    Tensor attn_concat;              // head outputs before the output projection
    Tensor x2;                       // attention residual sum
    Tensor h2;                       // ln2 output
    std::vector<double> mu2, rstd2;
    Tensor pre_act;                  // fc1 output before GELU
    Tensor act;                      // after GELU
};

struct VitActivations {
    std::vector<BlockCache> blocks;
    Tensor final_in;                 // input to the closing layer norm
    std::vector<double> mu_f, rstd_f;
};

// Pre-norm transformer encoder over one token sequence. Pass `acts` to keep
// what vit_backward needs, `attn` to capture attention weights; either may
// be null. Throws NumericError naming the block when activations go
// non-finite.
TokenSequence vit_forward(const TokenSequence& tokens, const ParamStore& params,
                          const ViTConfig& c, VitActivations* acts = nullptr,
                          AttentionRecord* attn = nullptr);

// Gradient w.r.t. the input tokens; parameter gradients are accumulated
// into `grads`.
Tensor vit_backward(const Tensor& d_out, const VitActivations& acts, const ParamStore& params,
                    const ViTConfig& c, Gradients& grads);

// CLS-query attention row at one layer, averaged over heads, CLS->CLS entry
// dropped, reshaped to [grid x grid].
Tensor cls_attention_map(const AttentionRecord& record, std::size_t layer, const ViTConfig& c);

}  // namespace mim
