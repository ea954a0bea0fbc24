#pragma once

#include <cstddef>
#include <cstdint>

#include "mim/mask.h"
#include "mim/tensor.h"

namespace mim {

// Adds the prediction head (head.weight: teacher_dim x embed_dim, head.bias:
// teacher_dim) to an existing parameter store, initialized the same way as
// the backbone weights.
void add_head(ParamStore& params, std::size_t embed_dim, std::size_t teacher_dim,
              std::uint64_t seed);

// Applies the head's affine map to every token row, CLS included.
TokenSequence predict(const TokenSequence& features, const ParamStore& params);

// Backward of predict: accumulates head.weight / head.bias gradients and
// returns the gradient w.r.t. the backbone features.
Tensor predict_backward(const Tensor& d_prediction, const TokenSequence& features,
                        const ParamStore& params, Gradients& grads);

// Negative mean cosine between matching rows of the student prediction F and
// the frozen teacher features G, averaged over all tokens. In [-1, 1].
double mvp_loss(const Tensor& F, const Tensor& G);

// Same value as mvp_loss; additionally writes dL/dF. G receives no gradient.
double mvp_loss_backward(const Tensor& F, const Tensor& G, Tensor& dF);

// Variant averaging over CLS plus the masked tokens only.
double masked_only_loss(const Tensor& F, const Tensor& G, const MaskSpec& spec);
double masked_only_loss_backward(const Tensor& F, const Tensor& G, const MaskSpec& spec,
                                 Tensor& dF);

}  // namespace mim
