#pragma once

#include <cstddef>
#include <vector>

#include "pxc/grid.hpp"
#include "pxc/rng.hpp"

namespace pxc {

// Toy differentiable stand-ins for a vision-language backbone: a linear
// patch-embedding image encoder, a frozen projection turning learnable class
// tokens into unit class features, and a conv + upsample decoder.

struct ImageEncoderParams {
  std::size_t patch = 8;
  std::size_t channels = 3;
  DenseGrid weight;  // (patch*patch*channels) x d
  DenseGrid bias;    // d
};

// Shape-identical slow copy of the student encoder.
using MomentumEncoderParams = ImageEncoderParams;

struct ClassPromptBank {
  DenseGrid tokens;     // k x l x d_e, learnable
  DenseGrid proj;       // (l*d_e) x d, frozen after construction
  DenseGrid proj_bias;  // d, frozen after construction
};

struct DecoderParams {
  DenseGrid kernel;  // 3 x 3 x k x k, same-padded
  DenseGrid bias;    // k
  std::size_t upsample_factor = 4;
};

ImageEncoderParams init_image_encoder(std::size_t patch, std::size_t channels,
                                      std::size_t d, std::mt19937_64& rng);
ClassPromptBank init_prompt_bank(std::size_t k, std::size_t l, std::size_t d_e,
                                 std::size_t d, std::mt19937_64& rng);
DecoderParams init_decoder(std::size_t k, std::size_t upsample_factor);

// Linear patch embedding: each (H/p) x (W/p) cell is weight^T . patch + bias.
DenseGrid encode_image(const ImageEncoderParams& params,
                       const DenseGrid& image);

// Gradients of a scalar loss w.r.t. encoder weight and bias given the
// upstream gradient on the feature map.
struct EncoderGrads {
  DenseGrid weight;
  DenseGrid bias;
};
EncoderGrads encode_image_backward(const ImageEncoderParams& params,
                                   const DenseGrid& image,
                                   const DenseGrid& grad_features);

// theta' <- gamma * theta' + (1 - gamma) * theta, element-wise.
void momentum_update(const ImageEncoderParams& student,
                     MomentumEncoderParams& momentum, double gamma);

// Unit-norm class features: row j = normalize(proj^T . flatten(tokens[j]) +
// proj_bias). Only the tokens are differentiable.
DenseGrid encode_class_prompts(const ClassPromptBank& bank);

// Token gradient given the upstream gradient on the class features.
DenseGrid encode_class_prompts_backward(const ClassPromptBank& bank,
                                        const DenseGrid& grad_class_features);

// Soft mask weights at feature scale: the exact covered-area fraction of
// each feature cell. Values in [0, 1].
DenseGrid mask_pool_weights(const Mask& mask, std::size_t h, std::size_t w);

// Area-weighted average of the feature map under each mask. Throws
// EmptyMaskAtFeatureScale (carrying the mask index) if a mask's weight sum
// falls below 1e-9.
DenseGrid mask_pool(const DenseGrid& features, const MaskSet& masks);

// Cosine similarity of every feature cell against every reference row.
DenseGrid similarity_map(const DenseGrid& features,
                         const DenseGrid& references);

struct SimilarityGrads {
  DenseGrid features;
  DenseGrid references;
};
SimilarityGrads similarity_map_backward(const DenseGrid& features,
                                        const DenseGrid& references,
                                        const DenseGrid& grad_map);

// Same-padded 3x3 convolution over the k channels, then bilinear upsample.
DenseGrid decode(const DecoderParams& params, const DenseGrid& simmap);

struct DecoderGrads {
  DenseGrid kernel;
  DenseGrid bias;
  DenseGrid input;
};
DecoderGrads decode_backward(const DecoderParams& params,
                             const DenseGrid& simmap,
                             const DenseGrid& grad_logits);

}  // namespace pxc
