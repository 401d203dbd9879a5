#include "pxc/model.hpp"

#include <cmath>
#include <random>

#include "pxc/errors.hpp"
#include "pxc/numerics.hpp"

namespace pxc {

ImageEncoderParams init_image_encoder(std::size_t patch, std::size_t channels,
                                      std::size_t d, std::mt19937_64& rng) {
  ImageEncoderParams p;
  p.patch = patch;
  p.channels = channels;
  const std::size_t fan_in = patch * patch * channels;
  p.weight = DenseGrid({fan_in, d});
  p.bias = DenseGrid({d});
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : p.weight.data) v = gauss(rng) * scale;
  for (double& v : p.bias.data) v = gauss(rng) * 0.1;
  return p;
}

ClassPromptBank init_prompt_bank(std::size_t k, std::size_t l, std::size_t d_e,
                                 std::size_t d, std::mt19937_64& rng) {
  ClassPromptBank b;
  b.tokens = DenseGrid({k, l, d_e});
  b.proj = DenseGrid({l * d_e, d});
  b.proj_bias = DenseGrid({d});
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (double& v : b.tokens.data) v = gauss(rng);
  const double scale = 1.0 / std::sqrt(static_cast<double>(l * d_e));
  for (double& v : b.proj.data) v = gauss(rng) * scale;
  return b;
}

DecoderParams init_decoder(std::size_t k, std::size_t upsample_factor) {
  DecoderParams p;
  p.kernel = DenseGrid({3, 3, k, k});
  p.bias = DenseGrid({k});
  p.upsample_factor = upsample_factor;
  // Center-tap identity start: logits begin as the similarity map itself.
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t idx = ((1 * 3 + 1) * k + c) * k + c;
    p.kernel.data[idx] = 1.0;
  }
  return p;
}

DenseGrid encode_image(const ImageEncoderParams& params,
                       const DenseGrid& image) {
  if (image.rank() != 3 || image.dim(2) != params.channels)
    throw ShapeMismatch("encode_image: need H x W x channels image");
  const std::size_t H = image.dim(0), W = image.dim(1), p = params.patch;
  if (p == 0 || H % p != 0 || W % p != 0)
    throw ShapeMismatch("encode_image: image extents must be divisible by patch");
  const std::size_t d = params.weight.dim(1);
  const std::size_t h = H / p, w = W / p;
  DenseGrid out({h, w, d});
  for (std::size_t gy = 0; gy < h; ++gy) {
    for (std::size_t gx = 0; gx < w; ++gx) {
      for (std::size_t o = 0; o < d; ++o) out(gy, gx, o) = params.bias.data[o];
      std::size_t q = 0;
      for (std::size_t py = 0; py < p; ++py) {
        for (std::size_t px = 0; px < p; ++px) {
          for (std::size_t c = 0; c < params.channels; ++c, ++q) {
            const double pix = image(gy * p + py, gx * p + px, c);
            const double* wrow = &params.weight.data[q * d];
            double* orow = &out.data[(gy * w + gx) * d];
            for (std::size_t o = 0; o < d; ++o) orow[o] += pix * wrow[o];
          }
        }
      }
    }
  }
  return out;
}

EncoderGrads encode_image_backward(const ImageEncoderParams& params,
                                   const DenseGrid& image,
                                   const DenseGrid& grad_features) {
  const std::size_t H = image.dim(0), W = image.dim(1), p = params.patch;
  const std::size_t d = params.weight.dim(1);
  const std::size_t h = H / p, w = W / p;
  if (grad_features.rank() != 3 || grad_features.dim(0) != h ||
      grad_features.dim(1) != w || grad_features.dim(2) != d)
    throw ShapeMismatch("encode_image_backward: gradient shape mismatch");
  EncoderGrads g;
  g.weight = DenseGrid(params.weight.shape);
  g.bias = DenseGrid(params.bias.shape);
  for (std::size_t gy = 0; gy < h; ++gy) {
    for (std::size_t gx = 0; gx < w; ++gx) {
      const double* grow = &grad_features.data[(gy * w + gx) * d];
      for (std::size_t o = 0; o < d; ++o) g.bias.data[o] += grow[o];
      std::size_t q = 0;
      for (std::size_t py = 0; py < p; ++py) {
        for (std::size_t px = 0; px < p; ++px) {
          for (std::size_t c = 0; c < params.channels; ++c, ++q) {
            const double pix = image(gy * p + py, gx * p + px, c);
            double* wrow = &g.weight.data[q * d];
            for (std::size_t o = 0; o < d; ++o) wrow[o] += pix * grow[o];
          }
        }
      }
    }
  }
  return g;
}

void momentum_update(const ImageEncoderParams& student,
                     MomentumEncoderParams& momentum, double gamma) {
  if (!student.weight.same_shape(momentum.weight) ||
      !student.bias.same_shape(momentum.bias))
    throw ShapeMismatch("momentum_update: parameter shapes differ");
  for (std::size_t i = 0; i < student.weight.numel(); ++i)
    momentum.weight.data[i] =
        gamma * momentum.weight.data[i] + (1.0 - gamma) * student.weight.data[i];
  for (std::size_t i = 0; i < student.bias.numel(); ++i)
    momentum.bias.data[i] =
        gamma * momentum.bias.data[i] + (1.0 - gamma) * student.bias.data[i];
}

DenseGrid encode_class_prompts(const ClassPromptBank& bank) {
  const std::size_t k = bank.tokens.dim(0);
  const std::size_t flat = bank.tokens.dim(1) * bank.tokens.dim(2);
  const std::size_t d = bank.proj.dim(1);
  DenseGrid out({k, d});
  std::vector<double> g(d);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t o = 0; o < d; ++o) g[o] = bank.proj_bias.data[o];
    const double* tok = &bank.tokens.data[j * flat];
    for (std::size_t q = 0; q < flat; ++q) {
      const double* prow = &bank.proj.data[q * d];
      for (std::size_t o = 0; o < d; ++o) g[o] += tok[q] * prow[o];
    }
    const std::vector<double> unit = l2_normalize(g);
    std::copy(unit.begin(), unit.end(), &out.data[j * d]);
  }
  return out;
}

DenseGrid encode_class_prompts_backward(const ClassPromptBank& bank,
                                        const DenseGrid& grad_class_features) {
  const std::size_t k = bank.tokens.dim(0);
  const std::size_t flat = bank.tokens.dim(1) * bank.tokens.dim(2);
  const std::size_t d = bank.proj.dim(1);
  if (grad_class_features.rank() != 2 || grad_class_features.dim(0) != k ||
      grad_class_features.dim(1) != d)
    throw ShapeMismatch("encode_class_prompts_backward: gradient shape mismatch");
  DenseGrid grad_tokens(bank.tokens.shape);
  std::vector<double> g(d), unit(d), dg(d);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t o = 0; o < d; ++o) g[o] = bank.proj_bias.data[o];
    const double* tok = &bank.tokens.data[j * flat];
    for (std::size_t q = 0; q < flat; ++q) {
      const double* prow = &bank.proj.data[q * d];
      for (std::size_t o = 0; o < d; ++o) g[o] += tok[q] * prow[o];
    }
    const double norm = l2_norm(g);
    if (!(norm > kEpsNorm))
      throw DegenerateVector("encode_class_prompts_backward: zero projection");
    for (std::size_t o = 0; o < d; ++o) unit[o] = g[o] / norm;

    // d normalize: (grad - unit * (unit . grad)) / |g|
    const double* up = &grad_class_features.data[j * d];
    double along = 0.0;
    for (std::size_t o = 0; o < d; ++o) along += unit[o] * up[o];
    for (std::size_t o = 0; o < d; ++o)
      dg[o] = (up[o] - unit[o] * along) / norm;

    double* trow = &grad_tokens.data[j * flat];
    for (std::size_t q = 0; q < flat; ++q) {
      const double* prow = &bank.proj.data[q * d];
      double acc = 0.0;
      for (std::size_t o = 0; o < d; ++o) acc += prow[o] * dg[o];
      trow[q] = acc;
    }
  }
  return grad_tokens;
}

DenseGrid mask_pool_weights(const Mask& mask, std::size_t h, std::size_t w) {
  DenseGrid g({mask.h, mask.w});
  for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] = mask.v[i] ? 1.0 : 0.0;
  return area_downsample(g, h, w);
}

DenseGrid mask_pool(const DenseGrid& features, const MaskSet& masks) {
  if (features.rank() != 3) throw ShapeMismatch("mask_pool: need h x w x d");
  const std::size_t h = features.dim(0), w = features.dim(1),
                    d = features.dim(2);
  DenseGrid out({masks.size(), d});
  for (std::size_t n = 0; n < masks.size(); ++n) {
    const DenseGrid wts = mask_pool_weights(masks[n], h, w);
    double wsum = 0.0;
    for (double v : wts.data) wsum += v;
    if (wsum < 1e-9) throw EmptyMaskAtFeatureScale(n);
    double* orow = &out.data[n * d];
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double wt = wts(y, x);
        if (wt == 0.0) continue;
        const double* frow = &features.data[(y * w + x) * d];
        for (std::size_t o = 0; o < d; ++o) orow[o] += wt * frow[o];
      }
    }
    for (std::size_t o = 0; o < d; ++o) orow[o] /= wsum;
  }
  return out;
}

DenseGrid similarity_map(const DenseGrid& features,
                         const DenseGrid& references) {
  if (features.rank() != 3 || references.rank() != 2 ||
      features.dim(2) != references.dim(1))
    throw ShapeMismatch("similarity_map: feature dim mismatch");
  const std::size_t h = features.dim(0), w = features.dim(1),
                    d = features.dim(2);
  const std::size_t c = references.dim(0);
  DenseGrid out({h, w, c});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::span<const double> f(&features.data[(y * w + x) * d], d);
      for (std::size_t i = 0; i < c; ++i) {
        std::span<const double> r(&references.data[i * d], d);
        out(y, x, i) = cosine_similarity(f, r);
      }
    }
  }
  return out;
}

SimilarityGrads similarity_map_backward(const DenseGrid& features,
                                        const DenseGrid& references,
                                        const DenseGrid& grad_map) {
  const std::size_t h = features.dim(0), w = features.dim(1),
                    d = features.dim(2);
  const std::size_t c = references.dim(0);
  if (grad_map.rank() != 3 || grad_map.dim(0) != h || grad_map.dim(1) != w ||
      grad_map.dim(2) != c)
    throw ShapeMismatch("similarity_map_backward: gradient shape mismatch");
  SimilarityGrads g;
  g.features = DenseGrid(features.shape);
  g.references = DenseGrid(references.shape);

  std::vector<double> ref_norm(c), ref_unit(c * d);
  for (std::size_t i = 0; i < c; ++i) {
    std::span<const double> r(&references.data[i * d], d);
    ref_norm[i] = l2_norm(r);
    if (!(ref_norm[i] > kEpsNorm))
      throw DegenerateVector("similarity_map_backward: zero reference");
    for (std::size_t o = 0; o < d; ++o)
      ref_unit[i * d + o] = r[o] / ref_norm[i];
  }

  std::vector<double> f_unit(d);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::span<const double> f(&features.data[(y * w + x) * d], d);
      const double fn = l2_norm(f);
      if (!(fn > kEpsNorm))
        throw DegenerateVector("similarity_map_backward: zero feature cell");
      for (std::size_t o = 0; o < d; ++o) f_unit[o] = f[o] / fn;
      double* gf = &g.features.data[(y * w + x) * d];
      for (std::size_t i = 0; i < c; ++i) {
        const double up = grad_map(y, x, i);
        if (up == 0.0) continue;
        const double* ru = &ref_unit[i * d];
        double cosv = 0.0;
        for (std::size_t o = 0; o < d; ++o) cosv += f_unit[o] * ru[o];
        // d cos / d f = (ref_unit - cos * f_unit) / |f|
        for (std::size_t o = 0; o < d; ++o)
          gf[o] += up * (ru[o] - cosv * f_unit[o]) / fn;
        // d cos / d ref = (f_unit - cos * ref_unit) / |ref|
        double* gr = &g.references.data[i * d];
        for (std::size_t o = 0; o < d; ++o)
          gr[o] += up * (f_unit[o] - cosv * ru[o]) / ref_norm[i];
      }
    }
  }
  return g;
}

namespace {

DenseGrid conv3x3(const DenseGrid& in, const DenseGrid& kernel,
                  const DenseGrid& bias) {
  const std::size_t h = in.dim(0), w = in.dim(1), ci = in.dim(2);
  const std::size_t co = kernel.dim(3);
  DenseGrid out({h, w, co});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t o = 0; o < co; ++o) out(y, x, o) = bias.data[o];
      for (std::size_t dy = 0; dy < 3; ++dy) {
        const long sy = static_cast<long>(y) + static_cast<long>(dy) - 1;
        if (sy < 0 || sy >= static_cast<long>(h)) continue;
        for (std::size_t dx = 0; dx < 3; ++dx) {
          const long sx = static_cast<long>(x) + static_cast<long>(dx) - 1;
          if (sx < 0 || sx >= static_cast<long>(w)) continue;
          const double* irow =
              &in.data[(static_cast<std::size_t>(sy) * w +
                        static_cast<std::size_t>(sx)) * ci];
          for (std::size_t i = 0; i < ci; ++i) {
            const double iv = irow[i];
            if (iv == 0.0) continue;
            const double* krow = &kernel.data[((dy * 3 + dx) * ci + i) * co];
            double* orow = &out.data[(y * w + x) * co];
            for (std::size_t o = 0; o < co; ++o) orow[o] += iv * krow[o];
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

DenseGrid decode(const DecoderParams& params, const DenseGrid& simmap) {
  if (simmap.rank() != 3) throw ShapeMismatch("decode: need h x w x k");
  if (simmap.dim(2) != params.kernel.dim(2))
    throw ShapeMismatch("decode: channel count does not match decoder");
  const DenseGrid mixed = conv3x3(simmap, params.kernel, params.bias);
  return bilinear_upsample(mixed, params.upsample_factor);
}

DecoderGrads decode_backward(const DecoderParams& params,
                             const DenseGrid& simmap,
                             const DenseGrid& grad_logits) {
  const std::size_t h = simmap.dim(0), w = simmap.dim(1), k = simmap.dim(2);
  const DenseGrid grad_mixed = bilinear_upsample_backward(
      grad_logits, h, w, params.upsample_factor);
  DecoderGrads g;
  g.kernel = DenseGrid(params.kernel.shape);
  g.bias = DenseGrid(params.bias.shape);
  g.input = DenseGrid(simmap.shape);
  const std::size_t co = params.kernel.dim(3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double* grow = &grad_mixed.data[(y * w + x) * co];
      for (std::size_t o = 0; o < co; ++o) g.bias.data[o] += grow[o];
      for (std::size_t dy = 0; dy < 3; ++dy) {
        const long sy = static_cast<long>(y) + static_cast<long>(dy) - 1;
        if (sy < 0 || sy >= static_cast<long>(h)) continue;
        for (std::size_t dx = 0; dx < 3; ++dx) {
          const long sx = static_cast<long>(x) + static_cast<long>(dx) - 1;
          if (sx < 0 || sx >= static_cast<long>(w)) continue;
          const std::size_t src =
              (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) *
              k;
          for (std::size_t i = 0; i < k; ++i) {
            const double iv = simmap.data[src + i];
            const double* krow = &params.kernel.data[((dy * 3 + dx) * k + i) * co];
            double* gkrow = &g.kernel.data[((dy * 3 + dx) * k + i) * co];
            double acc = 0.0;
            for (std::size_t o = 0; o < co; ++o) {
              gkrow[o] += iv * grow[o];
              acc += krow[o] * grow[o];
            }
            g.input.data[src + i] += acc;
          }
        }
      }
    }
  }
  return g;
}

}  // namespace pxc
