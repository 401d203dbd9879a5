#include "pxc/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pxc/errors.hpp"
#include "pxc/numerics.hpp"

namespace pxc {

namespace {

AdamSlot make_slot(const DenseGrid& param) {
  return AdamSlot{DenseGrid(param.shape), DenseGrid(param.shape)};
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

double grid_norm(const DenseGrid& g) {
  double acc = 0.0;
  for (double v : g.data) acc += v * v;
  return acc;
}

}  // namespace

TrainState init_train_state(const TrainConfig& config) {
  TrainState s;
  s.config = config;
  std::mt19937_64 rng = substream(config.seed, stream::kInit);
  s.student = init_image_encoder(config.patch, config.channels, config.d, rng);
  s.momentum = s.student;
  s.prompts = init_prompt_bank(config.k, config.l, config.d_e, config.d, rng);
  s.decoder = init_decoder(config.k, config.decoder_upsample);
  s.opt.enc_weight = make_slot(s.student.weight);
  s.opt.enc_bias = make_slot(s.student.bias);
  s.opt.tokens = make_slot(s.prompts.tokens);
  s.opt.kernel = make_slot(s.decoder.kernel);
  s.opt.dec_bias = make_slot(s.decoder.bias);
  s.step = 0;
  return s;
}

std::pair<double, DenseGrid> bce_mask_loss(const DenseGrid& logits,
                                           const TargetMaskStack& targets,
                                           bool cover_only,
                                           bool supervise_empty,
                                           double scale) {
  if (logits.rank() != 3) throw ShapeMismatch("bce_mask_loss: need h x w x k");
  const std::size_t h = logits.dim(0), w = logits.dim(1), k = logits.dim(2);
  if (targets.unions.size() != k)
    throw ShapeMismatch("bce_mask_loss: target channel count mismatch");
  if (targets.coverage.h != h || targets.coverage.w != w)
    throw ShapeMismatch("bce_mask_loss: coverage resolution mismatch");
  if (!(scale > 0.0)) throw ConfigError("bce_mask_loss: scale must be > 0");

  std::vector<std::uint8_t> channel_on(k, 1);
  if (!supervise_empty)
    for (std::size_t c = 0; c < k; ++c)
      channel_on[c] = targets.unions[c].any() ? 1 : 0;

  DenseGrid grad(logits.shape);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < k; ++c) {
    if (!channel_on[c]) continue;
    const Mask& tgt = targets.unions[c];
    if (tgt.h != h || tgt.w != w)
      throw ShapeMismatch("bce_mask_loss: target resolution mismatch");
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (cover_only && !targets.coverage.at(y, x)) continue;
        const double t = tgt.at(y, x) ? 1.0 : 0.0;
        const double a = scale * logits(y, x, c);
        total += t * softplus(-a) + (1.0 - t) * softplus(a);
        grad(y, x, c) = scale * (sigmoid(a) - t);
        ++count;
      }
    }
  }
  if (count == 0)
    throw NoSupervisedPixels("bce_mask_loss: no supervised entries remain");
  const double inv = 1.0 / static_cast<double>(count);
  for (double& g : grad.data) g *= inv;
  return {total * inv, std::move(grad)};
}

void adamw_step(DenseGrid& param, const DenseGrid& grad, DenseGrid& m,
                DenseGrid& v, double lr, double weight_decay, double beta1,
                double beta2, double eps, std::size_t step) {
  if (!param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v))
    throw ShapeMismatch("adamw_step: shape mismatch");
  if (step < 1) throw ConfigError("adamw_step: step counts from 1");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.numel(); ++i) {
    param.data[i] -= lr * weight_decay * param.data[i];
    m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * grad.data[i];
    v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * grad.data[i] * grad.data[i];
    const double mhat = m.data[i] / bc1;
    const double vhat = v.data[i] / bc2;
    param.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

DenseGrid cutout_augment(const DenseGrid& image, std::mt19937_64& rng,
                         std::size_t n_holes, double hole_frac) {
  if (image.rank() != 3) throw ShapeMismatch("cutout_augment: need H x W x C");
  DenseGrid out = image;
  if (n_holes == 0) return out;
  if (!(hole_frac > 0.0) || hole_frac > 1.0)
    throw ConfigError("cutout_augment: hole_frac must be in (0, 1]");
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  const std::size_t side = std::min(
      std::min(H, W),
      static_cast<std::size_t>(std::max(
          1.0, std::round(hole_frac * static_cast<double>(std::min(H, W))))));

  std::vector<double> mean(C, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) mean[c] += image(y, x, c);
  for (std::size_t c = 0; c < C; ++c)
    mean[c] /= static_cast<double>(H * W);

  std::uniform_int_distribution<std::size_t> py(0, H - side);
  std::uniform_int_distribution<std::size_t> px(0, W - side);
  for (std::size_t hole = 0; hole < n_holes; ++hole) {
    const std::size_t y0 = py(rng), x0 = px(rng);
    for (std::size_t y = y0; y < y0 + side; ++y)
      for (std::size_t x = x0; x < x0 + side; ++x)
        for (std::size_t c = 0; c < C; ++c) out(y, x, c) = mean[c];
  }
  return out;
}

DenseGrid color_jitter(const DenseGrid& image, std::mt19937_64& rng,
                       double max_scale, double max_shift) {
  if (image.rank() != 3) throw ShapeMismatch("color_jitter: need H x W x C");
  if (max_scale < 0.0 || max_shift < 0.0)
    throw ConfigError("color_jitter: ranges must be >= 0");
  const std::size_t C = image.dim(2);
  std::vector<double> a(C), b(C);
  for (std::size_t c = 0; c < C; ++c) {
    std::uniform_real_distribution<double> us(1.0 - max_scale, 1.0 + max_scale);
    std::uniform_real_distribution<double> ub(-max_shift, max_shift);
    a[c] = us(rng);
    b[c] = ub(rng);
  }
  DenseGrid out = image;
  const std::size_t hw = image.dim(0) * image.dim(1);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < C; ++c) {
      double v = a[c] * out.data[p * C + c] + b[c];
      out.data[p * C + c] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

StepContext build_step_context(const TrainState& state,
                               const std::vector<BatchItem>& batch,
                               const TrainConfig& config) {
  if (batch.empty()) throw ShapeMismatch("build_step_context: empty batch");
  const ImageEncoderParams& pool_encoder =
      config.use_momentum_encoder ? state.momentum : state.student;

  // Mask features from the clean images, plus which masks survived the soft
  // downsampling to feature scale.
  std::vector<std::vector<double>> rows;
  std::vector<MaskSet> kept_masks(batch.size());
  std::vector<std::vector<std::size_t>> row_of_item(batch.size());
  std::size_t img_h = 0, img_w = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const DenseGrid& img = *batch[b].image;
    if (b == 0) {
      img_h = img.dim(0);
      img_w = img.dim(1);
    } else if (img.dim(0) != img_h || img.dim(1) != img_w) {
      throw ShapeMismatch("build_step_context: mixed image sizes in batch");
    }
    const DenseGrid feat = encode_image(pool_encoder, img);
    const std::size_t h = feat.dim(0), w = feat.dim(1), d = feat.dim(2);
    for (const Mask& mk : *batch[b].masks) {
      const DenseGrid wts = mask_pool_weights(mk, h, w);
      double wsum = 0.0;
      for (double v : wts.data) wsum += v;
      if (wsum < 1e-9) continue;  // dropped for this batch
      std::vector<double> row(d, 0.0);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double wt = wts(y, x);
          if (wt == 0.0) continue;
          const double* frow = &feat.data[(y * w + x) * d];
          for (std::size_t o = 0; o < d; ++o) row[o] += wt * frow[o];
        }
      }
      for (double& v : row) v /= wsum;
      row_of_item[b].push_back(rows.size());
      rows.push_back(std::move(row));
      kept_masks[b].push_back(mk);
    }
  }
  const std::size_t m = rows.size();
  if (m == 0)
    throw NoSupervisedPixels("build_step_context: no usable masks in batch");

  DenseGrid mask_features({m, config.d});
  for (std::size_t i = 0; i < m; ++i)
    std::copy(rows[i].begin(), rows[i].end(),
              &mask_features.data[i * config.d]);

  StepContext ctx;
  const std::size_t loss_h = (img_h / config.patch) * config.decoder_upsample;
  const std::size_t loss_w = (img_w / config.patch) * config.decoder_upsample;

  std::size_t channel_count = 0;
  std::vector<std::size_t> assignment(m);
  if (config.use_clustering) {
    const DenseGrid class_features = encode_class_prompts(state.prompts);
    const DenseGrid affinity =
        class_mask_affinity(mask_features, class_features);
    const AssignmentMatrix plan =
        sinkhorn_solve(affinity, config.epsilon, config.sinkhorn_tol,
                       config.sinkhorn_max_iter);
    const HardAssignment hard = hard_assign(plan);
    assignment = hard.cluster_of;
    channel_count = config.k;
    ctx.refs_from_prompts = true;
    ctx.sinkhorn_marginal_error = plan.marginal_error;
    double acc = 0.0;
    for (double v : affinity.data) acc += v;
    ctx.mean_affinity = acc / static_cast<double>(affinity.numel());
    ctx.cluster_usage.assign(config.k, 0);
    for (std::size_t c : assignment) ctx.cluster_usage[c] += 1;
  } else {
    // Per-mask supervision: every mask is its own channel, references are the
    // detached pooled features themselves.
    for (std::size_t i = 0; i < m; ++i) assignment[i] = i;
    channel_count = m;
    ctx.refs_from_prompts = false;
    ctx.fixed_references = mask_features;
    ctx.cluster_usage.assign(m, 1);
  }

  for (std::size_t b = 0; b < batch.size(); ++b) {
    TargetMaskStack stack;
    if (kept_masks[b].empty()) {
      stack.unions.assign(channel_count, Mask(img_h, img_w));
      stack.coverage = Mask(img_h, img_w);
    } else {
      HardAssignment local;
      for (std::size_t r : row_of_item[b])
        local.cluster_of.push_back(assignment[r]);
      stack = union_masks(kept_masks[b], local, channel_count);
    }
    TargetMaskStack down;
    down.unions.reserve(channel_count);
    for (const Mask& u : stack.unions)
      down.unions.push_back(threshold_downsample(u, loss_h, loss_w));
    down.coverage = threshold_downsample(stack.coverage, loss_h, loss_w);
    ctx.targets.push_back(std::move(down));
  }

  // The student sees jitter + cutout; pooling above used the clean image.
  std::mt19937_64 aug = substream(config.seed, stream::kAugment, state.step);
  for (const BatchItem& item : batch) {
    DenseGrid img = color_jitter(*item.image, aug, config.augment.jitter_scale,
                                 config.augment.jitter_shift);
    img = cutout_augment(img, aug, config.augment.cutout_holes,
                         config.augment.cutout_frac);
    ctx.images.push_back(std::move(img));
  }
  return ctx;
}

double step_loss(const TrainState& state, const StepContext& ctx,
                 const TrainConfig& config) {
  const DenseGrid refs = ctx.refs_from_prompts
                             ? encode_class_prompts(state.prompts)
                             : ctx.fixed_references;
  double total = 0.0;
  for (std::size_t b = 0; b < ctx.images.size(); ++b) {
    const DenseGrid feat = encode_image(state.student, ctx.images[b]);
    const DenseGrid simmap = similarity_map(feat, refs);
    const DenseGrid logits =
        ctx.refs_from_prompts
            ? decode(state.decoder, simmap)
            : bilinear_upsample(simmap, config.decoder_upsample);
    total += bce_mask_loss(logits, ctx.targets[b], config.cover_only,
                           config.supervise_empty, config.logit_scale)
                 .first;
  }
  return total / static_cast<double>(ctx.images.size());
}

ParamGrads step_loss_backward(const TrainState& state, const StepContext& ctx,
                              const TrainConfig& config, double* loss_out) {
  const DenseGrid refs = ctx.refs_from_prompts
                             ? encode_class_prompts(state.prompts)
                             : ctx.fixed_references;
  ParamGrads g;
  g.enc_weight = DenseGrid(state.student.weight.shape);
  g.enc_bias = DenseGrid(state.student.bias.shape);
  g.tokens = DenseGrid(state.prompts.tokens.shape);
  g.kernel = DenseGrid(state.decoder.kernel.shape);
  g.dec_bias = DenseGrid(state.decoder.bias.shape);
  DenseGrid grad_refs(refs.shape);

  const double inv_b = 1.0 / static_cast<double>(ctx.images.size());
  double total = 0.0;
  for (std::size_t b = 0; b < ctx.images.size(); ++b) {
    const DenseGrid feat = encode_image(state.student, ctx.images[b]);
    const DenseGrid simmap = similarity_map(feat, refs);
    DenseGrid logits;
    if (ctx.refs_from_prompts) {
      logits = decode(state.decoder, simmap);
    } else {
      logits = bilinear_upsample(simmap, config.decoder_upsample);
    }
    auto [loss_b, grad_logits] =
        bce_mask_loss(logits, ctx.targets[b], config.cover_only,
                      config.supervise_empty, config.logit_scale);
    total += loss_b;
    for (double& v : grad_logits.data) v *= inv_b;

    DenseGrid grad_simmap;
    if (ctx.refs_from_prompts) {
      DecoderGrads dg = decode_backward(state.decoder, simmap, grad_logits);
      for (std::size_t i = 0; i < g.kernel.numel(); ++i)
        g.kernel.data[i] += dg.kernel.data[i];
      for (std::size_t i = 0; i < g.dec_bias.numel(); ++i)
        g.dec_bias.data[i] += dg.bias.data[i];
      grad_simmap = std::move(dg.input);
    } else {
      grad_simmap = bilinear_upsample_backward(
          grad_logits, simmap.dim(0), simmap.dim(1), config.decoder_upsample);
    }

    SimilarityGrads sg = similarity_map_backward(feat, refs, grad_simmap);
    if (ctx.refs_from_prompts)
      for (std::size_t i = 0; i < grad_refs.numel(); ++i)
        grad_refs.data[i] += sg.references.data[i];

    EncoderGrads eg =
        encode_image_backward(state.student, ctx.images[b], sg.features);
    for (std::size_t i = 0; i < g.enc_weight.numel(); ++i)
      g.enc_weight.data[i] += eg.weight.data[i];
    for (std::size_t i = 0; i < g.enc_bias.numel(); ++i)
      g.enc_bias.data[i] += eg.bias.data[i];
  }

  if (ctx.refs_from_prompts)
    g.tokens = encode_class_prompts_backward(state.prompts, grad_refs);

  if (loss_out) *loss_out = total * inv_b;
  return g;
}

StepMetrics train_step(TrainState& state, const std::vector<BatchItem>& batch,
                       const TrainConfig& config) {
  StepContext ctx = build_step_context(state, batch, config);
  double loss = 0.0;
  ParamGrads g = step_loss_backward(state, ctx, config, &loss);
  if (!std::isfinite(loss)) throw NonFiniteLoss("train_step: non-finite loss");

  const std::size_t t = state.step + 1;
  adamw_step(state.student.weight, g.enc_weight, state.opt.enc_weight.m,
             state.opt.enc_weight.v, config.lr_encoder, config.weight_decay,
             config.adam_beta1, config.adam_beta2, config.adam_eps, t);
  adamw_step(state.student.bias, g.enc_bias, state.opt.enc_bias.m,
             state.opt.enc_bias.v, config.lr_encoder, config.weight_decay,
             config.adam_beta1, config.adam_beta2, config.adam_eps, t);
  adamw_step(state.prompts.tokens, g.tokens, state.opt.tokens.m,
             state.opt.tokens.v, config.lr_prompts, config.weight_decay,
             config.adam_beta1, config.adam_beta2, config.adam_eps, t);
  adamw_step(state.decoder.kernel, g.kernel, state.opt.kernel.m,
             state.opt.kernel.v, config.lr_decoder, config.weight_decay,
             config.adam_beta1, config.adam_beta2, config.adam_eps, t);
  adamw_step(state.decoder.bias, g.dec_bias, state.opt.dec_bias.m,
             state.opt.dec_bias.v, config.lr_decoder, config.weight_decay,
             config.adam_beta1, config.adam_beta2, config.adam_eps, t);

  momentum_update(state.student, state.momentum, config.gamma);
  state.step = t;

  StepMetrics mt;
  mt.step = state.step;
  mt.loss = loss;
  mt.sinkhorn_marginal_error = ctx.sinkhorn_marginal_error;
  mt.mean_affinity = ctx.mean_affinity;
  mt.cluster_usage = ctx.cluster_usage;
  mt.grad_norm_encoder =
      std::sqrt(grid_norm(g.enc_weight) + grid_norm(g.enc_bias));
  mt.grad_norm_prompts = std::sqrt(grid_norm(g.tokens));
  mt.grad_norm_decoder = std::sqrt(grid_norm(g.kernel) + grid_norm(g.dec_bias));
  return mt;
}

std::vector<StepMetrics> fit(TrainState& state,
                             const std::vector<BatchItem>& dataset,
                             const TrainConfig& config,
                             const MetricsSink& on_metrics,
                             const CheckpointSink& on_checkpoint) {
  if (dataset.empty()) throw ShapeMismatch("fit: empty dataset");
  const std::size_t n = dataset.size();
  const std::size_t bs = std::min(config.batch_size == 0 ? 1 : config.batch_size, n);
  const std::size_t steps_per_epoch = n / bs;

  std::vector<StepMetrics> log;
  for (std::size_t s = state.step; s < config.steps; ++s) {
    const std::size_t epoch = s / steps_per_epoch;
    const std::size_t pos = s % steps_per_epoch;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng = substream(config.seed, stream::kShuffle, epoch);
    std::shuffle(perm.begin(), perm.end(), rng);

    std::vector<BatchItem> batch;
    batch.reserve(bs);
    for (std::size_t i = 0; i < bs; ++i)
      batch.push_back(dataset[perm[pos * bs + i]]);

    StepMetrics mt = train_step(state, batch, config);
    if (on_metrics) on_metrics(mt);
    log.push_back(std::move(mt));
    if (on_checkpoint && config.checkpoint_every > 0 &&
        state.step % config.checkpoint_every == 0 &&
        state.step != config.steps)
      on_checkpoint(state, state.step);
  }
  if (on_checkpoint) on_checkpoint(state, state.step);
  return log;
}

}  // namespace pxc
