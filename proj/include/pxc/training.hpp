#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pxc/clustering.hpp"
#include "pxc/grid.hpp"
#include "pxc/model.hpp"
#include "pxc/rng.hpp"

namespace pxc {

struct AugmentConfig {
  std::size_t cutout_holes = 1;
  double cutout_frac = 0.25;
  double jitter_scale = 0.2;
  double jitter_shift = 0.1;
};

struct TrainConfig {
  // Model dimensions.
  std::size_t k = 64;
  std::size_t l = 4;
  std::size_t d = 16;
  std::size_t d_e = 8;
  std::size_t patch = 8;
  std::size_t channels = 3;
  std::size_t decoder_upsample = 4;

  // Optimization.
  double epsilon = 1.0;
  double gamma = 0.999;
  double logit_scale = 10.0;
  double lr_decoder = 2e-4;
  double lr_prompts = 2e-5;
  double lr_encoder = 2e-6;
  double weight_decay = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t steps = 500;

  // Sinkhorn stopping rule.
  double sinkhorn_tol = 1e-6;
  int sinkhorn_max_iter = 1000;

  // Ablation and supervision switches.
  bool use_clustering = true;
  bool use_momentum_encoder = true;
  bool supervise_empty = true;
  bool cover_only = true;

  AugmentConfig augment;

  std::size_t checkpoint_every = 100;
  std::size_t log_every = 10;
  Seed seed = 7;
};

struct AdamSlot {
  DenseGrid m;
  DenseGrid v;
};

struct OptimizerState {
  AdamSlot enc_weight, enc_bias, tokens, kernel, dec_bias;
};

// All learnable parameters, the slow momentum copy, optimizer moments and
// the step counter, plus the config the run was built with.
struct TrainState {
  ImageEncoderParams student;
  MomentumEncoderParams momentum;
  ClassPromptBank prompts;
  DecoderParams decoder;
  OptimizerState opt;
  std::size_t step = 0;
  TrainConfig config;
};

TrainState init_train_state(const TrainConfig& config);

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double sinkhorn_marginal_error = 0.0;
  double mean_affinity = 0.0;
  std::vector<std::size_t> cluster_usage;
  double grad_norm_encoder = 0.0;
  double grad_norm_prompts = 0.0;
  double grad_norm_decoder = 0.0;
};

// One training example: image plus its unlabeled masks. Non-owning.
struct BatchItem {
  const DenseGrid* image = nullptr;
  const MaskSet* masks = nullptr;
};

// Per-pixel, per-channel binary cross-entropy on sigmoid(scale * logit)
// against binary targets, averaged over supervised entries. Targets and
// coverage must already be at logits resolution. cover_only drops pixels
// outside the coverage map; with supervise_empty off, all-zero target
// channels are skipped. Returns the loss and d loss / d logits.
std::pair<double, DenseGrid> bce_mask_loss(const DenseGrid& logits,
                                           const TargetMaskStack& targets,
                                           bool cover_only,
                                           bool supervise_empty, double scale);

// AdamW with decoupled weight decay (applied before the adaptive update) and
// bias-corrected moments. step counts from 1.
void adamw_step(DenseGrid& param, const DenseGrid& grad, DenseGrid& m,
                DenseGrid& v, double lr, double weight_decay, double beta1,
                double beta2, double eps, std::size_t step);

// n_holes square cutouts of side hole_frac * min(H, W) filled with the
// per-channel image mean.
DenseGrid cutout_augment(const DenseGrid& image, std::mt19937_64& rng,
                         std::size_t n_holes, double hole_frac);

// Per-channel affine jitter v <- a*v + b, clamped to [0, 1].
DenseGrid color_jitter(const DenseGrid& image, std::mt19937_64& rng,
                       double max_scale, double max_shift);

// The frozen, non-differentiable inputs of one optimization step: augmented
// images, cluster-union targets at loss resolution, and (for the
// no-clustering path) the detached per-mask reference vectors.
struct StepContext {
  std::vector<DenseGrid> images;
  std::vector<TargetMaskStack> targets;  // per item, at loss resolution
  bool refs_from_prompts = true;
  DenseGrid fixed_references;  // used when !refs_from_prompts

  // Step diagnostics gathered while building.
  double sinkhorn_marginal_error = 0.0;
  double mean_affinity = 0.0;
  std::vector<std::size_t> cluster_usage;
};

StepContext build_step_context(const TrainState& state,
                               const std::vector<BatchItem>& batch,
                               const TrainConfig& config);

// The differentiable slice of one step: loss of the current parameters under
// a fixed context. Deterministic, so it is exactly what a finite-difference
// probe may evaluate.
double step_loss(const TrainState& state, const StepContext& ctx,
                 const TrainConfig& config);

struct ParamGrads {
  DenseGrid enc_weight, enc_bias, tokens, kernel, dec_bias;
};

ParamGrads step_loss_backward(const TrainState& state, const StepContext& ctx,
                              const TrainConfig& config, double* loss_out);

// Full pipeline: momentum-pool mask features, cluster them, build detached
// union targets, descend on the supervised similarity loss, then update the
// momentum copy. Mutates state in place and reports metrics.
StepMetrics train_step(TrainState& state, const std::vector<BatchItem>& batch,
                       const TrainConfig& config);

using MetricsSink = std::function<void(const StepMetrics&)>;
using CheckpointSink = std::function<void(const TrainState&, std::size_t)>;

// Seeded epoch shuffling, one train_step per step from state.step up to
// config.steps. Checkpoints fire every checkpoint_every steps and at the
// end. Resuming from a saved state replays the identical stream.
std::vector<StepMetrics> fit(TrainState& state,
                             const std::vector<BatchItem>& dataset,
                             const TrainConfig& config,
                             const MetricsSink& on_metrics = nullptr,
                             const CheckpointSink& on_checkpoint = nullptr);

}  // namespace pxc
