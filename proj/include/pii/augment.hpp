#pragma once

#include <vector>

#include "pii/autodiff.hpp"
#include "pii/config.hpp"
#include "pii/rng.hpp"
#include "pii/tensor.hpp"

namespace pii::augment {

// Per-channel affine color perturbation: out[c] = sigma[c] * x[c] - mu[c].
struct ColorShiftParams {
  std::vector<double> mu;
  std::vector<double> sigma;
};

// mu ~ U(-alpha, alpha) per channel, sigma = exp(U(-beta, beta)) per
// channel. Draw order: all mu entries, then all sigma entries.
ColorShiftParams sample_color_shift(double alpha, double beta, int64_t channels, Rng& rng);

Tensor color_shift(const Tensor& chw, const ColorShiftParams& p);

// Inverse transform: (x + mu) / sigma. Exists for tests and tooling.
Tensor color_shift_inverse(const Tensor& chw, const ColorShiftParams& p);

// Circular translation by (dx, dy); identical to rolling the image.
// max_shift >= side length is an error (the wrap would alias).
Tensor jitter(const Tensor& chw, int64_t dx, int64_t dy);
void check_jitter_amplitude(int64_t max_shift, int64_t side);

// One ColorShift ensemble: e members, fresh parameter draws on every call.
std::vector<Tensor> make_ensemble(const Tensor& chw, double alpha, double beta, int e, Rng& rng);

// Sampled parameters of one baseline augmentation application. Sampling is
// separated from application so the same draw can be replayed on the plain
// tensor path and on the differentiable path.
struct BaselineAugDraw {
  BaselineAug kind = BaselineAug::horizontal_flip;
  bool apply = false;
  ad::CropRect rect;                      // random_resized_crop
  double brightness = 1.0;                // color_jitter
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;                       // in turns, [-0.1, 0.1] scaled by strength
};

// Appendix parameters: flip p=0.5; crop scale [0.7,1], ratio [0.75,1.33];
// grayscale p=0.2; color jitter p=0.8 with strengths (0.4,0.4,0.4,0.1).
BaselineAugDraw sample_baseline_aug(BaselineAug kind, int64_t height, int64_t width, Rng& rng);

Tensor apply_baseline_aug(const Tensor& chw, const BaselineAugDraw& draw);

// Batched differentiable application; one draw per batch member.
ad::Value apply_baseline_aug_batch(ad::Graph& g, ad::Value nchw,
                                   const std::vector<BaselineAugDraw>& draws);

// Convenience: sample + apply in one call.
Tensor baseline_augment(const Tensor& chw, BaselineAug kind, Rng& rng);

// 3x3 color matrices used by the differentiable path; exposed for tests.
void grayscale_matrix(double* m9);
void saturation_matrix(double s, double* m9);
void hue_rotation_matrix(double turns, double* m9);

}  // namespace pii::augment
