#include "pii/augment.hpp"

#include <algorithm>
#include <cmath>

#include "pii/errors.hpp"

namespace pii::augment {

namespace {

constexpr double kTwoPi = 6.283185307179586;

// ITU-R 601 luma weights, shared by grayscale and saturation.
constexpr double kLumaR = 0.299, kLumaG = 0.587, kLumaB = 0.114;

int64_t positive_mod(int64_t a, int64_t m) {
  int64_t r = a % m;
  return r < 0 ? r + m : r;
}

void mat3_mul(const double* a, const double* b, double* out) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += a[i * 3 + k] * b[k * 3 + j];
      out[i * 3 + j] = acc;
    }
}

// Bilinear resample of a rectangular region back to the full image size,
// half-pixel centers, identical math to the differentiable batch op.
Tensor bilinear_from_rect(const Tensor& chw, const ad::CropRect& r) {
  int64_t c = chw.shape[0], h = chw.shape[1], w = chw.shape[2];
  Tensor out(chw.shape);
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t oy = 0; oy < h; ++oy) {
      double sy = (static_cast<double>(oy) + 0.5) * static_cast<double>(r.height) /
                      static_cast<double>(h) -
                  0.5;
      sy = std::max(0.0, std::min(sy, static_cast<double>(r.height - 1)));
      int64_t y0 = r.height >= 2 ? std::min(static_cast<int64_t>(sy), r.height - 2) : 0;
      double wy = r.height >= 2 ? sy - static_cast<double>(y0) : 0.0;
      int64_t y1 = r.height >= 2 ? y0 + 1 : y0;
      for (int64_t ox = 0; ox < w; ++ox) {
        double sx = (static_cast<double>(ox) + 0.5) * static_cast<double>(r.width) /
                        static_cast<double>(w) -
                    0.5;
        sx = std::max(0.0, std::min(sx, static_cast<double>(r.width - 1)));
        int64_t x0 = r.width >= 2 ? std::min(static_cast<int64_t>(sx), r.width - 2) : 0;
        double wx = r.width >= 2 ? sx - static_cast<double>(x0) : 0.0;
        int64_t x1 = r.width >= 2 ? x0 + 1 : x0;
        out.at(ci, oy, ox) =
            (1 - wy) * ((1 - wx) * chw.at(ci, r.top + y0, r.left + x0) +
                        wx * chw.at(ci, r.top + y0, r.left + x1)) +
            wy * ((1 - wx) * chw.at(ci, r.top + y1, r.left + x0) +
                  wx * chw.at(ci, r.top + y1, r.left + x1));
      }
    }
  return out;
}

Tensor apply_color_matrix(const Tensor& chw, const double* m9) {
  if (chw.shape[0] != 3) throw ShapeError("color transforms expect a 3-channel image");
  int64_t hw = chw.shape[1] * chw.shape[2];
  Tensor out(chw.shape);
  for (int64_t k = 0; k < hw; ++k) {
    double r = chw[0 * hw + k], g = chw[1 * hw + k], b = chw[2 * hw + k];
    for (int64_t c = 0; c < 3; ++c)
      out[c * hw + k] = m9[c * 3 + 0] * r + m9[c * 3 + 1] * g + m9[c * 3 + 2] * b;
  }
  return out;
}

}  // namespace

void grayscale_matrix(double* m9) {
  for (int i = 0; i < 3; ++i) {
    m9[i * 3 + 0] = kLumaR;
    m9[i * 3 + 1] = kLumaG;
    m9[i * 3 + 2] = kLumaB;
  }
}

void saturation_matrix(double s, double* m9) {
  grayscale_matrix(m9);
  for (int i = 0; i < 9; ++i) m9[i] *= (1.0 - s);
  for (int i = 0; i < 3; ++i) m9[i * 3 + i] += s;
}

void hue_rotation_matrix(double turns, double* m9) {
  // Rotate the chroma plane of the YIQ decomposition; linear stand-in for
  // an HSV hue shift that keeps the op differentiable. from_yiq is the
  // exact inverse of to_yiq so a zero rotation is the identity.
  static const double to_yiq[9] = {0.299,     0.587,     0.114,      //
                                   0.595716,  -0.274453, -0.321263,  //
                                   0.211456,  -0.522591, 0.311135};
  static const double from_yiq[9] = {1.0, 0.9562957197589487,   0.6210244164652611,  //
                                     1.0, -0.27212209931851056, -0.647380596825695,  //
                                     1.0, -1.1069890167364902,  1.7046149983646481};
  if (turns == 0.0) {
    static const double ident[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::copy(ident, ident + 9, m9);
    return;
  }
  double th = turns * kTwoPi;
  double rot[9] = {1, 0, 0, 0, std::cos(th), -std::sin(th), 0, std::sin(th), std::cos(th)};
  double tmp[9];
  mat3_mul(rot, to_yiq, tmp);
  mat3_mul(from_yiq, tmp, m9);
}

ColorShiftParams sample_color_shift(double alpha, double beta, int64_t channels, Rng& rng) {
  if (alpha < 0.0 || beta < 0.0) throw ParameterError("alpha and beta must be nonnegative");
  if (channels < 1) throw ParameterError("sample_color_shift: channels must be >= 1");
  ColorShiftParams p;
  p.mu.resize(static_cast<size_t>(channels));
  p.sigma.resize(static_cast<size_t>(channels));
  for (int64_t c = 0; c < channels; ++c) p.mu[static_cast<size_t>(c)] = rng.uniform(-alpha, alpha);
  for (int64_t c = 0; c < channels; ++c)
    p.sigma[static_cast<size_t>(c)] = std::exp(rng.uniform(-beta, beta));
  return p;
}

Tensor color_shift(const Tensor& chw, const ColorShiftParams& p) {
  validate_image(chw);
  int64_t c = chw.shape[0];
  if (static_cast<int64_t>(p.mu.size()) != c || static_cast<int64_t>(p.sigma.size()) != c)
    throw ShapeError("color_shift: parameter channel count mismatch");
  int64_t hw = chw.shape[1] * chw.shape[2];
  Tensor out(chw.shape);
  for (int64_t ci = 0; ci < c; ++ci) {
    double s = p.sigma[static_cast<size_t>(ci)], m = p.mu[static_cast<size_t>(ci)];
    for (int64_t k = 0; k < hw; ++k) out[ci * hw + k] = s * chw[ci * hw + k] - m;
  }
  return out;
}

Tensor color_shift_inverse(const Tensor& chw, const ColorShiftParams& p) {
  validate_image(chw);
  int64_t c = chw.shape[0];
  if (static_cast<int64_t>(p.mu.size()) != c || static_cast<int64_t>(p.sigma.size()) != c)
    throw ShapeError("color_shift_inverse: parameter channel count mismatch");
  int64_t hw = chw.shape[1] * chw.shape[2];
  Tensor out(chw.shape);
  for (int64_t ci = 0; ci < c; ++ci) {
    double s = p.sigma[static_cast<size_t>(ci)], m = p.mu[static_cast<size_t>(ci)];
    if (s == 0.0) throw ParameterError("color_shift_inverse: sigma must be nonzero");
    for (int64_t k = 0; k < hw; ++k) out[ci * hw + k] = (chw[ci * hw + k] + m) / s;
  }
  return out;
}

void check_jitter_amplitude(int64_t max_shift, int64_t side) {
  if (max_shift < 0) throw ParameterError("jitter amplitude must be nonnegative");
  if (max_shift >= side)
    throw ParameterError("jitter amplitude " + std::to_string(max_shift) +
                         " must be smaller than the image side " + std::to_string(side));
}

Tensor jitter(const Tensor& chw, int64_t dx, int64_t dy) {
  validate_image(chw);
  int64_t c = chw.shape[0], h = chw.shape[1], w = chw.shape[2];
  Tensor out(chw.shape);
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t i = 0; i < h; ++i) {
      int64_t si = positive_mod(i - dy, h);
      for (int64_t j = 0; j < w; ++j)
        out.at(ci, i, j) = chw.at(ci, si, positive_mod(j - dx, w));
    }
  return out;
}

std::vector<Tensor> make_ensemble(const Tensor& chw, double alpha, double beta, int e, Rng& rng) {
  if (e < 1) throw ParameterError("ensemble_size must be >= 1");
  validate_image(chw);
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(e));
  for (int n = 0; n < e; ++n) {
    ColorShiftParams p = sample_color_shift(alpha, beta, chw.shape[0], rng);
    out.push_back(color_shift(chw, p));
  }
  return out;
}

BaselineAugDraw sample_baseline_aug(BaselineAug kind, int64_t height, int64_t width, Rng& rng) {
  BaselineAugDraw d;
  d.kind = kind;
  switch (kind) {
    case BaselineAug::horizontal_flip:
      d.apply = rng.uniform() < 0.5;
      break;
    case BaselineAug::random_resized_crop: {
      d.apply = true;
      double area = static_cast<double>(height * width) * rng.uniform(0.7, 1.0);
      double log_ratio = rng.uniform(std::log(0.75), std::log(4.0 / 3.0));
      double ratio = std::exp(log_ratio);
      int64_t w = std::clamp<int64_t>(
          static_cast<int64_t>(std::llround(std::sqrt(area * ratio))), 1, width);
      int64_t h = std::clamp<int64_t>(
          static_cast<int64_t>(std::llround(std::sqrt(area / ratio))), 1, height);
      d.rect.height = h;
      d.rect.width = w;
      d.rect.top = rng.uniform_int(0, height - h);
      d.rect.left = rng.uniform_int(0, width - w);
      break;
    }
    case BaselineAug::grayscale:
      d.apply = rng.uniform() < 0.2;
      break;
    case BaselineAug::color_jitter:
      d.apply = rng.uniform() < 0.8;
      if (d.apply) {
        d.brightness = rng.uniform(0.6, 1.4);
        d.contrast = rng.uniform(0.6, 1.4);
        d.saturation = rng.uniform(0.6, 1.4);
        d.hue = rng.uniform(-0.1, 0.1);
      }
      break;
  }
  return d;
}

Tensor apply_baseline_aug(const Tensor& chw, const BaselineAugDraw& d) {
  validate_image(chw);
  if (!d.apply) return chw;
  switch (d.kind) {
    case BaselineAug::horizontal_flip: {
      int64_t c = chw.shape[0], h = chw.shape[1], w = chw.shape[2];
      Tensor out(chw.shape);
      for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t i = 0; i < h; ++i)
          for (int64_t j = 0; j < w; ++j) out.at(ci, i, j) = chw.at(ci, i, w - 1 - j);
      return out;
    }
    case BaselineAug::random_resized_crop: {
      ad::CropRect r = d.rect;
      if (r.top < 0 || r.left < 0 || r.height < 1 || r.width < 1 ||
          r.top + r.height > chw.shape[1] || r.left + r.width > chw.shape[2])
        throw ParameterError("crop rect out of bounds");
      return bilinear_from_rect(chw, r);
    }
    case BaselineAug::grayscale: {
      double m[9];
      grayscale_matrix(m);
      return apply_color_matrix(chw, m);
    }
    case BaselineAug::color_jitter: {
      double m[9];
      Tensor x = chw;
      // brightness
      double mb[9] = {d.brightness, 0, 0, 0, d.brightness, 0, 0, 0, d.brightness};
      x = apply_color_matrix(x, mb);
      // contrast: blend with the mean gray level of the current image
      double mg[9];
      grayscale_matrix(mg);
      Tensor gray = apply_color_matrix(x, mg);
      double mean = 0.0;
      for (double v : gray.data) mean += v;
      mean /= static_cast<double>(gray.numel());
      for (double& v : x.data) v = d.contrast * v + (1.0 - d.contrast) * mean;
      // saturation, then hue
      saturation_matrix(d.saturation, m);
      x = apply_color_matrix(x, m);
      hue_rotation_matrix(d.hue, m);
      x = apply_color_matrix(x, m);
      return x;
    }
  }
  return chw;
}

ad::Value apply_baseline_aug_batch(ad::Graph& g, ad::Value nchw,
                                   const std::vector<BaselineAugDraw>& draws) {
  const Tensor& tx = g.val(nchw);
  if (tx.rank() != 4) throw ShapeError("apply_baseline_aug_batch expects NCHW");
  int64_t n = tx.shape[0];
  if (static_cast<int64_t>(draws.size()) != n)
    throw ShapeError("apply_baseline_aug_batch: one draw per member");
  BaselineAug kind = draws.empty() ? BaselineAug::horizontal_flip : draws[0].kind;
  for (const BaselineAugDraw& d : draws) {
    if (d.kind != kind) throw ParameterError("apply_baseline_aug_batch: mixed augmentation kinds");
  }
  switch (kind) {
    case BaselineAug::horizontal_flip: {
      std::vector<uint8_t> mask;
      for (const auto& d : draws) mask.push_back(d.apply ? 1 : 0);
      return g.flip_h_batch(nchw, mask);
    }
    case BaselineAug::random_resized_crop: {
      std::vector<ad::CropRect> rects;
      for (const auto& d : draws) {
        if (d.apply) {
          rects.push_back(d.rect);
        } else {
          rects.push_back(ad::CropRect{0, 0, tx.shape[2], tx.shape[3]});
        }
      }
      return g.crop_resize_batch(nchw, rects);
    }
    case BaselineAug::grayscale: {
      Tensor m({n, 3, 3});
      for (int64_t i = 0; i < n; ++i) {
        double m9[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        if (draws[static_cast<size_t>(i)].apply) grayscale_matrix(m9);
        std::copy(m9, m9 + 9, m.data.begin() + i * 9);
      }
      return g.color_matrix_batch(nchw, m);
    }
    case BaselineAug::color_jitter: {
      // brightness
      Tensor mb({n, 3, 3});
      std::vector<double> contrast(static_cast<size_t>(n), 1.0);
      Tensor ms({n, 3, 3});
      for (int64_t i = 0; i < n; ++i) {
        const BaselineAugDraw& d = draws[static_cast<size_t>(i)];
        double b = d.apply ? d.brightness : 1.0;
        double mb9[9] = {b, 0, 0, 0, b, 0, 0, 0, b};
        std::copy(mb9, mb9 + 9, mb.data.begin() + i * 9);
        contrast[static_cast<size_t>(i)] = d.apply ? d.contrast : 1.0;
        double msat[9], mhue[9], m9[9];
        saturation_matrix(d.apply ? d.saturation : 1.0, msat);
        hue_rotation_matrix(d.apply ? d.hue : 0.0, mhue);
        mat3_mul(mhue, msat, m9);
        std::copy(m9, m9 + 9, ms.data.begin() + i * 9);
      }
      ad::Value x = g.color_matrix_batch(nchw, mb);
      Tensor mg({n, 3, 3});
      for (int64_t i = 0; i < n; ++i) {
        double m9[9];
        grayscale_matrix(m9);
        std::copy(m9, m9 + 9, mg.data.begin() + i * 9);
      }
      ad::Value gray_mean = g.mean_chw(g.color_matrix_batch(x, mg));
      x = g.blend_with_scalar_batch(x, contrast, gray_mean);
      return g.color_matrix_batch(x, ms);
    }
  }
  return nchw;
}

Tensor baseline_augment(const Tensor& chw, BaselineAug kind, Rng& rng) {
  validate_image(chw);
  BaselineAugDraw d = sample_baseline_aug(kind, chw.shape[1], chw.shape[2], rng);
  return apply_baseline_aug(chw, d);
}

}  // namespace pii::augment
