#include "pii/schedule.hpp"

#include <cmath>
#include <string>

#include "pii/errors.hpp"

namespace pii::schedule {

namespace {

int64_t grid_round(double x) { return static_cast<int64_t>(std::llround(x)); }

}  // namespace

StagePlan plan_stages(int64_t final_resolution, int n_stages, ScheduleMode mode) {
  if (final_resolution < 1) throw ParameterError("final_resolution must be >= 1");
  if (n_stages < 1) throw ParameterError("n_stages must be >= 1");

  StagePlan plan;
  plan.final_resolution = final_resolution;
  plan.mode = mode;

  if (mode == ScheduleMode::none) {
    plan.initial_resolution = final_resolution;
    plan.stages.assign(static_cast<size_t>(n_stages),
                       StageSpec{final_resolution, final_resolution});
    return plan;
  }

  if (mode == ScheduleMode::zoom_and_center && n_stages == 7 && final_resolution % 16 != 0) {
    int64_t lower = final_resolution / 16 * 16;
    int64_t upper = lower + 16;
    int64_t nearest = (final_resolution - lower <= upper - final_resolution && lower >= 16)
                          ? lower
                          : upper;
    throw ParameterError("final_resolution " + std::to_string(final_resolution) +
                         " is not divisible by 16; nearest valid value is " +
                         std::to_string(nearest));
  }
  if (final_resolution < 2 * (n_stages + 1)) {
    throw ParameterError("final_resolution must be at least 2*(n_stages+1) = " +
                         std::to_string(2 * (n_stages + 1)) +
                         " so stage sizes strictly increase");
  }

  double step = static_cast<double>(final_resolution) / static_cast<double>(n_stages + 1);
  plan.initial_resolution = grid_round(step);
  int64_t prev_pad = plan.initial_resolution;
  for (int s = 1; s <= n_stages; ++s) {
    int64_t pad = (s == n_stages) ? final_resolution : grid_round(static_cast<double>(s + 1) * step);
    int64_t up = (prev_pad + pad) / 2;
    StageSpec spec;
    switch (mode) {
      case ScheduleMode::zoom_and_center:
        spec = {up, pad};
        break;
      case ScheduleMode::zoom_only:
        spec = {pad, pad};  // upsample straight to the target, no border
        break;
      case ScheduleMode::center_only:
        spec = {prev_pad, pad};  // no upsampling, growth by padding alone
        break;
      case ScheduleMode::none:
        break;
    }
    plan.stages.push_back(spec);
    prev_pad = pad;
  }
  return plan;
}

Tensor upsample(const Tensor& chw, int64_t new_resolution) {
  validate_image(chw);
  int64_t c = chw.shape[0], r = chw.shape[1];
  if (new_resolution < r) {
    throw ParameterError("upsample target " + std::to_string(new_resolution) +
                         " is below the current resolution " + std::to_string(r));
  }
  if (new_resolution == r) return chw;
  Tensor out({c, new_resolution, new_resolution});
  if (r == 1) {
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t k = 0; k < new_resolution * new_resolution; ++k)
        out.data[static_cast<size_t>(ci * new_resolution * new_resolution + k)] = chw.at(ci, 0, 0);
    return out;
  }
  // Half-pixel-center bilinear, same convention as the differentiable path.
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t oy = 0; oy < new_resolution; ++oy) {
      double sy = (static_cast<double>(oy) + 0.5) * static_cast<double>(r) /
                      static_cast<double>(new_resolution) -
                  0.5;
      sy = std::max(0.0, std::min(sy, static_cast<double>(r - 1)));
      int64_t y0 = std::min(static_cast<int64_t>(sy), r - 2);
      double wy = sy - static_cast<double>(y0);
      for (int64_t ox = 0; ox < new_resolution; ++ox) {
        double sx = (static_cast<double>(ox) + 0.5) * static_cast<double>(r) /
                        static_cast<double>(new_resolution) -
                    0.5;
        sx = std::max(0.0, std::min(sx, static_cast<double>(r - 1)));
        int64_t x0 = std::min(static_cast<int64_t>(sx), r - 2);
        double wx = sx - static_cast<double>(x0);
        out.at(ci, oy, ox) =
            (1 - wy) * ((1 - wx) * chw.at(ci, y0, x0) + wx * chw.at(ci, y0, x0 + 1)) +
            wy * ((1 - wx) * chw.at(ci, y0 + 1, x0) + wx * chw.at(ci, y0 + 1, x0 + 1));
      }
    }
  return out;
}

Tensor pad_with_noise(const Tensor& chw, int64_t new_resolution, Rng& rng) {
  validate_image(chw);
  int64_t c = chw.shape[0], r = chw.shape[1];
  if (new_resolution < r) {
    throw ParameterError("pad_with_noise target " + std::to_string(new_resolution) +
                         " is below the current resolution " + std::to_string(r));
  }
  if (new_resolution == r) return chw;
  int64_t margin = new_resolution - r;
  int64_t top = margin / 2;   // odd remainder goes to the bottom/right
  int64_t left = margin / 2;
  Tensor out({c, new_resolution, new_resolution});
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t i = 0; i < new_resolution; ++i)
      for (int64_t j = 0; j < new_resolution; ++j) {
        bool inside = i >= top && i < top + r && j >= left && j < left + r;
        out.at(ci, i, j) = inside ? chw.at(ci, i - top, j - left) : rng.normal();
      }
  return out;
}

}  // namespace pii::schedule
