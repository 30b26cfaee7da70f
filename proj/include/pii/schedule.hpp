#pragma once

#include "pii/config.hpp"
#include "pii/rng.hpp"
#include "pii/tensor.hpp"

namespace pii::schedule {

// Builds the staged resolution schedule for a final resolution R.
//
// The grid step is R/(n_stages+1): stage s (1-based) pads to
// round((s+1)*R/(n_stages+1)) with the last stage forced to exactly R, and
// upsamples to the midpoint of the surrounding pad sizes. The initial
// working resolution is round(R/(n_stages+1)). With 7 stages and R
// divisible by 16 this reduces to the exact sequence
// upsample_to=(2s+1)*R/16, pad_to=(s+1)*R/8, initial R/8.
//
// zoom_only upsamples directly to each pad size (no noise border);
// center_only grows by padding alone (no upsampling); none is
// full-resolution from the start.
StagePlan plan_stages(int64_t final_resolution, int n_stages, ScheduleMode mode);

// Bilinear upsampling with half-pixel centers. Shrinking is an error.
Tensor upsample(const Tensor& chw, int64_t new_resolution);

// Pads to new_resolution x new_resolution, keeping the input bitwise intact
// in the center (odd remainders go to the bottom/right) and filling the
// border with i.i.d. standard normal noise. The border pixels join the
// optimization variable afterwards.
Tensor pad_with_noise(const Tensor& chw, int64_t new_resolution, Rng& rng);

}  // namespace pii::schedule
