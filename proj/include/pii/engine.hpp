#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pii/augment.hpp"
#include "pii/config.hpp"
#include "pii/models.hpp"
#include "pii/rng.hpp"
#include "pii/tensor.hpp"

namespace pii::engine {

// Adam state for the optimized image. Reset at every stage boundary.
struct OptimizerState {
  Tensor m, v;
  int64_t step = 0;
  void reset(const std::vector<int64_t>& shape);
};

// lr0 * (1 + cos(pi * iter / total)) / 2, iter counted within the stage.
double cosine_lr(double lr0, int64_t iter, int64_t total);

// Everything sampled for one iteration, exposed so tests can rewrite draws
// (e.g. permute ensemble members) without touching the RNG stream.
struct IterationDraws {
  double lr = 0.0;
  int64_t dx = 0, dy = 0;
  std::vector<augment::ColorShiftParams> members;               // one per ensemble member
  std::vector<std::vector<augment::BaselineAugDraw>> baseline;  // [kind][member]
};

struct Hooks {
  std::function<void(const LossRecord&)> on_record;
  std::function<void(int stage, int64_t iter, IterationDraws&)> mutate_draws;
};

// One optimizer step on the image x ([3,H,W], mutated in place).
LossRecord step(const models::ClassifierHandle& model, const InversionConfig& cfg,
                int stage_index, int64_t iter, int64_t stage_iters, Tensor& x,
                OptimizerState& opt, Rng& rng,
                std::vector<augment::ColorShiftParams>& shift_cache, const Hooks* hooks);

// Runs one stage at the current resolution of x; fresh optimizer state.
void run_stage(const models::ClassifierHandle& model, const InversionConfig& cfg, int stage_index,
               Tensor& x, Rng& rng, std::vector<LossRecord>& trace, const Hooks* hooks);

InversionResult invert(const models::ClassifierHandle& model, const InversionConfig& cfg,
                       const Hooks* hooks = nullptr);

// One JSON object per record, fixed key order, 17 significant digits.
std::string trace_to_jsonl(const std::vector<LossRecord>& trace);

}  // namespace pii::engine
