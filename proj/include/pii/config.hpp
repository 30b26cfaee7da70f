#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pii/tensor.hpp"

namespace pii {

// Square image being optimized. Pixels are unbounded during optimization;
// clamping to [0,1] happens only at export time.
struct ImageState {
  Tensor pixels;  // [C, R, R]

  int64_t resolution() const { return pixels.rank() == 3 ? pixels.shape[1] : 0; }
  int64_t channels() const { return pixels.rank() == 3 ? pixels.shape[0] : 0; }
};

// Throws ShapeError / ParameterError if the tensor is not a finite square
// CHW image.
void validate_image(const Tensor& pixels);

enum class ScheduleMode { zoom_and_center, zoom_only, center_only, none };

std::string to_string(ScheduleMode m);
ScheduleMode schedule_mode_from_string(const std::string& s);

struct StageSpec {
  int64_t upsample_to = 0;
  int64_t pad_to = 0;
  bool operator==(const StageSpec&) const = default;
};

struct StagePlan {
  int64_t final_resolution = 0;
  int64_t initial_resolution = 0;
  ScheduleMode mode = ScheduleMode::zoom_and_center;
  std::vector<StageSpec> stages;
  bool operator==(const StagePlan&) const = default;
};

enum class BaselineAug { horizontal_flip, random_resized_crop, grayscale, color_jitter };

std::string to_string(BaselineAug a);
BaselineAug baseline_aug_from_string(const std::string& s);

struct AugmentationSpec {
  double alpha = 1.0;  // ColorShift mean range: mu ~ U(-alpha, alpha)
  double beta = 1.0;   // ColorShift scale range: sigma = exp(U(-beta, beta))
  int ensemble_size = 32;
  // Jitter amplitude in pixels; unset means resolution/8 (rounded down) at
  // the current working resolution.
  std::optional<int> jitter_max;
  // Redraw ColorShift parameters every this many iterations.
  int color_shift_period = 1;
  std::vector<BaselineAug> baseline_augs;
  bool operator==(const AugmentationSpec&) const = default;
};

struct RegularizerWeights {
  double tv = 0.0;
  double l2 = 0.0;
  double feature = 0.0;
  bool operator==(const RegularizerWeights&) const = default;
};

struct InversionConfig {
  int target_class = 0;
  StagePlan stage_plan;
  int iterations_per_stage = 400;
  double learning_rate = 0.01;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.99;
  RegularizerWeights weights;
  AugmentationSpec augment;
  uint64_t seed = 0;
  bool apply_normalization = false;
  bool operator==(const InversionConfig&) const = default;
};

struct LossRecord {
  int stage = 0;
  int iteration = 0;
  double lr = 0.0;
  double nll = 0.0;
  double tv = 0.0;
  double l2 = 0.0;
  double feat = 0.0;
  double total = 0.0;
};

struct InversionResult {
  ImageState image;
  std::vector<LossRecord> loss_trace;
  InversionConfig config;
  double elapsed_seconds = 0.0;
  uint64_t seed = 0;
};

struct Violation {
  std::string field;
  std::string message;
};

// Returns the contract violations of a config; empty means valid.
std::vector<Violation> validate_config(const InversionConfig& cfg);

// Throws ConfigError listing all violations when the config is invalid.
void ensure_valid(const InversionConfig& cfg);

// Flat key=value serialization. parse_config_file rejects unknown keys and
// re-derives the stage plan from (final_resolution, n_stages, mode). When a
// base config is given, only keys present in the text override it;
// present_keys (if non-null) receives the keys the text actually set.
std::string serialize_config(const InversionConfig& cfg);
InversionConfig parse_config_text(const std::string& text, const InversionConfig* base = nullptr,
                                  std::set<std::string>* present_keys = nullptr);
InversionConfig parse_config_file(const std::string& path, const InversionConfig* base = nullptr,
                                  std::set<std::string>* present_keys = nullptr);

nlohmann::json config_to_json(const InversionConfig& cfg);

}  // namespace pii
