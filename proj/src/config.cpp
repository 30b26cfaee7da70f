#include "pii/config.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "pii/errors.hpp"
#include "pii/schedule.hpp"

namespace pii {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t i = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

}  // namespace

void validate_image(const Tensor& pixels) {
  if (pixels.rank() != 3) {
    throw ShapeError("image must be a CHW tensor, got shape " + pixels.shape_str());
  }
  if (pixels.shape[1] != pixels.shape[2]) {
    throw ShapeError("image must be square, got shape " + pixels.shape_str());
  }
  if (pixels.shape[0] < 1 || pixels.shape[1] < 1) {
    throw ShapeError("image dimensions must be positive, got shape " + pixels.shape_str());
  }
  if (!pixels.all_finite()) throw ParameterError("image contains non-finite pixels");
}

std::string to_string(ScheduleMode m) {
  switch (m) {
    case ScheduleMode::zoom_and_center: return "zoom_and_center";
    case ScheduleMode::zoom_only: return "zoom_only";
    case ScheduleMode::center_only: return "center_only";
    case ScheduleMode::none: return "none";
  }
  return "zoom_and_center";
}

ScheduleMode schedule_mode_from_string(const std::string& s) {
  if (s == "zoom_and_center") return ScheduleMode::zoom_and_center;
  if (s == "zoom_only") return ScheduleMode::zoom_only;
  if (s == "center_only") return ScheduleMode::center_only;
  if (s == "none") return ScheduleMode::none;
  throw ConfigError("unknown schedule mode '" + s +
                    "' (expected zoom_and_center, zoom_only, center_only or none)");
}

std::string to_string(BaselineAug a) {
  switch (a) {
    case BaselineAug::horizontal_flip: return "horizontal_flip";
    case BaselineAug::random_resized_crop: return "random_resized_crop";
    case BaselineAug::grayscale: return "grayscale";
    case BaselineAug::color_jitter: return "color_jitter";
  }
  return "horizontal_flip";
}

BaselineAug baseline_aug_from_string(const std::string& s) {
  if (s == "horizontal_flip") return BaselineAug::horizontal_flip;
  if (s == "random_resized_crop") return BaselineAug::random_resized_crop;
  if (s == "grayscale") return BaselineAug::grayscale;
  if (s == "color_jitter") return BaselineAug::color_jitter;
  throw ConfigError("unknown baseline augmentation '" + s + "'");
}

std::vector<Violation> validate_config(const InversionConfig& cfg) {
  std::vector<Violation> v;
  auto bad = [&v](const std::string& field, const std::string& msg) {
    v.push_back({field, msg});
  };

  if (cfg.target_class < 0) bad("target_class", "target_class must be >= 0");
  if (cfg.iterations_per_stage < 1) bad("iterations_per_stage", "iterations_per_stage must be >= 1");
  if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate))
    bad("learning_rate", "learning_rate must be a positive finite number");
  if (!(cfg.adam_beta1 >= 0.0 && cfg.adam_beta1 < 1.0))
    bad("adam_beta1", "adam betas must lie in [0, 1)");
  if (!(cfg.adam_beta2 >= 0.0 && cfg.adam_beta2 < 1.0))
    bad("adam_beta2", "adam betas must lie in [0, 1)");
  if (!(cfg.weights.tv >= 0.0)) bad("tv_weight", "regularizer weight must be nonnegative");
  if (!(cfg.weights.l2 >= 0.0)) bad("l2_weight", "regularizer weight must be nonnegative");
  if (!(cfg.weights.feature >= 0.0)) bad("feature_weight", "regularizer weight must be nonnegative");
  if (cfg.augment.ensemble_size < 1) bad("ensemble_size", "ensemble_size must be >= 1");
  if (!(cfg.augment.alpha >= 0.0)) bad("alpha", "alpha must be nonnegative");
  if (!(cfg.augment.beta >= 0.0)) bad("beta", "beta must be nonnegative");
  if (cfg.augment.jitter_max.has_value() && *cfg.augment.jitter_max < 0)
    bad("jitter_max", "jitter_max must be nonnegative");
  if (cfg.augment.color_shift_period < 1)
    bad("color_shift_period", "color_shift_period must be >= 1");

  const StagePlan& p = cfg.stage_plan;
  if (p.final_resolution < 1) {
    bad("stage_plan", "final_resolution must be >= 1");
  } else if (p.stages.empty()) {
    bad("stage_plan", "stage list must not be empty");
  } else {
    if (p.initial_resolution < 1) bad("stage_plan", "initial resolution must be >= 1");
    if (p.stages.back().pad_to != p.final_resolution)
      bad("stage_plan", "last stage must pad to the final resolution");
    int64_t prev = p.initial_resolution;
    for (size_t i = 0; i < p.stages.size(); ++i) {
      const StageSpec& s = p.stages[i];
      if (s.upsample_to < prev)
        bad("stage_plan", "stage " + std::to_string(i + 1) + " upsamples below the current size");
      if (s.pad_to < s.upsample_to)
        bad("stage_plan", "stage " + std::to_string(i + 1) + " pads below its upsample size");
      prev = s.pad_to;
    }
  }
  return v;
}

void ensure_valid(const InversionConfig& cfg) {
  std::vector<Violation> v = validate_config(cfg);
  if (v.empty()) return;
  std::ostringstream os;
  os << "invalid config:";
  for (const Violation& x : v) os << " [" << x.field << "] " << x.message << ";";
  throw ConfigError(os.str());
}

std::string serialize_config(const InversionConfig& cfg) {
  std::ostringstream os;
  os << "target_class = " << cfg.target_class << "\n";
  os << "final_resolution = " << cfg.stage_plan.final_resolution << "\n";
  os << "n_stages = " << cfg.stage_plan.stages.size() << "\n";
  os << "mode = " << to_string(cfg.stage_plan.mode) << "\n";
  os << "iterations_per_stage = " << cfg.iterations_per_stage << "\n";
  os << "learning_rate = " << fmt_double(cfg.learning_rate) << "\n";
  os << "adam_beta1 = " << fmt_double(cfg.adam_beta1) << "\n";
  os << "adam_beta2 = " << fmt_double(cfg.adam_beta2) << "\n";
  os << "tv_weight = " << fmt_double(cfg.weights.tv) << "\n";
  os << "l2_weight = " << fmt_double(cfg.weights.l2) << "\n";
  os << "feature_weight = " << fmt_double(cfg.weights.feature) << "\n";
  os << "alpha = " << fmt_double(cfg.augment.alpha) << "\n";
  os << "beta = " << fmt_double(cfg.augment.beta) << "\n";
  os << "ensemble_size = " << cfg.augment.ensemble_size << "\n";
  os << "jitter_max = "
     << (cfg.augment.jitter_max ? std::to_string(*cfg.augment.jitter_max) : std::string("auto"))
     << "\n";
  os << "color_shift_period = " << cfg.augment.color_shift_period << "\n";
  os << "baseline_augs = ";
  for (size_t i = 0; i < cfg.augment.baseline_augs.size(); ++i) {
    if (i) os << ",";
    os << to_string(cfg.augment.baseline_augs[i]);
  }
  os << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "apply_normalization = " << (cfg.apply_normalization ? "true" : "false") << "\n";
  return os.str();
}

InversionConfig parse_config_text(const std::string& text, const InversionConfig* base,
                                  std::set<std::string>* present_keys) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + " is not key = value: '" + t +
                        "'");
    }
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + " has empty key");
    if (kv.count(key)) throw ConfigError("duplicate config key '" + key + "'");
    kv[key] = val;
  }
  if (present_keys) {
    for (const auto& [k, _] : kv) present_keys->insert(k);
  }

  InversionConfig cfg;
  int64_t final_resolution = 224;
  int64_t n_stages = 7;
  ScheduleMode mode = ScheduleMode::zoom_and_center;
  if (base) {
    cfg = *base;
    if (base->stage_plan.final_resolution >= 1 && !base->stage_plan.stages.empty()) {
      final_resolution = base->stage_plan.final_resolution;
      n_stages = static_cast<int64_t>(base->stage_plan.stages.size());
      mode = base->stage_plan.mode;
    }
  }

  auto take = [&kv](const std::string& key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    std::string v = it->second;
    kv.erase(it);
    return v;
  };

  if (auto v = take("target_class")) cfg.target_class = static_cast<int>(parse_int("target_class", *v));
  if (auto v = take("final_resolution")) final_resolution = parse_int("final_resolution", *v);
  if (auto v = take("n_stages")) n_stages = parse_int("n_stages", *v);
  if (auto v = take("mode")) mode = schedule_mode_from_string(*v);
  if (auto v = take("iterations_per_stage"))
    cfg.iterations_per_stage = static_cast<int>(parse_int("iterations_per_stage", *v));
  if (auto v = take("learning_rate")) cfg.learning_rate = parse_double("learning_rate", *v);
  if (auto v = take("adam_beta1")) cfg.adam_beta1 = parse_double("adam_beta1", *v);
  if (auto v = take("adam_beta2")) cfg.adam_beta2 = parse_double("adam_beta2", *v);
  if (auto v = take("tv_weight")) cfg.weights.tv = parse_double("tv_weight", *v);
  if (auto v = take("l2_weight")) cfg.weights.l2 = parse_double("l2_weight", *v);
  if (auto v = take("feature_weight")) cfg.weights.feature = parse_double("feature_weight", *v);
  if (auto v = take("alpha")) cfg.augment.alpha = parse_double("alpha", *v);
  if (auto v = take("beta")) cfg.augment.beta = parse_double("beta", *v);
  if (auto v = take("ensemble_size"))
    cfg.augment.ensemble_size = static_cast<int>(parse_int("ensemble_size", *v));
  if (auto v = take("jitter_max")) {
    if (*v == "auto") {
      cfg.augment.jitter_max.reset();
    } else {
      cfg.augment.jitter_max = static_cast<int>(parse_int("jitter_max", *v));
    }
  }
  if (auto v = take("color_shift_period"))
    cfg.augment.color_shift_period = static_cast<int>(parse_int("color_shift_period", *v));
  if (auto v = take("baseline_augs")) {
    cfg.augment.baseline_augs.clear();
    std::istringstream ss(*v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) cfg.augment.baseline_augs.push_back(baseline_aug_from_string(item));
    }
  }
  if (auto v = take("seed")) cfg.seed = parse_u64("seed", *v);
  if (auto v = take("apply_normalization"))
    cfg.apply_normalization = parse_bool("apply_normalization", *v);

  if (!kv.empty()) {
    std::ostringstream os;
    os << "unknown config keys:";
    for (const auto& [k, _] : kv) os << " '" << k << "'";
    throw ConfigError(os.str());
  }

  cfg.stage_plan = schedule::plan_stages(final_resolution, static_cast<int>(n_stages), mode);
  return cfg;
}

InversionConfig parse_config_file(const std::string& path, const InversionConfig* base,
                                  std::set<std::string>* present_keys) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return parse_config_text(os.str(), base, present_keys);
}

nlohmann::json config_to_json(const InversionConfig& cfg) {
  nlohmann::json j;
  j["target_class"] = cfg.target_class;
  j["final_resolution"] = cfg.stage_plan.final_resolution;
  j["n_stages"] = cfg.stage_plan.stages.size();
  j["mode"] = to_string(cfg.stage_plan.mode);
  j["iterations_per_stage"] = cfg.iterations_per_stage;
  j["learning_rate"] = cfg.learning_rate;
  j["adam_beta1"] = cfg.adam_beta1;
  j["adam_beta2"] = cfg.adam_beta2;
  j["tv_weight"] = cfg.weights.tv;
  j["l2_weight"] = cfg.weights.l2;
  j["feature_weight"] = cfg.weights.feature;
  j["alpha"] = cfg.augment.alpha;
  j["beta"] = cfg.augment.beta;
  j["ensemble_size"] = cfg.augment.ensemble_size;
  if (cfg.augment.jitter_max) {
    j["jitter_max"] = *cfg.augment.jitter_max;
  } else {
    j["jitter_max"] = "auto";
  }
  j["color_shift_period"] = cfg.augment.color_shift_period;
  std::vector<std::string> augs;
  for (BaselineAug a : cfg.augment.baseline_augs) augs.push_back(to_string(a));
  j["baseline_augs"] = augs;
  j["seed"] = cfg.seed;
  j["apply_normalization"] = cfg.apply_normalization;
  return j;
}

}  // namespace pii
