#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include <nlohmann/json.hpp>

#include "pii/engine.hpp"
#include "pii/errors.hpp"
#include "pii/eval.hpp"
#include "pii/models.hpp"
#include "pii/rng.hpp"
#include "pii/schedule.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pii;

namespace {

// Regularizer weights behind the named presets; calibrated on the bundled
// toy models so the classical baselines neither dominate the class loss nor
// vanish next to it.
constexpr double kDeepDreamTv = 2.5e-4;
constexpr double kDeepDreamL2 = 3.0e-5;
constexpr double kDeepInversionFeature = 1.0e-2;

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

std::string models_dir() { return env_or("PII_MODELS_DIR", "models"); }

std::string resolve_model_path(const std::string& name) {
  if (name == "toy-cnn" || name == "toy-attention" || name == "toy-mixer") {
    return models_dir() + "/" + name + ".pii";
  }
  return name;
}

struct InvertOpts {
  std::string model;
  int target = -1;
  std::string preset;
  std::string config_path;
  int resolution = 0;  // 0 = native model resolution (32 when unconstrained)
  int stages = 7;
  std::string mode = "zoom_and_center";
  int iters = 400;
  double lr = 0.01;
  double alpha = 1.0, beta = 1.0;
  int ensemble = 32;
  int jitter = -1;  // -1 = resolution/8
  int period = 1;
  double tv = 0.0, l2 = 0.0, feat = 0.0;
  uint64_t seed = 0;
  bool normalize = false;
  std::string augs;

  CLI::Option *o_target = nullptr, *o_resolution = nullptr, *o_stages = nullptr,
              *o_mode = nullptr, *o_iters = nullptr, *o_lr = nullptr, *o_alpha = nullptr,
              *o_beta = nullptr, *o_ensemble = nullptr, *o_jitter = nullptr, *o_period = nullptr,
              *o_tv = nullptr, *o_l2 = nullptr, *o_feat = nullptr, *o_seed = nullptr,
              *o_normalize = nullptr, *o_augs = nullptr;
};

void add_invert_options(CLI::App* app, InvertOpts& o) {
  app->add_option("--model", o.model, "model alias (toy-cnn/toy-attention/toy-mixer) or weights path")
      ->required();
  o.o_target = app->add_option("--class", o.target, "target class index");
  app->add_option("--preset", o.preset, "pii | deepdream | deepinversion");
  app->add_option("--config", o.config_path, "key = value config file");
  o.o_resolution = app->add_option("--resolution", o.resolution, "final image resolution");
  o.o_stages = app->add_option("--stages", o.stages, "number of stages");
  o.o_mode = app->add_option("--mode", o.mode,
                             "schedule mode: zoom_and_center | zoom_only | center_only | none");
  o.o_iters = app->add_option("--iters", o.iters, "iterations per stage");
  o.o_lr = app->add_option("--lr", o.lr, "base learning rate (cosine-decayed per stage)");
  o.o_alpha = app->add_option("--alpha", o.alpha, "ColorShift mean range");
  o.o_beta = app->add_option("--beta", o.beta, "ColorShift log-scale range");
  o.o_ensemble = app->add_option("--ensemble", o.ensemble, "ensemble size");
  o.o_jitter = app->add_option("--jitter", o.jitter, "jitter amplitude in pixels (-1 = res/8)");
  o.o_period = app->add_option("--color-shift-period", o.period,
                               "iterations between ColorShift redraws");
  o.o_tv = app->add_option("--tv", o.tv, "total-variation weight");
  o.o_l2 = app->add_option("--l2", o.l2, "l2 weight");
  o.o_feat = app->add_option("--feat", o.feat, "feature-statistics weight");
  o.o_seed = app->add_option("--seed", o.seed, "RNG seed");
  o.o_normalize = app->add_flag("--normalize,!--no-normalize", o.normalize,
                                "apply the model's channel normalization");
  o.o_augs = app->add_option(
      "--augs", o.augs,
      "comma list of baseline augmentations (horizontal_flip, random_resized_crop, grayscale, "
      "color_jitter) or 'none'");
}

struct BuildResult {
  models::ClassifierHandle model;
  InversionConfig cfg;
};

// Precedence: library defaults < preset < config file < explicit flags.
BuildResult build_inversion(const InvertOpts& o) {
  InversionConfig cfg;
  int64_t res = 0;  // 0 = auto
  int n_stages = 7;
  ScheduleMode mode = ScheduleMode::zoom_and_center;

  if (!o.preset.empty()) {
    if (o.preset == "pii") {
      cfg.augment.alpha = 1.0;
      cfg.augment.beta = 1.0;
      cfg.augment.ensemble_size = 32;
      cfg.weights = {};
    } else if (o.preset == "deepdream" || o.preset == "deepinversion") {
      cfg.augment.alpha = 0.0;
      cfg.augment.beta = 0.0;
      cfg.augment.ensemble_size = 1;
      cfg.weights.tv = kDeepDreamTv;
      cfg.weights.l2 = kDeepDreamL2;
      if (o.preset == "deepinversion") cfg.weights.feature = kDeepInversionFeature;
      mode = ScheduleMode::none;
    } else {
      throw ConfigError("unknown preset '" + o.preset +
                        "' (expected pii, deepdream or deepinversion)");
    }
  }

  if (!o.config_path.empty()) {
    std::set<std::string> present;
    InversionConfig parsed = parse_config_file(o.config_path, &cfg, &present);
    if (present.count("final_resolution")) res = parsed.stage_plan.final_resolution;
    if (present.count("n_stages")) n_stages = static_cast<int>(parsed.stage_plan.stages.size());
    if (present.count("mode")) mode = parsed.stage_plan.mode;
    parsed.stage_plan = cfg.stage_plan;
    cfg = parsed;
  }

  if (o.o_target->count()) cfg.target_class = o.target;
  if (o.o_resolution->count()) res = o.resolution;
  if (o.o_stages->count()) n_stages = o.stages;
  if (o.o_mode->count()) mode = schedule_mode_from_string(o.mode);
  if (o.o_iters->count()) cfg.iterations_per_stage = o.iters;
  if (o.o_lr->count()) cfg.learning_rate = o.lr;
  if (o.o_alpha->count()) cfg.augment.alpha = o.alpha;
  if (o.o_beta->count()) cfg.augment.beta = o.beta;
  if (o.o_ensemble->count()) cfg.augment.ensemble_size = o.ensemble;
  if (o.o_jitter->count()) {
    if (o.jitter < 0) {
      cfg.augment.jitter_max.reset();
    } else {
      cfg.augment.jitter_max = o.jitter;
    }
  }
  if (o.o_period->count()) cfg.augment.color_shift_period = o.period;
  if (o.o_tv->count()) cfg.weights.tv = o.tv;
  if (o.o_l2->count()) cfg.weights.l2 = o.l2;
  if (o.o_feat->count()) cfg.weights.feature = o.feat;
  if (o.o_seed->count()) cfg.seed = o.seed;
  if (o.o_normalize->count()) cfg.apply_normalization = o.normalize;
  if (o.o_augs->count()) {
    cfg.augment.baseline_augs.clear();
    if (o.augs != "none" && !o.augs.empty()) {
      std::istringstream ss(o.augs);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) cfg.augment.baseline_augs.push_back(baseline_aug_from_string(item));
      }
    }
  }

  BuildResult out;
  out.model = models::load_model(resolve_model_path(o.model));
  if (res == 0) {
    int fixed = out.model.input_resolution();
    res = fixed > 0 ? fixed : 32;
  }
  cfg.stage_plan = schedule::plan_stages(res, n_stages, mode);
  out.cfg = cfg;
  return out;
}

std::map<std::string, double> self_judge(const models::ClassifierHandle& model,
                                         const ImageState& image, int target) {
  // Judge what the PNG will actually hold: quantized pixels.
  std::vector<uint8_t> q = eval::quantize(image.pixels);
  Tensor batch({1, 3, image.pixels.shape[1], image.pixels.shape[2]});
  int64_t hw = image.pixels.shape[1] * image.pixels.shape[2];
  for (int64_t i = 0; i < hw; ++i)
    for (int64_t c = 0; c < 3; ++c)
      batch.data[static_cast<size_t>(c * hw + i)] =
          static_cast<double>(q[static_cast<size_t>(i * 3 + c)]) / 255.0;
  Tensor logits = models::forward_scores(model, batch);
  int64_t k = logits.shape[1];
  double mx = *std::max_element(logits.data.begin(), logits.data.end());
  double sum = 0.0;
  for (int64_t j = 0; j < k; ++j) sum += std::exp(logits[j] - mx);
  double conf = std::exp(logits[target] - mx) / sum;
  int64_t best = static_cast<int64_t>(
      std::max_element(logits.data.begin(), logits.data.end()) - logits.data.begin());
  return {{"self_confidence", conf}, {"self_top1", best == target ? 1.0 : 0.0}};
}

json losses_json(const LossRecord& r) {
  return {{"nll", r.nll}, {"tv", r.tv}, {"l2", r.l2}, {"feat", r.feat}, {"total", r.total}};
}

int run_train(const std::string& arch_s, const std::string& dataset, int epochs, uint64_t seed,
              std::string out, const std::string& data_dir) {
  models::Arch arch = models::arch_from_string(arch_s);
  if (out.empty()) {
    std::string alias = arch == models::Arch::cnn_bn             ? "toy-cnn"
                        : arch == models::Arch::tiny_attention   ? "toy-attention"
                                                                 : "toy-mixer";
    out = models_dir() + "/" + alias + ".pii";
  }
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  models::DatasetPair data = models::load_dataset(dataset, data_dir);
  models::TrainReport report;
  models::ClassifierHandle handle = models::train_toy(arch, data, epochs, seed, &report);
  models::save_model(handle, report, out);
  json j;
  j["arch"] = report.arch;
  j["dataset"] = report.dataset;
  j["seed"] = report.seed;
  j["epochs"] = report.epochs;
  j["train_accuracy"] = report.train_accuracy;
  j["test_accuracy"] = report.test_accuracy;
  j["weight_hash"] = report.weight_hash;
  j["out"] = out;
  j["manifest"] = out + ".json";
  std::cout << j.dump() << "\n";
  return 0;
}

int run_invert(const InvertOpts& o, const std::string& out_path, const std::string& trace_path) {
  BuildResult b = build_inversion(o);
  InversionResult result = engine::invert(b.model, b.cfg);
  std::map<std::string, double> scores = self_judge(b.model, result.image, b.cfg.target_class);
  if (fs::path(out_path).has_parent_path()) {
    fs::create_directories(fs::path(out_path).parent_path());
  }
  eval::export_image(result.image, b.cfg, result.loss_trace.back(), scores, out_path);
  if (!trace_path.empty()) {
    std::ofstream tf(trace_path);
    if (!tf) throw IoError("cannot write trace file '" + trace_path + "'");
    tf << engine::trace_to_jsonl(result.loss_trace);
  }
  json j;
  j["out"] = out_path;
  j["seed"] = result.seed;
  j["elapsed_seconds"] = result.elapsed_seconds;
  j["final_resolution"] = b.cfg.stage_plan.final_resolution;
  j["stages"] = b.cfg.stage_plan.stages.size();
  j["losses"] = losses_json(result.loss_trace.back());
  j["judge_scores"] = scores;
  std::cout << j.dump() << "\n";
  return 0;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int run_sweep(const InvertOpts& o, const std::string& axis, const std::string& values,
              const std::string& alpha_values, const std::string& beta_values,
              const std::string& out_dir) {
  BuildResult base = build_inversion(o);
  uint64_t base_seed = base.cfg.seed;
  fs::create_directories(out_dir);

  struct Cell {
    json value;
    InversionConfig cfg;
  };
  std::vector<Cell> cells;
  auto need_values = [&]() {
    if (values.empty()) throw ConfigError("axis '" + axis + "' needs --values");
  };

  if (axis == "tv_weight" || axis == "alpha" || axis == "beta") {
    need_values();
    for (const std::string& v : split_csv(values)) {
      Cell c{json(std::stod(v)), base.cfg};
      if (axis == "tv_weight") c.cfg.weights.tv = std::stod(v);
      if (axis == "alpha") c.cfg.augment.alpha = std::stod(v);
      if (axis == "beta") c.cfg.augment.beta = std::stod(v);
      cells.push_back(std::move(c));
    }
  } else if (axis == "ensemble_size") {
    need_values();
    for (const std::string& v : split_csv(values)) {
      Cell c{json(std::stoi(v)), base.cfg};
      c.cfg.augment.ensemble_size = std::stoi(v);
      cells.push_back(std::move(c));
    }
  } else if (axis == "alpha_beta_grid") {
    if (alpha_values.empty() || beta_values.empty()) {
      throw ConfigError("axis 'alpha_beta_grid' needs --alpha-values and --beta-values");
    }
    for (const std::string& a : split_csv(alpha_values)) {
      for (const std::string& bv : split_csv(beta_values)) {
        Cell c{json({{"alpha", std::stod(a)}, {"beta", std::stod(bv)}}), base.cfg};
        c.cfg.augment.alpha = std::stod(a);
        c.cfg.augment.beta = std::stod(bv);
        cells.push_back(std::move(c));
      }
    }
  } else if (axis == "augmentation_kind") {
    need_values();
    for (const std::string& v : split_csv(values)) {
      Cell c{json(v), base.cfg};
      c.cfg.augment.baseline_augs.clear();
      if (v == "colorshift") {
        c.cfg.augment.alpha = 1.0;
        c.cfg.augment.beta = 1.0;
      } else if (v == "none") {
        c.cfg.augment.alpha = 0.0;
        c.cfg.augment.beta = 0.0;
      } else {
        c.cfg.augment.alpha = 0.0;
        c.cfg.augment.beta = 0.0;
        c.cfg.augment.baseline_augs.push_back(baseline_aug_from_string(v));
      }
      cells.push_back(std::move(c));
    }
  } else if (axis == "schedule_mode") {
    need_values();
    for (const std::string& v : split_csv(values)) {
      Cell c{json(v), base.cfg};
      c.cfg.stage_plan =
          schedule::plan_stages(base.cfg.stage_plan.final_resolution,
                                static_cast<int>(base.cfg.stage_plan.stages.size()),
                                schedule_mode_from_string(v));
      cells.push_back(std::move(c));
    }
  } else {
    throw ConfigError("unknown sweep axis '" + axis +
                      "' (expected tv_weight, ensemble_size, alpha, beta, alpha_beta_grid, "
                      "augmentation_kind or schedule_mode)");
  }

  json summary;
  summary["axis"] = axis;
  summary["base_seed"] = base_seed;
  summary["model"] = o.model;
  summary["target_class"] = base.cfg.target_class;
  summary["cells"] = json::array();
  for (size_t i = 0; i < cells.size(); ++i) {
    InversionConfig cfg = cells[i].cfg;
    cfg.seed = derive_seed(base_seed, static_cast<uint64_t>(i));
    InversionResult result = engine::invert(base.model, cfg);
    std::map<std::string, double> scores = self_judge(base.model, result.image, cfg.target_class);
    char name[32];
    std::snprintf(name, sizeof(name), "cell_%03zu.png", i);
    std::string png = (fs::path(out_dir) / name).string();
    eval::export_image(result.image, cfg, result.loss_trace.back(), scores, png);
    json cell;
    cell["index"] = i;
    cell["value"] = cells[i].value;
    cell["seed"] = cfg.seed;
    cell["png"] = png;
    cell["sidecar"] = png.substr(0, png.size() - 4) + ".json";
    cell["losses"] = losses_json(result.loss_trace.back());
    cell["judge_scores"] = scores;
    summary["cells"].push_back(cell);
  }
  std::string summary_path = (fs::path(out_dir) / "summary.json").string();
  std::ofstream sf(summary_path);
  if (!sf) throw IoError("cannot write '" + summary_path + "'");
  sf << summary.dump(2) << "\n";
  std::cout << summary.dump() << "\n";
  return 0;
}

int run_evaluate(const std::string& model_name, const std::vector<std::string>& images,
                 int splits, const std::string& targets_csv) {
  models::ClassifierHandle judge = models::load_model(resolve_model_path(model_name));
  if (images.empty()) throw ConfigError("evaluate needs at least one --images path");

  std::vector<Tensor> loaded;
  for (const std::string& p : images) loaded.push_back(eval::load_png(p));
  for (const Tensor& t : loaded) {
    if (t.shape != loaded[0].shape) {
      throw ShapeError("evaluated images must share one resolution");
    }
  }
  int64_t n = static_cast<int64_t>(loaded.size());
  Tensor batch({n, 3, loaded[0].shape[1], loaded[0].shape[2]});
  int64_t per = loaded[0].numel();
  for (int64_t i = 0; i < n; ++i) {
    std::copy(loaded[static_cast<size_t>(i)].data.begin(),
              loaded[static_cast<size_t>(i)].data.end(), batch.data.begin() + i * per);
  }

  std::vector<int> targets;
  if (!targets_csv.empty()) {
    for (const std::string& t : split_csv(targets_csv)) targets.push_back(std::stoi(t));
    if (targets.size() != images.size()) {
      throw ConfigError("--targets must list one class per image");
    }
  } else {
    for (const std::string& p : images) {
      std::string side = p.size() >= 4 && p.substr(p.size() - 4) == ".png"
                             ? p.substr(0, p.size() - 4) + ".json"
                             : p + ".json";
      std::ifstream sf(side);
      if (!sf) {
        targets.clear();
        break;
      }
      json j;
      sf >> j;
      targets.push_back(j.at("config").at("target_class").get<int>());
    }
  }

  eval::InceptionScore is = eval::inception_score(judge, batch, splits);
  json out;
  out["n"] = n;
  out["splits"] = splits;
  out["inception_score"] = {{"mean", is.mean}, {"stddev", is.stddev}};
  if (!targets.empty()) {
    eval::AccuracyReport acc = eval::cross_model_accuracy(judge, batch, targets);
    out["accuracy"] = {{"top1", acc.top1}, {"topk", acc.topk}, {"k", acc.k}};
  } else {
    out["accuracy"] = nullptr;
  }
  std::cout << out.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Plug-in inversion: class-conditional images from a trained classifier"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a toy classifier and save its weights");
  std::string t_arch, t_dataset = "synthetic", t_out, t_data_dir = env_or("PII_DATA_DIR", "data");
  int t_epochs = 10;
  uint64_t t_seed = 1;
  train->add_option("--arch", t_arch, "cnn_bn | tiny_attention | tiny_mixer")->required();
  train->add_option("--dataset", t_dataset, "synthetic | cifar10");
  train->add_option("--epochs", t_epochs, "training epochs");
  train->add_option("--seed", t_seed, "init/shuffle seed");
  train->add_option("--out", t_out, "weights path (default: models dir + alias)");
  train->add_option("--data-dir", t_data_dir, "dataset root (cifar10)");

  auto* invert = app.add_subcommand("invert", "optimize an image for one class");
  InvertOpts inv;
  add_invert_options(invert, inv);
  std::string inv_out = "inversion.png", inv_trace;
  invert->add_option("--out", inv_out, "output PNG path (sidecar JSON written next to it)");
  invert->add_option("--trace", inv_trace, "write the per-iteration loss trace (JSONL)");

  auto* sweep = app.add_subcommand("sweep", "run one inversion per value along an axis");
  InvertOpts sw;
  add_invert_options(sweep, sw);
  std::string sw_axis, sw_values, sw_alpha_values, sw_beta_values, sw_out = "sweep";
  sweep->add_option("--axis", sw_axis,
                    "tv_weight | ensemble_size | alpha | beta | alpha_beta_grid | "
                    "augmentation_kind | schedule_mode")
      ->required();
  sweep->add_option("--values", sw_values, "comma-separated axis values");
  sweep->add_option("--alpha-values", sw_alpha_values, "alpha values (alpha_beta_grid)");
  sweep->add_option("--beta-values", sw_beta_values, "beta values (alpha_beta_grid)");
  sweep->add_option("--out", sw_out, "output directory");

  auto* evaluate = app.add_subcommand("evaluate", "score exported images with a judge model");
  std::string e_model, e_targets;
  std::vector<std::string> e_images;
  int e_splits = 1;
  evaluate->add_option("--model", e_model, "judge model alias or weights path")->required();
  evaluate->add_option("--images", e_images, "PNG files to score")->expected(-1);
  evaluate->add_option("--splits", e_splits, "inception-score splits");
  evaluate->add_option("--targets", e_targets,
                       "comma-separated intended classes (default: read sidecars)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    json err;
    err["error"] = "config";
    err["message"] = std::string(e.what());
    std::cerr << err.dump() << "\n";
    return 2;
  }

  try {
    if (*train) return run_train(t_arch, t_dataset, t_epochs, t_seed, t_out, t_data_dir);
    if (*invert) return run_invert(inv, inv_out, inv_trace);
    if (*sweep) return run_sweep(sw, sw_axis, sw_values, sw_alpha_values, sw_beta_values, sw_out);
    if (*evaluate) return run_evaluate(e_model, e_images, e_splits, e_targets);
  } catch (const DivergenceError& e) {
    json err;
    err["error"] = e.kind();
    err["message"] = e.what();
    err["stage"] = e.stage();
    err["iteration"] = e.iteration();
    std::cerr << err.dump() << "\n";
    return 1;
  } catch (const Error& e) {
    json err;
    err["error"] = e.kind();
    err["message"] = e.what();
    std::cerr << err.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    json err;
    err["error"] = "internal";
    err["message"] = e.what();
    std::cerr << err.dump() << "\n";
    return 2;
  }
  return 0;
}
