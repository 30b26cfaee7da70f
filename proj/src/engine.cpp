#include "pii/engine.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "pii/errors.hpp"
#include "pii/regularizers.hpp"
#include "pii/schedule.hpp"

namespace pii::engine {

void OptimizerState::reset(const std::vector<int64_t>& shape) {
  m = Tensor::zeros(shape);
  v = Tensor::zeros(shape);
  step = 0;
}

double cosine_lr(double lr0, int64_t iter, int64_t total) {
  if (total < 1) throw ParameterError("cosine_lr: total must be >= 1");
  double frac = static_cast<double>(iter) / static_cast<double>(total);
  return lr0 * (1.0 + std::cos(M_PI * frac)) / 2.0;
}

namespace {

constexpr double kAdamEps = 1e-8;

// Active baseline kinds in the pinned chain order.
std::vector<BaselineAug> baseline_chain(const std::vector<BaselineAug>& requested) {
  const BaselineAug order[] = {BaselineAug::random_resized_crop, BaselineAug::horizontal_flip,
                               BaselineAug::color_jitter, BaselineAug::grayscale};
  std::vector<BaselineAug> out;
  for (BaselineAug k : order) {
    for (BaselineAug r : requested) {
      if (r == k) {
        out.push_back(k);
        break;
      }
    }
  }
  return out;
}

void check_model_support(const models::ClassifierHandle& model, const InversionConfig& cfg) {
  if (cfg.weights.feature > 0.0 && !model.has_bn_stats()) {
    throw CapabilityError("feature regularizer requires batch-norm running statistics; model '" +
                          model.name + "' exposes none");
  }
  if (cfg.apply_normalization && !model.normalization) {
    throw ConfigError("apply_normalization is set but model '" + model.name +
                      "' carries no channel statistics");
  }
}

}  // namespace

LossRecord step(const models::ClassifierHandle& model, const InversionConfig& cfg,
                int stage_index, int64_t iter, int64_t stage_iters, Tensor& x,
                OptimizerState& opt, Rng& rng,
                std::vector<augment::ColorShiftParams>& shift_cache, const Hooks* hooks) {
  check_model_support(model, cfg);
  const int64_t res = x.shape[1];
  const int64_t e = cfg.augment.ensemble_size;

  IterationDraws draws;
  draws.lr = cosine_lr(cfg.learning_rate, iter, stage_iters);
  int64_t j = cfg.augment.jitter_max ? *cfg.augment.jitter_max : res / 8;
  draws.dx = rng.uniform_int(-j, j);
  draws.dy = rng.uniform_int(-j, j);

  if (iter % cfg.augment.color_shift_period == 0 ||
      shift_cache.size() != static_cast<size_t>(e)) {
    shift_cache.clear();
    for (int64_t n = 0; n < e; ++n) {
      shift_cache.push_back(
          augment::sample_color_shift(cfg.augment.alpha, cfg.augment.beta, 3, rng));
    }
  }
  draws.members = shift_cache;

  std::vector<BaselineAug> chain = baseline_chain(cfg.augment.baseline_augs);
  for (BaselineAug kind : chain) {
    std::vector<augment::BaselineAugDraw> kd;
    for (int64_t n = 0; n < e; ++n) kd.push_back(augment::sample_baseline_aug(kind, res, res, rng));
    draws.baseline.push_back(std::move(kd));
  }

  if (hooks && hooks->mutate_draws) hooks->mutate_draws(stage_index, iter, draws);

  ad::Graph g;
  ad::Value leaf = g.leaf(x, true);
  ad::Value cur = g.circular_shift(leaf, draws.dy, draws.dx);
  ad::Value batch = g.tile_batch(cur, e);
  for (const auto& kd : draws.baseline) batch = augment::apply_baseline_aug_batch(g, batch, kd);

  Tensor sig({e, 3}), mu({e, 3});
  for (int64_t n = 0; n < e; ++n)
    for (int64_t c = 0; c < 3; ++c) {
      sig.at(n, c) = draws.members[static_cast<size_t>(n)].sigma[static_cast<size_t>(c)];
      mu.at(n, c) = draws.members[static_cast<size_t>(n)].mu[static_cast<size_t>(c)];
    }
  batch = g.channel_affine_batch(batch, sig, mu);

  if (cfg.apply_normalization) {
    batch = g.channel_normalize(batch, model.normalization->mean, model.normalization->stdd);
  }
  int mres = model.input_resolution();
  if (mres > 0 && res != mres) batch = g.bilinear_resize(batch, mres, mres);

  models::ForwardResult fwd = model.net->forward(g, batch, false, false, nullptr);
  ad::Value nll =
      g.softmax_xent_mean(fwd.logits, std::vector<int>(static_cast<size_t>(e), cfg.target_class));

  // Regularizers act on the clean image, not on the augmented ensemble.
  std::vector<ad::Value> terms{nll};
  std::vector<double> weights{1.0};
  LossRecord rec;
  rec.stage = stage_index + 1;  // records and errors are 1-based for humans
  rec.iteration = iter;
  rec.lr = draws.lr;
  rec.nll = g.scalar(nll);
  if (cfg.weights.tv > 0.0) {
    ad::Value tv = g.total_variation(leaf);
    rec.tv = g.scalar(tv);
    terms.push_back(tv);
    weights.push_back(cfg.weights.tv);
  }
  if (cfg.weights.l2 > 0.0) {
    ad::Value l2 = g.l2_penalty(leaf);
    rec.l2 = g.scalar(l2);
    terms.push_back(l2);
    weights.push_back(cfg.weights.l2);
  }
  if (cfg.weights.feature > 0.0) {
    ad::Value clean = g.tile_batch(leaf, 1);
    if (cfg.apply_normalization) {
      clean = g.channel_normalize(clean, model.normalization->mean, model.normalization->stdd);
    }
    if (mres > 0 && res != mres) clean = g.bilinear_resize(clean, mres, mres);
    models::ForwardResult ref = model.net->forward(g, clean, false, false, nullptr);
    std::vector<ad::Value> parts;
    for (const models::BNTap& tap : ref.bn_taps) {
      parts.push_back(g.feature_match(tap.features, *tap.mean, *tap.var));
    }
    ad::Value feat = g.weighted_sum(parts, std::vector<double>(parts.size(), 1.0));
    rec.feat = g.scalar(feat);
    terms.push_back(feat);
    weights.push_back(cfg.weights.feature);
  }
  ad::Value total = g.weighted_sum(terms, weights);
  rec.total = g.scalar(total);

  if (!std::isfinite(rec.total)) {
    throw DivergenceError("loss is not finite", stage_index + 1, iter);
  }
  g.backward(total);
  const Tensor& grad = g.grad(leaf);
  if (!grad.all_finite()) {
    throw DivergenceError("image gradient is not finite", stage_index + 1, iter);
  }

  ++opt.step;
  double corr1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(opt.step));
  double corr2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(opt.step));
  for (int64_t k = 0; k < x.numel(); ++k) {
    double gk = grad[k];
    opt.m[k] = cfg.adam_beta1 * opt.m[k] + (1.0 - cfg.adam_beta1) * gk;
    opt.v[k] = cfg.adam_beta2 * opt.v[k] + (1.0 - cfg.adam_beta2) * gk * gk;
    x[k] -= draws.lr * (opt.m[k] / corr1) / (std::sqrt(opt.v[k] / corr2) + kAdamEps);
  }
  return rec;
}

void run_stage(const models::ClassifierHandle& model, const InversionConfig& cfg, int stage_index,
               Tensor& x, Rng& rng, std::vector<LossRecord>& trace, const Hooks* hooks) {
  OptimizerState opt;
  opt.reset(x.shape);
  std::vector<augment::ColorShiftParams> shift_cache;
  for (int64_t i = 0; i < cfg.iterations_per_stage; ++i) {
    LossRecord rec =
        step(model, cfg, stage_index, i, cfg.iterations_per_stage, x, opt, rng, shift_cache, hooks);
    if (hooks && hooks->on_record) hooks->on_record(rec);
    trace.push_back(rec);
  }
}

InversionResult invert(const models::ClassifierHandle& model, const InversionConfig& cfg,
                       const Hooks* hooks) {
  ensure_valid(cfg);
  if (cfg.target_class >= model.num_classes()) {
    throw ConfigError("target_class " + std::to_string(cfg.target_class) +
                      " is out of range for model '" + model.name + "' with " +
                      std::to_string(model.num_classes()) + " classes");
  }
  check_model_support(model, cfg);

  auto t0 = std::chrono::steady_clock::now();
  Rng rng(cfg.seed);
  int64_t r0 = cfg.stage_plan.initial_resolution;
  Tensor x({3, r0, r0});
  for (int64_t k = 0; k < x.numel(); ++k) x[k] = rng.normal();

  InversionResult result;
  result.config = cfg;
  result.seed = cfg.seed;
  for (size_t s = 0; s < cfg.stage_plan.stages.size(); ++s) {
    const StageSpec& spec = cfg.stage_plan.stages[s];
    x = schedule::upsample(x, spec.upsample_to);
    x = schedule::pad_with_noise(x, spec.pad_to, rng);
    run_stage(model, cfg, static_cast<int>(s), x, rng, result.loss_trace, hooks);
  }
  result.image.pixels = std::move(x);
  auto t1 = std::chrono::steady_clock::now();
  result.elapsed_seconds = std::chrono::duration<double>(t1 - t0).count();
  return result;
}

std::string trace_to_jsonl(const std::vector<LossRecord>& trace) {
  std::ostringstream os;
  os.precision(17);
  for (const LossRecord& r : trace) {
    os << "{\"stage\":" << r.stage << ",\"iteration\":" << r.iteration << ",\"lr\":" << r.lr
       << ",\"nll\":" << r.nll << ",\"tv\":" << r.tv << ",\"l2\":" << r.l2 << ",\"feat\":" << r.feat
       << ",\"total\":" << r.total << "}\n";
  }
  return os.str();
}

}  // namespace pii::engine
