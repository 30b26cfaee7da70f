#include "pii/regularizers.hpp"

#include "pii/autodiff.hpp"
#include "pii/errors.hpp"

namespace pii::regularizers {

namespace {

void check_feature_args(const std::vector<Tensor>& acts, const std::vector<LayerStats>& stats) {
  if (stats.empty()) {
    throw CapabilityError(
        "feature regularizer requires stored batch statistics; the model exposes none");
  }
  if (acts.size() != stats.size()) {
    throw ShapeError("feature regularizer: " + std::to_string(acts.size()) +
                     " activation tensors vs " + std::to_string(stats.size()) + " stat entries");
  }
  for (size_t k = 0; k < acts.size(); ++k) {
    const Tensor& a = acts[k];
    if (a.rank() != 4 && a.rank() != 2) {
      throw ShapeError("feature regularizer: layer " + std::to_string(k) +
                       " activations must be [N,C,H,W] or [N,C], got " + a.shape_str());
    }
    int64_t c = a.shape[1];
    if (stats[k].mean.numel() != c || stats[k].var.numel() != c) {
      throw ShapeError("feature regularizer: layer " + std::to_string(k) + " has " +
                       std::to_string(c) + " channels but stored stats have " +
                       std::to_string(stats[k].mean.numel()));
    }
  }
}

}  // namespace

double total_variation(const Tensor& chw) {
  ad::Graph g;
  return g.scalar(g.total_variation(g.leaf(chw)));
}

Tensor total_variation_grad(const Tensor& chw) {
  ad::Graph g;
  ad::Value x = g.leaf(chw, true);
  g.backward(g.total_variation(x));
  return g.grad(x);
}

double l2_penalty(const Tensor& t) {
  ad::Graph g;
  return g.scalar(g.l2_penalty(g.leaf(t)));
}

Tensor l2_penalty_grad(const Tensor& t) {
  ad::Graph g;
  ad::Value x = g.leaf(t, true);
  g.backward(g.l2_penalty(x));
  return g.grad(x);
}

double feature_regularizer(const std::vector<Tensor>& batch_activations,
                           const std::vector<LayerStats>& stats) {
  check_feature_args(batch_activations, stats);
  ad::Graph g;
  double total = 0.0;
  for (size_t k = 0; k < batch_activations.size(); ++k) {
    total += g.scalar(g.feature_match(g.leaf(batch_activations[k]), stats[k].mean, stats[k].var));
  }
  return total;
}

std::vector<Tensor> feature_regularizer_grad(const std::vector<Tensor>& batch_activations,
                                             const std::vector<LayerStats>& stats) {
  check_feature_args(batch_activations, stats);
  std::vector<Tensor> grads;
  grads.reserve(batch_activations.size());
  for (size_t k = 0; k < batch_activations.size(); ++k) {
    ad::Graph g;
    ad::Value a = g.leaf(batch_activations[k], true);
    g.backward(g.feature_match(a, stats[k].mean, stats[k].var));
    grads.push_back(g.grad(a));
  }
  return grads;
}

double compose_loss(double nll, const RegularizerWeights& weights,
                    const RegularizerValues& values) {
  return nll + weights.tv * values.tv + weights.l2 * values.l2 + weights.feature * values.feature;
}

}  // namespace pii::regularizers
