#pragma once

#include <vector>

#include "pii/config.hpp"
#include "pii/tensor.hpp"

namespace pii::regularizers {

// Stored per-channel statistics of one layer (batch-norm running stats).
struct LayerStats {
  Tensor mean;  // [C]
  Tensor var;   // [C]
};

struct RegularizerValues {
  double tv = 0.0;
  double l2 = 0.0;
  double feature = 0.0;
};

// Four-direction total variation: one square root per direction (vertical,
// horizontal, main diagonal, anti-diagonal), each over the sum of squared
// differences across all channels and positions.
double total_variation(const Tensor& chw);
Tensor total_variation_grad(const Tensor& chw);

// Squared l2 norm of all entries.
double l2_penalty(const Tensor& t);
Tensor l2_penalty_grad(const Tensor& t);

// Sum over layers of ||mu(act) - mu_stored||_2 + ||var(act) - var_stored||_2
// with statistics pooled over batch and spatial dimensions (population
// variance, matching batch-norm semantics).
double feature_regularizer(const std::vector<Tensor>& batch_activations,
                           const std::vector<LayerStats>& stats);
std::vector<Tensor> feature_regularizer_grad(const std::vector<Tensor>& batch_activations,
                                             const std::vector<LayerStats>& stats);

double compose_loss(double nll, const RegularizerWeights& weights, const RegularizerValues& values);

}  // namespace pii::regularizers
