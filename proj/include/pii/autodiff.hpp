#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "pii/tensor.hpp"

namespace pii::ad {

// Handle into a Graph's tape. Default-constructed handles mean "absent"
// (used for optional biases).
struct Value {
  int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

struct CropRect {
  int64_t top = 0, left = 0, height = 0, width = 0;
};

// Reverse-mode tape over Tensor. A Graph is built per optimization step
// (define-by-run), backward() walks the tape once in reverse creation
// order. Single-threaded; evaluation order is fixed, so runs with the same
// inputs are bitwise reproducible.
class Graph {
 public:
  Value leaf(Tensor v, bool requires_grad = false);

  const Tensor& val(Value v) const { return node(v).val; }
  const Tensor& grad(Value v);  // zeros if the node received no contribution
  bool requires_grad(Value v) const { return node(v).rg; }
  double scalar(Value v) const;

  void backward(Value root);

  // arithmetic
  Value add(Value a, Value b);
  Value scale(Value a, double c);
  Value weighted_sum(const std::vector<Value>& xs, const std::vector<double>& ws);
  Value relu(Value a);
  Value gelu(Value a);

  // dense / attention building blocks
  Value linear(Value x, Value w, Value b);  // x [..., F], w [F, G], b [G] or absent
  Value bmm(Value a, Value b);              // [B,m,k] x [B,k,n] -> [B,m,n]
  Value transpose_last2(Value a);
  Value softmax_lastdim(Value a);
  Value layernorm_lastdim(Value x, Value gamma, Value beta, double eps = 1e-5);
  Value add_broadcast_batch(Value x, Value p);  // x [N, rest...], p [rest...]
  Value reshape(Value x, std::vector<int64_t> shape);
  Value mean_tokens(Value x);  // [N,T,D] -> [N,D]

  // conv nets (NCHW)
  Value conv2d(Value x, Value w, Value b, int stride, int pad);
  Value batchnorm2d(Value x, Value gamma, Value beta, Tensor* run_mean, Tensor* run_var,
                    bool training, double momentum = 0.1, double eps = 1e-5);
  Value global_avg_pool(Value x);  // [N,C,H,W] -> [N,C]

  // classification loss: mean softmax cross-entropy over the batch
  Value softmax_xent_mean(Value logits, std::vector<int> labels);

  // image-space ops (NCHW unless noted)
  Value bilinear_resize(Value x, int64_t out_h, int64_t out_w);
  Value circular_shift(Value x, int64_t dy, int64_t dx);  // [C,H,W] or [N,C,H,W]
  Value tile_batch(Value x, int64_t n);                   // [C,H,W] -> [n,C,H,W]
  // out[n,c,:,:] = sig(n,c) * x[n,c,:,:] - mu(n,c); sig/mu are [N,C] constants
  Value channel_affine_batch(Value x, const Tensor& sig, const Tensor& mu);
  Value channel_normalize(Value x, const std::vector<double>& mean,
                          const std::vector<double>& stdd);
  Value crop_resize_batch(Value x, const std::vector<CropRect>& rects);
  Value flip_h_batch(Value x, const std::vector<uint8_t>& mask);
  Value color_matrix_batch(Value x, const Tensor& m);  // m [N,3,3] constant
  Value mean_chw(Value x);                             // [N,C,H,W] -> [N]
  // out[n] = c[n] * x[n] + (1 - c[n]) * s[n], s is a [N] Value
  Value blend_with_scalar_batch(Value x, const std::vector<double>& c, Value s);

  // regularizer terms (scalar outputs)
  Value total_variation(Value x);  // [C,H,W]
  Value l2_penalty(Value x);
  Value feature_match(Value act, const Tensor& t_mean, const Tensor& t_var);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor val;
    Tensor grad;  // empty until touched during backward
    bool rg = false;
    std::function<void(Graph&)> back;
  };

  const Node& node(Value v) const { return nodes_[static_cast<size_t>(v.idx)]; }
  Node& node(Value v) { return nodes_[static_cast<size_t>(v.idx)]; }
  Value push(Tensor val, bool rg, std::function<void(Graph&)> back);
  Tensor& grad_buf(int32_t idx);
  bool grad_live(int32_t idx) const {
    return !nodes_[static_cast<size_t>(idx)].grad.data.empty();
  }

  std::vector<Node> nodes_;
};

}  // namespace pii::ad
