#include "pii/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pii/errors.hpp"

namespace pii::models {

namespace {

using nlohmann::json;

constexpr int kPatch = 8;
constexpr int kTokenDim = 32;
constexpr int kFixedInput = 32;

struct ConvParam {
  Tensor w;  // [O, C, kh, kw]
  Tensor b;  // [O] (may be empty)
};

struct BnParam {
  Tensor gamma, beta, run_mean, run_var;
};

struct LinParam {
  Tensor w;  // [F, G]
  Tensor b;  // [G]
};

void init_uniform(Tensor& t, double bound, Rng& rng) {
  for (double& v : t.data) v = rng.uniform(-bound, bound);
}

ConvParam make_conv(int64_t out_c, int64_t in_c, int64_t k, bool bias, Rng& rng) {
  ConvParam p;
  p.w = Tensor({out_c, in_c, k, k});
  double bound = 1.0 / std::sqrt(static_cast<double>(in_c * k * k));
  init_uniform(p.w, bound, rng);
  if (bias) {
    p.b = Tensor({out_c});
    init_uniform(p.b, bound, rng);
  }
  return p;
}

BnParam make_bn(int64_t c) {
  BnParam p;
  p.gamma = Tensor::full({c}, 1.0);
  p.beta = Tensor({c});
  p.run_mean = Tensor({c});
  p.run_var = Tensor::full({c}, 1.0);
  return p;
}

LinParam make_lin(int64_t f, int64_t g, Rng& rng) {
  LinParam p;
  p.w = Tensor({f, g});
  double bound = 1.0 / std::sqrt(static_cast<double>(f));
  init_uniform(p.w, bound, rng);
  p.b = Tensor({g});
  init_uniform(p.b, bound, rng);
  return p;
}

struct LnParam {
  Tensor gamma, beta;
};

LnParam make_ln(int64_t d) {
  LnParam p;
  p.gamma = Tensor::full({d}, 1.0);
  p.beta = Tensor({d});
  return p;
}

ad::Value reg(ad::Graph& g, Tensor& t, bool trainable, ParamBind* bind) {
  ad::Value v = g.leaf(t, trainable);
  if (bind) bind->push_back({&t, v});
  return v;
}

class CnnBn final : public Network {
 public:
  CnnBn(int num_classes, uint64_t seed) : classes_(num_classes) {
    Rng rng(derive_seed(seed, 0x10));
    conv1_ = make_conv(16, 3, 3, false, rng);
    conv2_ = make_conv(32, 16, 3, false, rng);
    conv3_ = make_conv(64, 32, 3, false, rng);
    bn1_ = make_bn(16);
    bn2_ = make_bn(32);
    bn3_ = make_bn(64);
    fc_ = make_lin(64, classes_, rng);
  }

  Arch arch() const override { return Arch::cnn_bn; }
  int num_classes() const override { return classes_; }
  int input_resolution() const override { return -1; }
  bool has_bn_stats() const override { return true; }

  ForwardResult forward(ad::Graph& g, ad::Value x, bool training, bool trainable,
                        ParamBind* bind) override {
    ForwardResult r;
    ad::Value c1 = g.conv2d(x, reg(g, conv1_.w, trainable, bind), {}, 1, 1);
    r.bn_taps.push_back({c1, &bn1_.run_mean, &bn1_.run_var});
    ad::Value h = g.relu(g.batchnorm2d(c1, reg(g, bn1_.gamma, trainable, bind),
                                       reg(g, bn1_.beta, trainable, bind), &bn1_.run_mean,
                                       &bn1_.run_var, training));
    ad::Value c2 = g.conv2d(h, reg(g, conv2_.w, trainable, bind), {}, 2, 1);
    r.bn_taps.push_back({c2, &bn2_.run_mean, &bn2_.run_var});
    h = g.relu(g.batchnorm2d(c2, reg(g, bn2_.gamma, trainable, bind),
                             reg(g, bn2_.beta, trainable, bind), &bn2_.run_mean, &bn2_.run_var,
                             training));
    ad::Value c3 = g.conv2d(h, reg(g, conv3_.w, trainable, bind), {}, 2, 1);
    r.bn_taps.push_back({c3, &bn3_.run_mean, &bn3_.run_var});
    h = g.relu(g.batchnorm2d(c3, reg(g, bn3_.gamma, trainable, bind),
                             reg(g, bn3_.beta, trainable, bind), &bn3_.run_mean, &bn3_.run_var,
                             training));
    h = g.global_avg_pool(h);
    r.logits = g.linear(h, reg(g, fc_.w, trainable, bind), reg(g, fc_.b, trainable, bind));
    return r;
  }

  std::vector<std::pair<std::string, Tensor*>> named_tensors() override {
    return {{"conv1.w", &conv1_.w},        {"conv2.w", &conv2_.w},
            {"conv3.w", &conv3_.w},        {"bn1.gamma", &bn1_.gamma},
            {"bn1.beta", &bn1_.beta},      {"bn2.gamma", &bn2_.gamma},
            {"bn2.beta", &bn2_.beta},      {"bn3.gamma", &bn3_.gamma},
            {"bn3.beta", &bn3_.beta},      {"fc.w", &fc_.w},
            {"fc.b", &fc_.b},              {"bn1.run_mean", &bn1_.run_mean},
            {"bn1.run_var", &bn1_.run_var}, {"bn2.run_mean", &bn2_.run_mean},
            {"bn2.run_var", &bn2_.run_var}, {"bn3.run_mean", &bn3_.run_mean},
            {"bn3.run_var", &bn3_.run_var}};
  }

  std::vector<Tensor*> parameters() override {
    return {&conv1_.w, &conv2_.w, &conv3_.w, &bn1_.gamma, &bn1_.beta, &bn2_.gamma,
            &bn2_.beta, &bn3_.gamma, &bn3_.beta, &fc_.w, &fc_.b};
  }

  std::vector<regularizers::LayerStats> bn_stats() const override {
    return {{bn1_.run_mean, bn1_.run_var},
            {bn2_.run_mean, bn2_.run_var},
            {bn3_.run_mean, bn3_.run_var}};
  }

 private:
  int classes_;
  ConvParam conv1_, conv2_, conv3_;
  BnParam bn1_, bn2_, bn3_;
  LinParam fc_;
};

void check_fixed_input(const Tensor& x, int res, const std::string& what) {
  if (x.shape[2] != res || x.shape[3] != res) {
    throw CapabilityError(what + " requires " + std::to_string(res) + "x" + std::to_string(res) +
                          " inputs (patch size " + std::to_string(kPatch) + "); got " +
                          x.shape_str() + " - use the resize adapter");
  }
}

class TinyAttention final : public Network {
 public:
  TinyAttention(int num_classes, uint64_t seed) : classes_(num_classes) {
    Rng rng(derive_seed(seed, 0x20));
    patch_ = make_conv(kTokenDim, 3, kPatch, true, rng);
    int64_t t = (kFixedInput / kPatch) * (kFixedInput / kPatch);
    pos_ = Tensor({t, kTokenDim});
    for (double& v : pos_.data) v = 0.02 * rng.normal();
    for (int b = 0; b < 2; ++b) {
      blocks_.push_back(Block{
          make_ln(kTokenDim), make_lin(kTokenDim, kTokenDim, rng),
          make_lin(kTokenDim, kTokenDim, rng), make_lin(kTokenDim, kTokenDim, rng),
          make_lin(kTokenDim, kTokenDim, rng), make_ln(kTokenDim),
          make_lin(kTokenDim, 2 * kTokenDim, rng), make_lin(2 * kTokenDim, kTokenDim, rng)});
    }
    ln_out_ = make_ln(kTokenDim);
    head_ = make_lin(kTokenDim, classes_, rng);
  }

  Arch arch() const override { return Arch::tiny_attention; }
  int num_classes() const override { return classes_; }
  int input_resolution() const override { return kFixedInput; }
  bool has_bn_stats() const override { return false; }

  ForwardResult forward(ad::Graph& g, ad::Value x, bool, bool trainable,
                        ParamBind* bind) override {
    check_fixed_input(g.val(x), kFixedInput, "tiny_attention");
    int64_t n = g.val(x).shape[0];
    int64_t gh = kFixedInput / kPatch;
    int64_t t = gh * gh;
    ad::Value h = g.conv2d(x, reg(g, patch_.w, trainable, bind),
                           reg(g, patch_.b, trainable, bind), kPatch, 0);
    h = g.reshape(h, {n, kTokenDim, t});
    h = g.transpose_last2(h);  // [N, T, D]
    h = g.add_broadcast_batch(h, reg(g, pos_, trainable, bind));
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(kTokenDim));
    for (Block& b : blocks_) {
      ad::Value hn = g.layernorm_lastdim(h, reg(g, b.ln1.gamma, trainable, bind),
                                         reg(g, b.ln1.beta, trainable, bind));
      ad::Value q = g.linear(hn, reg(g, b.wq.w, trainable, bind), reg(g, b.wq.b, trainable, bind));
      ad::Value k = g.linear(hn, reg(g, b.wk.w, trainable, bind), reg(g, b.wk.b, trainable, bind));
      ad::Value v = g.linear(hn, reg(g, b.wv.w, trainable, bind), reg(g, b.wv.b, trainable, bind));
      ad::Value scores = g.scale(g.bmm(q, g.transpose_last2(k)), inv_sqrt_d);
      ad::Value att = g.softmax_lastdim(scores);
      ad::Value o = g.bmm(att, v);
      o = g.linear(o, reg(g, b.wo.w, trainable, bind), reg(g, b.wo.b, trainable, bind));
      h = g.add(h, o);
      ad::Value h2 = g.layernorm_lastdim(h, reg(g, b.ln2.gamma, trainable, bind),
                                         reg(g, b.ln2.beta, trainable, bind));
      ad::Value m = g.linear(
          g.gelu(g.linear(h2, reg(g, b.w1.w, trainable, bind), reg(g, b.w1.b, trainable, bind))),
          reg(g, b.w2.w, trainable, bind), reg(g, b.w2.b, trainable, bind));
      h = g.add(h, m);
    }
    h = g.layernorm_lastdim(h, reg(g, ln_out_.gamma, trainable, bind),
                            reg(g, ln_out_.beta, trainable, bind));
    h = g.mean_tokens(h);
    ForwardResult r;
    r.logits = g.linear(h, reg(g, head_.w, trainable, bind), reg(g, head_.b, trainable, bind));
    return r;
  }

  std::vector<std::pair<std::string, Tensor*>> named_tensors() override {
    std::vector<std::pair<std::string, Tensor*>> out = {{"patch.w", &patch_.w},
                                                        {"patch.b", &patch_.b},
                                                        {"pos", &pos_}};
    for (size_t i = 0; i < blocks_.size(); ++i) {
      Block& b = blocks_[i];
      std::string p = "block" + std::to_string(i) + ".";
      out.push_back({p + "ln1.gamma", &b.ln1.gamma});
      out.push_back({p + "ln1.beta", &b.ln1.beta});
      out.push_back({p + "wq.w", &b.wq.w});
      out.push_back({p + "wq.b", &b.wq.b});
      out.push_back({p + "wk.w", &b.wk.w});
      out.push_back({p + "wk.b", &b.wk.b});
      out.push_back({p + "wv.w", &b.wv.w});
      out.push_back({p + "wv.b", &b.wv.b});
      out.push_back({p + "wo.w", &b.wo.w});
      out.push_back({p + "wo.b", &b.wo.b});
      out.push_back({p + "ln2.gamma", &b.ln2.gamma});
      out.push_back({p + "ln2.beta", &b.ln2.beta});
      out.push_back({p + "mlp1.w", &b.w1.w});
      out.push_back({p + "mlp1.b", &b.w1.b});
      out.push_back({p + "mlp2.w", &b.w2.w});
      out.push_back({p + "mlp2.b", &b.w2.b});
    }
    out.push_back({"ln_out.gamma", &ln_out_.gamma});
    out.push_back({"ln_out.beta", &ln_out_.beta});
    out.push_back({"head.w", &head_.w});
    out.push_back({"head.b", &head_.b});
    return out;
  }

  std::vector<Tensor*> parameters() override {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_tensors()) out.push_back(t);
    return out;
  }

  std::vector<regularizers::LayerStats> bn_stats() const override { return {}; }

 private:
  struct Block {
    LnParam ln1;
    LinParam wq, wk, wv, wo;
    LnParam ln2;
    LinParam w1, w2;
  };
  int classes_;
  ConvParam patch_;
  Tensor pos_;
  std::vector<Block> blocks_;
  LnParam ln_out_;
  LinParam head_;
};

class TinyMixer final : public Network {
 public:
  TinyMixer(int num_classes, uint64_t seed) : classes_(num_classes) {
    Rng rng(derive_seed(seed, 0x30));
    patch_ = make_conv(kTokenDim, 3, kPatch, true, rng);
    int64_t t = (kFixedInput / kPatch) * (kFixedInput / kPatch);
    tokens_ = t;
    for (int b = 0; b < 2; ++b) {
      blocks_.push_back(Block{make_ln(kTokenDim), make_lin(t, 2 * t, rng),
                              make_lin(2 * t, t, rng), make_ln(kTokenDim),
                              make_lin(kTokenDim, 2 * kTokenDim, rng),
                              make_lin(2 * kTokenDim, kTokenDim, rng)});
    }
    ln_out_ = make_ln(kTokenDim);
    head_ = make_lin(kTokenDim, classes_, rng);
  }

  Arch arch() const override { return Arch::tiny_mixer; }
  int num_classes() const override { return classes_; }
  int input_resolution() const override { return kFixedInput; }
  bool has_bn_stats() const override { return false; }

  ForwardResult forward(ad::Graph& g, ad::Value x, bool, bool trainable,
                        ParamBind* bind) override {
    check_fixed_input(g.val(x), kFixedInput, "tiny_mixer");
    int64_t n = g.val(x).shape[0];
    ad::Value h = g.conv2d(x, reg(g, patch_.w, trainable, bind),
                           reg(g, patch_.b, trainable, bind), kPatch, 0);
    h = g.reshape(h, {n, kTokenDim, tokens_});
    h = g.transpose_last2(h);  // [N, T, D]
    for (Block& b : blocks_) {
      ad::Value hn = g.layernorm_lastdim(h, reg(g, b.ln1.gamma, trainable, bind),
                                         reg(g, b.ln1.beta, trainable, bind));
      ad::Value ht = g.transpose_last2(hn);  // [N, D, T]
      ad::Value tm = g.linear(
          g.gelu(g.linear(ht, reg(g, b.t1.w, trainable, bind), reg(g, b.t1.b, trainable, bind))),
          reg(g, b.t2.w, trainable, bind), reg(g, b.t2.b, trainable, bind));
      h = g.add(h, g.transpose_last2(tm));
      ad::Value h2 = g.layernorm_lastdim(h, reg(g, b.ln2.gamma, trainable, bind),
                                         reg(g, b.ln2.beta, trainable, bind));
      ad::Value cm = g.linear(
          g.gelu(g.linear(h2, reg(g, b.c1.w, trainable, bind), reg(g, b.c1.b, trainable, bind))),
          reg(g, b.c2.w, trainable, bind), reg(g, b.c2.b, trainable, bind));
      h = g.add(h, cm);
    }
    h = g.layernorm_lastdim(h, reg(g, ln_out_.gamma, trainable, bind),
                            reg(g, ln_out_.beta, trainable, bind));
    h = g.mean_tokens(h);
    ForwardResult r;
    r.logits = g.linear(h, reg(g, head_.w, trainable, bind), reg(g, head_.b, trainable, bind));
    return r;
  }

  std::vector<std::pair<std::string, Tensor*>> named_tensors() override {
    std::vector<std::pair<std::string, Tensor*>> out = {{"patch.w", &patch_.w},
                                                        {"patch.b", &patch_.b}};
    for (size_t i = 0; i < blocks_.size(); ++i) {
      Block& b = blocks_[i];
      std::string p = "block" + std::to_string(i) + ".";
      out.push_back({p + "ln1.gamma", &b.ln1.gamma});
      out.push_back({p + "ln1.beta", &b.ln1.beta});
      out.push_back({p + "tok1.w", &b.t1.w});
      out.push_back({p + "tok1.b", &b.t1.b});
      out.push_back({p + "tok2.w", &b.t2.w});
      out.push_back({p + "tok2.b", &b.t2.b});
      out.push_back({p + "ln2.gamma", &b.ln2.gamma});
      out.push_back({p + "ln2.beta", &b.ln2.beta});
      out.push_back({p + "chan1.w", &b.c1.w});
      out.push_back({p + "chan1.b", &b.c1.b});
      out.push_back({p + "chan2.w", &b.c2.w});
      out.push_back({p + "chan2.b", &b.c2.b});
    }
    out.push_back({"ln_out.gamma", &ln_out_.gamma});
    out.push_back({"ln_out.beta", &ln_out_.beta});
    out.push_back({"head.w", &head_.w});
    out.push_back({"head.b", &head_.b});
    return out;
  }

  std::vector<Tensor*> parameters() override {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_tensors()) out.push_back(t);
    return out;
  }

  std::vector<regularizers::LayerStats> bn_stats() const override { return {}; }

 private:
  struct Block {
    LnParam ln1;
    LinParam t1, t2;
    LnParam ln2;
    LinParam c1, c2;
  };
  int classes_;
  ConvParam patch_;
  int64_t tokens_;
  std::vector<Block> blocks_;
  LnParam ln_out_;
  LinParam head_;
};

class TwoLayer final : public Network {
 public:
  TwoLayer(int input_resolution, int hidden, int num_classes, uint64_t seed)
      : res_(input_resolution), classes_(num_classes) {
    Rng rng(derive_seed(seed, 0x40));
    fc1_ = make_lin(3 * res_ * res_, hidden, rng);
    fc2_ = make_lin(hidden, classes_, rng);
  }

  Arch arch() const override { return Arch::cnn_bn; }  // not persisted; arch tag unused
  int num_classes() const override { return classes_; }
  int input_resolution() const override { return res_; }
  bool has_bn_stats() const override { return false; }

  ForwardResult forward(ad::Graph& g, ad::Value x, bool, bool trainable,
                        ParamBind* bind) override {
    const Tensor& tx = g.val(x);
    if (tx.shape[2] != res_ || tx.shape[3] != res_) {
      throw CapabilityError("two_layer model requires " + std::to_string(res_) + "x" +
                            std::to_string(res_) + " inputs; got " + tx.shape_str() +
                            " - use the resize adapter");
    }
    int64_t n = tx.shape[0];
    ad::Value h = g.reshape(x, {n, 3 * res_ * res_});
    h = g.relu(g.linear(h, reg(g, fc1_.w, trainable, bind), reg(g, fc1_.b, trainable, bind)));
    ForwardResult r;
    r.logits = g.linear(h, reg(g, fc2_.w, trainable, bind), reg(g, fc2_.b, trainable, bind));
    return r;
  }

  std::vector<std::pair<std::string, Tensor*>> named_tensors() override {
    return {{"fc1.w", &fc1_.w}, {"fc1.b", &fc1_.b}, {"fc2.w", &fc2_.w}, {"fc2.b", &fc2_.b}};
  }

  std::vector<Tensor*> parameters() override {
    return {&fc1_.w, &fc1_.b, &fc2_.w, &fc2_.b};
  }

  std::vector<regularizers::LayerStats> bn_stats() const override { return {}; }

 private:
  int64_t res_;
  int classes_;
  LinParam fc1_, fc2_;
};

std::string alias_for(Arch a) {
  switch (a) {
    case Arch::cnn_bn: return "toy-cnn";
    case Arch::tiny_attention: return "toy-attention";
    case Arch::tiny_mixer: return "toy-mixer";
  }
  return "toy-cnn";
}

}  // namespace

std::string to_string(Arch a) {
  switch (a) {
    case Arch::cnn_bn: return "cnn_bn";
    case Arch::tiny_attention: return "tiny_attention";
    case Arch::tiny_mixer: return "tiny_mixer";
  }
  return "cnn_bn";
}

Arch arch_from_string(const std::string& s) {
  if (s == "cnn_bn") return Arch::cnn_bn;
  if (s == "tiny_attention") return Arch::tiny_attention;
  if (s == "tiny_mixer") return Arch::tiny_mixer;
  throw ConfigError("unknown architecture '" + s +
                    "' (expected cnn_bn, tiny_attention or tiny_mixer)");
}

std::shared_ptr<Network> make_network(Arch arch, int num_classes, uint64_t seed) {
  if (num_classes < 2) throw ParameterError("num_classes must be >= 2");
  switch (arch) {
    case Arch::cnn_bn: return std::make_shared<CnnBn>(num_classes, seed);
    case Arch::tiny_attention: return std::make_shared<TinyAttention>(num_classes, seed);
    case Arch::tiny_mixer: return std::make_shared<TinyMixer>(num_classes, seed);
  }
  throw ParameterError("unknown architecture");
}

std::shared_ptr<Network> make_two_layer(int input_resolution, int hidden, int num_classes,
                                        uint64_t seed) {
  if (num_classes < 2) throw ParameterError("num_classes must be >= 2");
  if (input_resolution < 1 || hidden < 1) throw ParameterError("bad two_layer dimensions");
  return std::make_shared<TwoLayer>(input_resolution, hidden, num_classes, seed);
}

Tensor forward_scores(const ClassifierHandle& h, const Tensor& batch_nchw, bool allow_resize) {
  if (batch_nchw.rank() != 4 || batch_nchw.shape[1] != 3) {
    throw ShapeError("forward_scores expects an [N,3,H,W] batch, got " + batch_nchw.shape_str());
  }
  ad::Graph g;
  ad::Value x = g.leaf(batch_nchw, false);
  int res = h.input_resolution();
  if (res > 0 && (batch_nchw.shape[2] != res || batch_nchw.shape[3] != res)) {
    if (!allow_resize) {
      throw CapabilityError(h.name + " requires " + std::to_string(res) + "x" +
                            std::to_string(res) + " inputs and the resize adapter is disabled");
    }
    x = g.bilinear_resize(x, res, res);
  }
  ForwardResult r = h.net->forward(g, x, false, false, nullptr);
  return g.val(r.logits);
}

Tensor apply_normalization(const Tensor& t, const Normalization& n) {
  bool batched = t.rank() == 4;
  if (!batched && t.rank() != 3) {
    throw ShapeError("apply_normalization expects CHW or NCHW, got " + t.shape_str());
  }
  int64_t c = batched ? t.shape[1] : t.shape[0];
  if (static_cast<int64_t>(n.mean.size()) != c || static_cast<int64_t>(n.stdd.size()) != c) {
    throw ShapeError("apply_normalization: stats have " + std::to_string(n.mean.size()) +
                     " channels, tensor has " + std::to_string(c));
  }
  for (double s : n.stdd) {
    if (!(s > 0.0)) throw ParameterError("apply_normalization: std must be positive");
  }
  int64_t batch = batched ? t.shape[0] : 1;
  int64_t hw = t.numel() / (batch * c);
  Tensor out = t;
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t ci = 0; ci < c; ++ci) {
      double m = n.mean[static_cast<size_t>(ci)], s = n.stdd[static_cast<size_t>(ci)];
      double* p = out.data.data() + (b * c + ci) * hw;
      for (int64_t k = 0; k < hw; ++k) p[k] = (p[k] - m) / s;
    }
  return out;
}

namespace {

// Procedural 32x32 class patterns. Colors carry no class signal; only the
// spatial structure does.
void draw_synthetic(int cls, Rng& rng, double* img) {
  constexpr int R = 32;
  double bg[3], fg[3];
  for (int c = 0; c < 3; ++c) bg[c] = rng.uniform(0.05, 0.40);
  for (int c = 0; c < 3; ++c) fg[c] = rng.uniform(0.60, 0.95);
  if (rng.uniform() < 0.5) {
    for (int c = 0; c < 3; ++c) std::swap(bg[c], fg[c]);
  }

  double cy = 16.0 + rng.uniform(-3.0, 3.0);
  double cx = 16.0 + rng.uniform(-3.0, 3.0);
  double p1 = 0.0, p2 = 0.0;
  int64_t ip1 = 0, ip2 = 0, ip3 = 0;
  switch (cls) {
    case 0: p1 = rng.uniform(7.0, 10.0); break;                          // disk radius
    case 1:
      p1 = rng.uniform(9.0, 12.0);                                       // ring outer
      p2 = p1 - rng.uniform(3.0, 4.5);                                   // ring inner
      break;
    case 2: p1 = rng.uniform(6.0, 9.0); break;                           // square half side
    case 3: p1 = rng.uniform(2.0, 3.5); break;                           // cross bar half width
    case 4:
    case 5:
      ip1 = rng.uniform_int(5, 8);                                       // stripe period
      ip2 = rng.uniform_int(0, ip1 - 1);                                 // phase
      break;
    case 6: ip1 = rng.uniform_int(4, 6); break;                          // checker cell
    case 7:
      ip1 = rng.uniform_int(6, 9);
      ip2 = rng.uniform_int(0, ip1 - 1);
      break;
    case 8:
      ip1 = rng.uniform_int(6, 8);                                       // dot grid spacing
      ip2 = rng.uniform_int(0, ip1 - 1);
      ip3 = rng.uniform_int(0, ip1 - 1);
      break;
    case 9:
      p1 = rng.uniform(3.0, 5.0);                                        // band half width
      p2 = rng.uniform(-8.0, 8.0);                                       // band offset
      break;
    default: throw ParameterError("synthetic dataset has 10 classes");
  }

  for (int i = 0; i < R; ++i)
    for (int j = 0; j < R; ++j) {
      bool on = false;
      double dy = i - cy, dx = j - cx;
      switch (cls) {
        case 0: on = dy * dy + dx * dx <= p1 * p1; break;
        case 1: {
          double d2 = dy * dy + dx * dx;
          on = d2 <= p1 * p1 && d2 >= p2 * p2;
          break;
        }
        case 2: on = std::abs(dy) <= p1 && std::abs(dx) <= p1; break;
        case 3: on = std::abs(dy) <= p1 || std::abs(dx) <= p1; break;
        case 4: on = ((i + ip2) % ip1) < (ip1 + 1) / 2; break;
        case 5: on = ((j + ip2) % ip1) < (ip1 + 1) / 2; break;
        case 6: on = ((i / ip1) + (j / ip1)) % 2 == 0; break;
        case 7: on = ((i + j + ip2) % ip1) < (ip1 + 1) / 2; break;
        case 8: {
          int64_t di = (i + ip2) % ip1;
          int64_t dj = (j + ip3) % ip1;
          di = std::min(di, ip1 - di);
          dj = std::min(dj, ip1 - dj);
          on = di * di + dj * dj <= 5;
          break;
        }
        case 9: on = std::abs(static_cast<double>(i - j) + p2) <= p1; break;
      }
      for (int c = 0; c < 3; ++c) {
        double v = (on ? fg[c] : bg[c]) + 0.05 * rng.normal();
        img[(c * R + i) * R + j] = std::clamp(v, 0.0, 1.0);
      }
    }
}

}  // namespace

Dataset make_synthetic_dataset(int64_t count, uint64_t seed) {
  if (count < 1) throw ParameterError("dataset size must be >= 1");
  Dataset d;
  d.name = "synthetic";
  d.num_classes = 10;
  d.images = Tensor({count, 3, 32, 32});
  d.labels.resize(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    int cls = static_cast<int>(i % 10);
    d.labels[static_cast<size_t>(i)] = cls;
    Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
    draw_synthetic(cls, rng, d.images.data.data() + i * 3 * 32 * 32);
  }
  return d;
}

Dataset load_cifar10(const std::string& data_dir, bool train) {
  std::string base = data_dir + "/cifar-10-batches-bin/";
  std::vector<std::string> files;
  if (train) {
    for (int i = 1; i <= 5; ++i) files.push_back(base + "data_batch_" + std::to_string(i) + ".bin");
  } else {
    files.push_back(base + "test_batch.bin");
  }
  constexpr int64_t kRecord = 3073;
  constexpr int64_t kPerFile = 10000;
  Dataset d;
  d.name = "cifar10";
  d.num_classes = 10;
  int64_t total = kPerFile * static_cast<int64_t>(files.size());
  d.images = Tensor({total, 3, 32, 32});
  d.labels.resize(static_cast<size_t>(total));
  int64_t at = 0;
  for (const std::string& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) {
      throw IngestionError(
          "CIFAR-10 archive '" + f + "' not found. Download " +
          "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz and extract it into '" +
          data_dir + "' (tar -xzf cifar-10-binary.tar.gz -C " + data_dir +
          "), or set the data directory with --data-dir / PII_DATA_DIR.");
    }
    std::vector<unsigned char> buf(static_cast<size_t>(kRecord));
    for (int64_t r = 0; r < kPerFile; ++r, ++at) {
      in.read(reinterpret_cast<char*>(buf.data()), kRecord);
      if (!in) throw IngestionError("CIFAR-10 archive '" + f + "' is truncated");
      d.labels[static_cast<size_t>(at)] = buf[0];
      for (int64_t k = 0; k < 3072; ++k)
        d.images.data[static_cast<size_t>(at * 3072 + k)] =
            static_cast<double>(buf[static_cast<size_t>(1 + k)]) / 255.0;
    }
  }
  return d;
}

DatasetPair load_dataset(const std::string& name, const std::string& data_dir) {
  if (name == "synthetic") {
    constexpr uint64_t kDataSeed = 0xDA7A5E7;  // fixed: all models share the same data
    return {make_synthetic_dataset(2000, derive_seed(kDataSeed, 0)),
            make_synthetic_dataset(500, derive_seed(kDataSeed, 1))};
  }
  if (name == "cifar10") {
    return {load_cifar10(data_dir, true), load_cifar10(data_dir, false)};
  }
  throw IngestionError("unknown dataset '" + name + "' (expected synthetic or cifar10)");
}

double dataset_accuracy(const ClassifierHandle& h, const Dataset& d) {
  constexpr int64_t kBatch = 64;
  int64_t n = d.size();
  int64_t correct = 0;
  for (int64_t at = 0; at < n; at += kBatch) {
    int64_t b = std::min(kBatch, n - at);
    Tensor xb({b, 3, d.images.shape[2], d.images.shape[3]});
    std::copy(d.images.data.begin() + at * 3 * d.images.shape[2] * d.images.shape[3],
              d.images.data.begin() + (at + b) * 3 * d.images.shape[2] * d.images.shape[3],
              xb.data.begin());
    Tensor logits = forward_scores(h, xb);
    int64_t k = logits.shape[1];
    for (int64_t i = 0; i < b; ++i) {
      const double* p = logits.data.data() + i * k;
      int64_t best = static_cast<int64_t>(std::max_element(p, p + k) - p);
      if (best == d.labels[static_cast<size_t>(at + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

namespace {

double train_lr_for(Arch a) {
  switch (a) {
    case Arch::cnn_bn: return 3e-3;
    case Arch::tiny_attention: return 1e-3;
    case Arch::tiny_mixer: return 1.5e-3;
  }
  return 1e-3;
}

}  // namespace

ClassifierHandle train_toy(Arch arch, const DatasetPair& data, int epochs, uint64_t seed,
                           TrainReport* report) {
  if (epochs < 1) throw ParameterError("epochs must be >= 1");
  if (data.train.size() < 1 || data.test.size() < 1) throw IngestionError("empty dataset");
  std::shared_ptr<Network> net = make_network(arch, data.train.num_classes, seed);
  ClassifierHandle handle{net, alias_for(arch), std::nullopt};

  // Channel statistics of the training set, recorded for the optional
  // normalization toggle (training itself runs on raw [0,1] pixels).
  {
    Normalization n;
    int64_t hw = data.train.images.shape[2] * data.train.images.shape[3];
    int64_t cnt = data.train.size() * hw;
    for (int64_t c = 0; c < 3; ++c) {
      double mean = 0.0;
      for (int64_t i = 0; i < data.train.size(); ++i) {
        const double* p = data.train.images.data.data() + (i * 3 + c) * hw;
        for (int64_t k = 0; k < hw; ++k) mean += p[k];
      }
      mean /= static_cast<double>(cnt);
      double var = 0.0;
      for (int64_t i = 0; i < data.train.size(); ++i) {
        const double* p = data.train.images.data.data() + (i * 3 + c) * hw;
        for (int64_t k = 0; k < hw; ++k) var += (p[k] - mean) * (p[k] - mean);
      }
      var /= static_cast<double>(cnt);
      n.mean.push_back(mean);
      n.stdd.push_back(std::sqrt(var) + 1e-8);
    }
    handle.normalization = n;
  }

  const double lr = train_lr_for(arch);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  constexpr int64_t kBatch = 32;
  std::vector<Tensor*> params = net->parameters();
  std::vector<Tensor> m_state, v_state;
  for (Tensor* p : params) {
    m_state.push_back(Tensor::zeros(p->shape));
    v_state.push_back(Tensor::zeros(p->shape));
  }
  int64_t step = 0;

  Rng shuffle_rng(derive_seed(seed, 0xF00D));
  int64_t n = data.train.size();
  int64_t hw = data.train.images.shape[2] * data.train.images.shape[3];
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (int64_t i = n - 1; i > 0; --i) {
      int64_t j = shuffle_rng.uniform_int(0, i);
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    for (int64_t at = 0; at < n; at += kBatch) {
      int64_t b = std::min(kBatch, n - at);
      if (b < 2) continue;  // batch-norm training needs >= 2 pooled samples
      Tensor xb({b, 3, data.train.images.shape[2], data.train.images.shape[3]});
      std::vector<int> yb(static_cast<size_t>(b));
      for (int64_t i = 0; i < b; ++i) {
        int64_t src = order[static_cast<size_t>(at + i)];
        std::copy(data.train.images.data.begin() + src * 3 * hw,
                  data.train.images.data.begin() + (src + 1) * 3 * hw,
                  xb.data.begin() + i * 3 * hw);
        yb[static_cast<size_t>(i)] = data.train.labels[static_cast<size_t>(src)];
      }
      ad::Graph g;
      ParamBind bind;
      ad::Value x = g.leaf(std::move(xb), false);
      ForwardResult fr = net->forward(g, x, true, true, &bind);
      ad::Value loss = g.softmax_xent_mean(fr.logits, yb);
      g.backward(loss);

      // global gradient clipping keeps early epochs finite
      double norm2 = 0.0;
      for (auto& [tensor, value] : bind) {
        const Tensor& gr = g.grad(value);
        for (double v : gr.data) norm2 += v * v;
      }
      double clip = 1.0;
      double norm = std::sqrt(norm2);
      if (norm > 5.0) clip = 5.0 / norm;

      ++step;
      double corr1 = 1.0 - std::pow(b1, static_cast<double>(step));
      double corr2 = 1.0 - std::pow(b2, static_cast<double>(step));
      for (auto& [tensor, value] : bind) {
        const Tensor& gr = g.grad(value);
        size_t pi = 0;
        while (pi < params.size() && params[pi] != tensor) ++pi;
        if (pi == params.size()) continue;
        Tensor& m = m_state[pi];
        Tensor& v = v_state[pi];
        for (int64_t k = 0; k < tensor->numel(); ++k) {
          double gk = gr[k] * clip;
          m[k] = b1 * m[k] + (1.0 - b1) * gk;
          v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
          (*tensor)[k] -= lr * (m[k] / corr1) / (std::sqrt(v[k] / corr2) + eps);
        }
      }
    }
  }

  TrainReport rep;
  rep.arch = to_string(arch);
  rep.dataset = data.train.name;
  rep.seed = seed;
  rep.epochs = epochs;
  rep.train_accuracy = dataset_accuracy(handle, data.train);
  rep.test_accuracy = dataset_accuracy(handle, data.test);
  rep.weight_hash = weight_hash(*net);
  if (report) *report = rep;
  return handle;
}

std::string weight_hash(Network& net) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (auto& [name, t] : net.named_tensors()) {
    mix(name.data(), name.size());
    mix(t->data.data(), t->data.size() * sizeof(double));
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

void save_model(const ClassifierHandle& h, const TrainReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write weights file '" + path + "'");
  const char magic[6] = {'P', 'I', 'I', 'W', '1', '\n'};
  out.write(magic, 6);
  auto tensors = h.net->named_tensors();
  uint32_t count = static_cast<uint32_t>(tensors.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (auto& [name, t] : tensors) {
    uint32_t nl = static_cast<uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&nl), sizeof(nl));
    out.write(name.data(), nl);
    uint32_t rank = static_cast<uint32_t>(t->rank());
    out.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
    for (int64_t d : t->shape) out.write(reinterpret_cast<const char*>(&d), sizeof(d));
    out.write(reinterpret_cast<const char*>(t->data.data()),
              static_cast<std::streamsize>(t->data.size() * sizeof(double)));
  }
  if (!out) throw IoError("short write to weights file '" + path + "'");
  out.close();

  json manifest;
  manifest["arch"] = report.arch;
  manifest["name"] = h.name;
  manifest["dataset"] = report.dataset;
  manifest["seed"] = report.seed;
  manifest["epochs"] = report.epochs;
  manifest["train_accuracy"] = report.train_accuracy;
  manifest["test_accuracy"] = report.test_accuracy;
  manifest["weight_hash"] = report.weight_hash;
  manifest["num_classes"] = h.num_classes();
  manifest["input_resolution"] = h.input_resolution();
  if (h.normalization) {
    manifest["normalization"] = {{"mean", h.normalization->mean}, {"std", h.normalization->stdd}};
  } else {
    manifest["normalization"] = nullptr;
  }
  std::ofstream mf(path + ".json");
  if (!mf) throw IoError("cannot write manifest '" + path + ".json'");
  mf << manifest.dump(2) << "\n";
}

ClassifierHandle load_model(const std::string& path) {
  std::ifstream mf(path + ".json");
  if (!mf) {
    throw IngestionError("weights manifest '" + path +
                         ".json' not found; train the model first (pii train --arch <arch>)");
  }
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw IngestionError("manifest '" + path + ".json' is not valid JSON: " + e.what());
  }
  Arch arch = arch_from_string(manifest.at("arch").get<std::string>());
  int classes = manifest.at("num_classes").get<int>();
  ClassifierHandle h;
  h.net = make_network(arch, classes, 0);
  h.name = manifest.value("name", alias_for(arch));
  if (manifest.contains("normalization") && !manifest["normalization"].is_null()) {
    Normalization n;
    n.mean = manifest["normalization"].at("mean").get<std::vector<double>>();
    n.stdd = manifest["normalization"].at("std").get<std::vector<double>>();
    h.normalization = n;
  }

  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IngestionError("weights file '" + path +
                         "' not found; train the model first (pii train --arch <arch>)");
  }
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, "PIIW1\n", 6) != 0) {
    throw IngestionError("weights file '" + path + "' has an unknown format");
  }
  uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  std::vector<std::pair<std::string, Tensor>> loaded;
  for (uint32_t i = 0; i < count && in; ++i) {
    uint32_t nl = 0;
    in.read(reinterpret_cast<char*>(&nl), sizeof(nl));
    if (nl > 4096) throw IngestionError("weights file '" + path + "' is corrupt");
    std::string name(nl, '\0');
    in.read(name.data(), nl);
    uint32_t rank = 0;
    in.read(reinterpret_cast<char*>(&rank), sizeof(rank));
    if (rank > 8) throw IngestionError("weights file '" + path + "' is corrupt");
    std::vector<int64_t> shape(rank);
    for (uint32_t d = 0; d < rank; ++d)
      in.read(reinterpret_cast<char*>(&shape[d]), sizeof(int64_t));
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    loaded.emplace_back(std::move(name), std::move(t));
  }
  if (!in) throw IngestionError("weights file '" + path + "' is truncated");

  auto tensors = h.net->named_tensors();
  if (tensors.size() != loaded.size()) {
    throw IngestionError("weights file '" + path + "' holds " + std::to_string(loaded.size()) +
                         " tensors but the architecture expects " + std::to_string(tensors.size()));
  }
  for (size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].first != loaded[i].first || tensors[i].second->shape != loaded[i].second.shape) {
      throw IngestionError("weights file '" + path + "' does not match architecture tensor '" +
                           tensors[i].first + "'");
    }
    *tensors[i].second = std::move(loaded[i].second);
  }
  return h;
}

}  // namespace pii::models
