#include "pii/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>

#include "pii/errors.hpp"

namespace pii::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

void check(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

// Precomputed 1-D bilinear sampling positions with half-pixel centers.
struct Lerp1D {
  std::vector<int64_t> i0, i1;
  std::vector<double> w;  // weight of i1
};

Lerp1D make_lerp(int64_t src, int64_t dst, int64_t offset = 0) {
  Lerp1D l;
  l.i0.resize(static_cast<size_t>(dst));
  l.i1.resize(static_cast<size_t>(dst));
  l.w.resize(static_cast<size_t>(dst));
  for (int64_t o = 0; o < dst; ++o) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(src) /
                   static_cast<double>(dst) -
               0.5;
    s = std::max(0.0, std::min(s, static_cast<double>(src - 1)));
    int64_t i0 = src >= 2 ? std::min(static_cast<int64_t>(s), src - 2) : 0;
    int64_t i1 = src >= 2 ? i0 + 1 : 0;
    l.i0[static_cast<size_t>(o)] = offset + i0;
    l.i1[static_cast<size_t>(o)] = offset + i1;
    l.w[static_cast<size_t>(o)] = src >= 2 ? s - static_cast<double>(i0) : 0.0;
  }
  return l;
}

int64_t positive_mod(int64_t a, int64_t m) {
  int64_t r = a % m;
  return r < 0 ? r + m : r;
}

}  // namespace

Value Graph::push(Tensor val, bool rg, std::function<void(Graph&)> back) {
  Node n;
  n.val = std::move(val);
  n.rg = rg;
  n.back = rg ? std::move(back) : nullptr;
  nodes_.push_back(std::move(n));
  return Value{static_cast<int32_t>(nodes_.size() - 1)};
}

Tensor& Graph::grad_buf(int32_t idx) {
  Node& n = nodes_[static_cast<size_t>(idx)];
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.val.shape);
  return n.grad;
}

const Tensor& Graph::grad(Value v) { return grad_buf(v.idx); }

double Graph::scalar(Value v) const {
  const Tensor& t = val(v);
  check(t.numel() == 1, "scalar() on tensor of shape " + t.shape_str());
  return t.data[0];
}

Value Graph::leaf(Tensor v, bool requires_grad) {
  return push(std::move(v), requires_grad, nullptr);
}

void Graph::backward(Value root) {
  check(root.valid() && val(root).numel() == 1, "backward root must be a scalar");
  for (Node& n : nodes_) n.grad.data.clear();
  grad_buf(root.idx).data[0] = 1.0;
  for (int32_t i = root.idx; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.rg && n.back && grad_live(i)) n.back(*this);
  }
}

Value Graph::add(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  check(ta.same_shape(tb), "add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  Tensor out = ta;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += tb[i];
  int32_t ia = a.idx, ib = b.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(a).rg || node(b).rg, [ia, ib, io](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    for (int32_t p : {ia, ib}) {
      if (!g.nodes_[static_cast<size_t>(p)].rg) continue;
      Tensor& gp = g.grad_buf(p);
      for (int64_t i = 0; i < go.numel(); ++i) gp[i] += go[i];
    }
  });
}

Value Graph::scale(Value a, double c) {
  Tensor out = val(a);
  for (double& v : out.data) v *= c;
  int32_t ia = a.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(a).rg, [ia, io, c](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& ga = g.grad_buf(ia);
    for (int64_t i = 0; i < go.numel(); ++i) ga[i] += c * go[i];
  });
}

Value Graph::weighted_sum(const std::vector<Value>& xs, const std::vector<double>& ws) {
  check(xs.size() == ws.size() && !xs.empty(), "weighted_sum: arity mismatch");
  double acc = 0.0;
  bool rg = false;
  std::vector<int32_t> idxs;
  for (size_t i = 0; i < xs.size(); ++i) {
    check(val(xs[i]).numel() == 1, "weighted_sum expects scalar terms");
    acc += ws[i] * val(xs[i]).data[0];
    rg = rg || node(xs[i]).rg;
    idxs.push_back(xs[i].idx);
  }
  int32_t io = static_cast<int32_t>(nodes_.size());
  std::vector<double> w = ws;
  return push(Tensor({1}, {acc}), rg, [idxs, w, io](Graph& g) {
    double go = g.nodes_[static_cast<size_t>(io)].grad.data[0];
    for (size_t i = 0; i < idxs.size(); ++i) {
      if (!g.nodes_[static_cast<size_t>(idxs[i])].rg) continue;
      g.grad_buf(idxs[i]).data[0] += w[i] * go;
    }
  });
}

Value Graph::relu(Value a) {
  Tensor out = val(a);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  int32_t ia = a.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(a).rg, [ia, io](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    const Tensor& x = g.nodes_[static_cast<size_t>(ia)].val;
    Tensor& ga = g.grad_buf(ia);
    for (int64_t i = 0; i < go.numel(); ++i) {
      if (x[i] > 0.0) ga[i] += go[i];
    }
  });
}

Value Graph::gelu(Value a) {
  Tensor out = val(a);
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v / kSqrt2));
  int32_t ia = a.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(a).rg, [ia, io](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    const Tensor& x = g.nodes_[static_cast<size_t>(ia)].val;
    Tensor& ga = g.grad_buf(ia);
    for (int64_t i = 0; i < go.numel(); ++i) {
      double v = x[i];
      double cdf = 0.5 * (1.0 + std::erf(v / kSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      ga[i] += go[i] * (cdf + v * pdf);
    }
  });
}

Value Graph::linear(Value x, Value w, Value b) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  check(tx.rank() >= 2 && tw.rank() == 2, "linear: bad ranks");
  int64_t f = tx.shape.back();
  check(tw.shape[0] == f, "linear: feature dim mismatch");
  int64_t g_dim = tw.shape[1];
  int64_t rows = tx.numel() / f;
  std::vector<int64_t> oshape = tx.shape;
  oshape.back() = g_dim;
  Tensor out(oshape);
  {
    CMapM X(tx.data.data(), rows, f);
    CMapM W(tw.data.data(), f, g_dim);
    MapM O(out.data.data(), rows, g_dim);
    O.noalias() = X * W;
  }
  if (b.valid()) {
    const Tensor& tb = val(b);
    check(tb.numel() == g_dim, "linear: bias dim mismatch");
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < g_dim; ++j) out[r * g_dim + j] += tb[j];
  }
  bool rg = node(x).rg || node(w).rg || (b.valid() && node(b).rg);
  int32_t ix = x.idx, iw = w.idx, ib = b.valid() ? b.idx : -1;
  int32_t io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), rg, [ix, iw, ib, io, rows, f, g_dim](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    const Tensor& tx = g.nodes_[static_cast<size_t>(ix)].val;
    const Tensor& tw = g.nodes_[static_cast<size_t>(iw)].val;
    CMapM G(go.data.data(), rows, g_dim);
    if (g.nodes_[static_cast<size_t>(ix)].rg) {
      MapM GX(g.grad_buf(ix).data.data(), rows, f);
      CMapM W(tw.data.data(), f, g_dim);
      GX.noalias() += G * W.transpose();
    }
    if (g.nodes_[static_cast<size_t>(iw)].rg) {
      MapM GW(g.grad_buf(iw).data.data(), f, g_dim);
      CMapM X(tx.data.data(), rows, f);
      GW.noalias() += X.transpose() * G;
    }
    if (ib >= 0 && g.nodes_[static_cast<size_t>(ib)].rg) {
      Tensor& gb = g.grad_buf(ib);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < g_dim; ++j) gb[j] += go[r * g_dim + j];
    }
  });
}

Value Graph::bmm(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  check(ta.rank() == 3 && tb.rank() == 3 && ta.shape[0] == tb.shape[0] &&
            ta.shape[2] == tb.shape[1],
        "bmm: incompatible shapes " + ta.shape_str() + " x " + tb.shape_str());
  int64_t bs = ta.shape[0], m = ta.shape[1], k = ta.shape[2], n = tb.shape[2];
  Tensor out({bs, m, n});
  for (int64_t i = 0; i < bs; ++i) {
    CMapM A(ta.data.data() + i * m * k, m, k);
    CMapM B(tb.data.data() + i * k * n, k, n);
    MapM O(out.data.data() + i * m * n, m, n);
    O.noalias() = A * B;
  }
  int32_t ia = a.idx, ibn = b.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(a).rg || node(b).rg, [ia, ibn, io, bs, m, k, n](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    const Tensor& ta = g.nodes_[static_cast<size_t>(ia)].val;
    const Tensor& tb = g.nodes_[static_cast<size_t>(ibn)].val;
    bool rga = g.nodes_[static_cast<size_t>(ia)].rg;
    bool rgb = g.nodes_[static_cast<size_t>(ibn)].rg;
    for (int64_t i = 0; i < bs; ++i) {
      CMapM G(go.data.data() + i * m * n, m, n);
      if (rga) {
        MapM GA(g.grad_buf(ia).data.data() + i * m * k, m, k);
        CMapM B(tb.data.data() + i * k * n, k, n);
        GA.noalias() += G * B.transpose();
      }
      if (rgb) {
        MapM GB(g.grad_buf(ibn).data.data() + i * k * n, k, n);
        CMapM A(ta.data.data() + i * m * k, m, k);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

Value Graph::transpose_last2(Value a) {
  const Tensor& ta = val(a);
  check(ta.rank() >= 2, "transpose_last2: rank < 2");
  int64_t m = ta.shape[ta.rank() - 2], n = ta.shape.back();
  int64_t batch = ta.numel() / (m * n);
  std::vector<int64_t> oshape = ta.shape;
  std::swap(oshape[oshape.size() - 2], oshape[oshape.size() - 1]);
  Tensor out(oshape);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j)
        out[(b * n + j) * m + i] = ta[(b * m + i) * n + j];
  int32_t ia = a.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(a).rg, [ia, io, batch, m, n](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& ga = g.grad_buf(ia);
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
          ga[(b * m + i) * n + j] += go[(b * n + j) * m + i];
  });
}

Value Graph::softmax_lastdim(Value a) {
  const Tensor& ta = val(a);
  check(ta.rank() >= 1, "softmax_lastdim: rank 0");
  int64_t n = ta.shape.back();
  int64_t rows = ta.numel() / n;
  Tensor out = ta;
  for (int64_t r = 0; r < rows; ++r) {
    double* p = out.data.data() + r * n;
    double mx = *std::max_element(p, p + n);
    double sum = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    for (int64_t j = 0; j < n; ++j) p[j] /= sum;
  }
  int32_t ia = a.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(a).rg, [ia, io, rows, n](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    const Tensor& s = g.nodes_[static_cast<size_t>(io)].val;
    Tensor& ga = g.grad_buf(ia);
    for (int64_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += go[r * n + j] * s[r * n + j];
      for (int64_t j = 0; j < n; ++j)
        ga[r * n + j] += s[r * n + j] * (go[r * n + j] - dot);
    }
  });
}

Value Graph::layernorm_lastdim(Value x, Value gamma, Value beta, double eps) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gamma);
  const Tensor& tb = val(beta);
  int64_t f = tx.shape.back();
  check(tg.numel() == f && tb.numel() == f, "layernorm: affine dim mismatch");
  int64_t rows = tx.numel() / f;
  Tensor out(tx.shape);
  Tensor xhat(tx.shape);
  Tensor inv_std({rows});
  for (int64_t r = 0; r < rows; ++r) {
    const double* p = tx.data.data() + r * f;
    double mu = 0.0;
    for (int64_t j = 0; j < f; ++j) mu += p[j];
    mu /= static_cast<double>(f);
    double var = 0.0;
    for (int64_t j = 0; j < f; ++j) var += (p[j] - mu) * (p[j] - mu);
    var /= static_cast<double>(f);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int64_t j = 0; j < f; ++j) {
      double xh = (p[j] - mu) * is;
      xhat[r * f + j] = xh;
      out[r * f + j] = tg[j] * xh + tb[j];
    }
  }
  bool rg = node(x).rg || node(gamma).rg || node(beta).rg;
  int32_t ix = x.idx, ig = gamma.idx, ib = beta.idx;
  int32_t io = static_cast<int32_t>(nodes_.size());
  auto xh = std::make_shared<Tensor>(std::move(xhat));
  auto is = std::make_shared<Tensor>(std::move(inv_std));
  return push(std::move(out), rg, [ix, ig, ib, io, rows, f, xh, is](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    const Tensor& tg = g.nodes_[static_cast<size_t>(ig)].val;
    if (g.nodes_[static_cast<size_t>(ig)].rg) {
      Tensor& gg = g.grad_buf(ig);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < f; ++j) gg[j] += go[r * f + j] * (*xh)[r * f + j];
    }
    if (g.nodes_[static_cast<size_t>(ib)].rg) {
      Tensor& gb = g.grad_buf(ib);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < f; ++j) gb[j] += go[r * f + j];
    }
    if (g.nodes_[static_cast<size_t>(ix)].rg) {
      Tensor& gx = g.grad_buf(ix);
      double fd = static_cast<double>(f);
      for (int64_t r = 0; r < rows; ++r) {
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int64_t j = 0; j < f; ++j) {
          double dxh = go[r * f + j] * tg[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * (*xh)[r * f + j];
        }
        for (int64_t j = 0; j < f; ++j) {
          double dxh = go[r * f + j] * tg[j];
          gx[r * f + j] += (*is)[r] *
                           (dxh - sum_dxh / fd - (*xh)[r * f + j] * sum_dxh_xh / fd);
        }
      }
    }
  });
}

Value Graph::add_broadcast_batch(Value x, Value p) {
  const Tensor& tx = val(x);
  const Tensor& tp = val(p);
  int64_t n = tx.shape[0];
  int64_t rest = tx.numel() / n;
  check(tp.numel() == rest, "add_broadcast_batch: trailing shape mismatch");
  Tensor out = tx;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = 0; i < rest; ++i) out[b * rest + i] += tp[i];
  int32_t ix = x.idx, ip = p.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(x).rg || node(p).rg, [ix, ip, io, n, rest](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    if (g.nodes_[static_cast<size_t>(ix)].rg) {
      Tensor& gx = g.grad_buf(ix);
      for (int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
    }
    if (g.nodes_[static_cast<size_t>(ip)].rg) {
      Tensor& gp = g.grad_buf(ip);
      for (int64_t b = 0; b < n; ++b)
        for (int64_t i = 0; i < rest; ++i) gp[i] += go[b * rest + i];
    }
  });
}

Value Graph::reshape(Value x, std::vector<int64_t> shape) {
  const Tensor& tx = val(x);
  check(Tensor::numel_of(shape) == tx.numel(), "reshape: numel mismatch");
  Tensor out(std::move(shape), tx.data);
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(x).rg, [ix, io](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    for (int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
  });
}

Value Graph::mean_tokens(Value x) {
  const Tensor& tx = val(x);
  check(tx.rank() == 3, "mean_tokens expects [N,T,D]");
  int64_t n = tx.shape[0], t = tx.shape[1], d = tx.shape[2];
  Tensor out({n, d});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t k = 0; k < t; ++k)
      for (int64_t j = 0; j < d; ++j) out[b * d + j] += tx[(b * t + k) * d + j];
  for (double& v : out.data) v /= static_cast<double>(t);
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(x).rg, [ix, io, n, t, d](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    double inv = 1.0 / static_cast<double>(t);
    for (int64_t b = 0; b < n; ++b)
      for (int64_t k = 0; k < t; ++k)
        for (int64_t j = 0; j < d; ++j) gx[(b * t + k) * d + j] += go[b * d + j] * inv;
  });
}

namespace {

// im2col for one sample: x [C,H,W] slice -> col [C*kh*kw, Ho*Wo]
void im2col(const double* x, int64_t c_in, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t ho, int64_t wo, double* col) {
  for (int64_t c = 0; c < c_in; ++c)
    for (int64_t u = 0; u < kh; ++u)
      for (int64_t v = 0; v < kw; ++v) {
        double* row = col + ((c * kh + u) * kw + v) * (ho * wo);
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride - pad + u;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ixp = ox * stride - pad + v;
            row[oy * wo + ox] = (iy >= 0 && iy < h && ixp >= 0 && ixp < w)
                                    ? x[(c * h + iy) * w + ixp]
                                    : 0.0;
          }
        }
      }
}

void col2im_add(const double* col, int64_t c_in, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t ho, int64_t wo, double* x) {
  for (int64_t c = 0; c < c_in; ++c)
    for (int64_t u = 0; u < kh; ++u)
      for (int64_t v = 0; v < kw; ++v) {
        const double* row = col + ((c * kh + u) * kw + v) * (ho * wo);
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride - pad + u;
          if (iy < 0 || iy >= h) continue;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ixp = ox * stride - pad + v;
            if (ixp < 0 || ixp >= w) continue;
            x[(c * h + iy) * w + ixp] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace

Value Graph::conv2d(Value x, Value w, Value b, int stride, int pad) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  check(tx.rank() == 4 && tw.rank() == 4, "conv2d expects NCHW input and OIHW weight");
  check(tx.shape[1] == tw.shape[1], "conv2d: channel mismatch");
  int64_t n = tx.shape[0], c_in = tx.shape[1], h = tx.shape[2], wd = tx.shape[3];
  int64_t c_out = tw.shape[0], kh = tw.shape[2], kw = tw.shape[3];
  int64_t ho = (h + 2 * pad - kh) / stride + 1;
  int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  check(ho >= 1 && wo >= 1, "conv2d: input too small for kernel");
  Tensor out({n, c_out, ho, wo});
  int64_t krows = c_in * kh * kw;
  std::vector<double> col(static_cast<size_t>(krows * ho * wo));
  CMapM W(tw.data.data(), c_out, krows);
  for (int64_t i = 0; i < n; ++i) {
    im2col(tx.data.data() + i * c_in * h * wd, c_in, h, wd, kh, kw, stride, pad, ho, wo,
           col.data());
    CMapM C(col.data(), krows, ho * wo);
    MapM O(out.data.data() + i * c_out * ho * wo, c_out, ho * wo);
    O.noalias() = W * C;
  }
  if (b.valid()) {
    const Tensor& tb = val(b);
    check(tb.numel() == c_out, "conv2d: bias dim mismatch");
    for (int64_t i = 0; i < n; ++i)
      for (int64_t o = 0; o < c_out; ++o) {
        double* p = out.data.data() + (i * c_out + o) * ho * wo;
        for (int64_t k = 0; k < ho * wo; ++k) p[k] += tb[o];
      }
  }
  bool rg = node(x).rg || node(w).rg || (b.valid() && node(b).rg);
  int32_t ix = x.idx, iw = w.idx, ib = b.valid() ? b.idx : -1;
  int32_t io = static_cast<int32_t>(nodes_.size());
  int64_t s = stride, p = pad;
  return push(std::move(out), rg,
              [ix, iw, ib, io, n, c_in, h, wd, c_out, kh, kw, s, p, ho, wo](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    const Tensor& tx = g.nodes_[static_cast<size_t>(ix)].val;
    const Tensor& tw = g.nodes_[static_cast<size_t>(iw)].val;
    bool rgx = g.nodes_[static_cast<size_t>(ix)].rg;
    bool rgw = g.nodes_[static_cast<size_t>(iw)].rg;
    int64_t krows = c_in * kh * kw;
    std::vector<double> col(static_cast<size_t>(krows * ho * wo));
    std::vector<double> dcol(static_cast<size_t>(krows * ho * wo));
    CMapM W(tw.data.data(), c_out, krows);
    for (int64_t i = 0; i < n; ++i) {
      CMapM G(go.data.data() + i * c_out * ho * wo, c_out, ho * wo);
      if (rgw) {
        im2col(tx.data.data() + i * c_in * h * wd, c_in, h, wd, kh, kw, s, p, ho, wo,
               col.data());
        CMapM C(col.data(), krows, ho * wo);
        MapM GW(g.grad_buf(iw).data.data(), c_out, krows);
        GW.noalias() += G * C.transpose();
      }
      if (rgx) {
        MapM DC(dcol.data(), krows, ho * wo);
        DC.noalias() = W.transpose() * G;
        col2im_add(dcol.data(), c_in, h, wd, kh, kw, s, p, ho, wo,
                   g.grad_buf(ix).data.data() + i * c_in * h * wd);
      }
    }
    if (ib >= 0 && g.nodes_[static_cast<size_t>(ib)].rg) {
      Tensor& gb = g.grad_buf(ib);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t o = 0; o < c_out; ++o) {
          const double* pg = go.data.data() + (i * c_out + o) * ho * wo;
          double acc = 0.0;
          for (int64_t k = 0; k < ho * wo; ++k) acc += pg[k];
          gb[o] += acc;
        }
    }
  });
}

Value Graph::batchnorm2d(Value x, Value gamma, Value beta, Tensor* run_mean, Tensor* run_var,
                         bool training, double momentum, double eps) {
  const Tensor& tx = val(x);
  check(tx.rank() == 4, "batchnorm2d expects NCHW");
  int64_t n = tx.shape[0], c = tx.shape[1], h = tx.shape[2], w = tx.shape[3];
  const Tensor& tg = val(gamma);
  const Tensor& tb = val(beta);
  check(tg.numel() == c && tb.numel() == c, "batchnorm2d: affine dim mismatch");
  int64_t m = n * h * w;
  Tensor out(tx.shape);
  Tensor mean({c}), inv_std({c});
  if (training) {
    if (m < 2) throw ParameterError("batchnorm2d training mode needs at least 2 samples per channel");
    for (int64_t ci = 0; ci < c; ++ci) {
      double mu = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double* p = tx.data.data() + ((i * c + ci) * h) * w;
        for (int64_t k = 0; k < h * w; ++k) mu += p[k];
      }
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double* p = tx.data.data() + ((i * c + ci) * h) * w;
        for (int64_t k = 0; k < h * w; ++k) var += (p[k] - mu) * (p[k] - mu);
      }
      var /= static_cast<double>(m);
      mean[ci] = mu;
      inv_std[ci] = 1.0 / std::sqrt(var + eps);
      if (run_mean && run_var) {
        (*run_mean)[ci] = (1.0 - momentum) * (*run_mean)[ci] + momentum * mu;
        (*run_var)[ci] = (1.0 - momentum) * (*run_var)[ci] + momentum * var;
      }
    }
  } else {
    check(run_mean != nullptr && run_var != nullptr, "batchnorm2d eval mode needs running stats");
    for (int64_t ci = 0; ci < c; ++ci) {
      mean[ci] = (*run_mean)[ci];
      inv_std[ci] = 1.0 / std::sqrt((*run_var)[ci] + eps);
    }
  }
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* p = tx.data.data() + (i * c + ci) * h * w;
      double* q = out.data.data() + (i * c + ci) * h * w;
      double mu = mean[ci], is = inv_std[ci], ga = tg[ci], be = tb[ci];
      for (int64_t k = 0; k < h * w; ++k) q[k] = ga * (p[k] - mu) * is + be;
    }
  bool rg = node(x).rg || node(gamma).rg || node(beta).rg;
  int32_t ix = x.idx, ig = gamma.idx, ibt = beta.idx;
  int32_t io = static_cast<int32_t>(nodes_.size());
  auto mu_s = std::make_shared<Tensor>(std::move(mean));
  auto is_s = std::make_shared<Tensor>(std::move(inv_std));
  bool tr = training;
  return push(std::move(out), rg, [ix, ig, ibt, io, n, c, h, w, mu_s, is_s, tr](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    const Tensor& tx = g.nodes_[static_cast<size_t>(ix)].val;
    const Tensor& tg = g.nodes_[static_cast<size_t>(ig)].val;
    int64_t m = n * h * w;
    double md = static_cast<double>(m);
    for (int64_t ci = 0; ci < c; ++ci) {
      double mu = (*mu_s)[ci], is = (*is_s)[ci], ga = tg[ci];
      double sum_g = 0.0, sum_g_xh = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double* pg = go.data.data() + (i * c + ci) * h * w;
        const double* px = tx.data.data() + (i * c + ci) * h * w;
        for (int64_t k = 0; k < h * w; ++k) {
          sum_g += pg[k];
          sum_g_xh += pg[k] * (px[k] - mu) * is;
        }
      }
      if (g.nodes_[static_cast<size_t>(ig)].rg) g.grad_buf(ig)[ci] += sum_g_xh;
      if (g.nodes_[static_cast<size_t>(ibt)].rg) g.grad_buf(ibt)[ci] += sum_g;
      if (g.nodes_[static_cast<size_t>(ix)].rg) {
        Tensor& gx = g.grad_buf(ix);
        for (int64_t i = 0; i < n; ++i) {
          const double* pg = go.data.data() + (i * c + ci) * h * w;
          const double* px = tx.data.data() + (i * c + ci) * h * w;
          double* pgx = gx.data.data() + (i * c + ci) * h * w;
          for (int64_t k = 0; k < h * w; ++k) {
            if (tr) {
              double xh = (px[k] - mu) * is;
              pgx[k] += ga * is * (pg[k] - sum_g / md - xh * sum_g_xh / md);
            } else {
              pgx[k] += ga * is * pg[k];
            }
          }
        }
      }
    }
  });
}

Value Graph::global_avg_pool(Value x) {
  const Tensor& tx = val(x);
  check(tx.rank() == 4, "global_avg_pool expects NCHW");
  int64_t n = tx.shape[0], c = tx.shape[1], hw = tx.shape[2] * tx.shape[3];
  Tensor out({n, c});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* p = tx.data.data() + (i * c + ci) * hw;
      double acc = 0.0;
      for (int64_t k = 0; k < hw; ++k) acc += p[k];
      out[i * c + ci] = acc / static_cast<double>(hw);
    }
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(x).rg, [ix, io, n, c, hw](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    double inv = 1.0 / static_cast<double>(hw);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ci = 0; ci < c; ++ci) {
        double gv = go[i * c + ci] * inv;
        double* p = gx.data.data() + (i * c + ci) * hw;
        for (int64_t k = 0; k < hw; ++k) p[k] += gv;
      }
  });
}

Value Graph::softmax_xent_mean(Value logits, std::vector<int> labels) {
  const Tensor& tl = val(logits);
  check(tl.rank() == 2, "softmax_xent_mean expects [N,K] logits");
  int64_t n = tl.shape[0], k = tl.shape[1];
  check(static_cast<int64_t>(labels.size()) == n, "softmax_xent_mean: label count mismatch");
  for (int y : labels) check(y >= 0 && y < k, "softmax_xent_mean: label out of range");
  double loss = 0.0;
  Tensor probs(tl.shape);
  for (int64_t i = 0; i < n; ++i) {
    const double* p = tl.data.data() + i * k;
    double mx = *std::max_element(p, p + k);
    double sum = 0.0;
    for (int64_t j = 0; j < k; ++j) sum += std::exp(p[j] - mx);
    double lse = mx + std::log(sum);
    loss += lse - p[labels[static_cast<size_t>(i)]];
    for (int64_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(p[j] - lse);
  }
  loss /= static_cast<double>(n);
  int32_t il = logits.idx, io = static_cast<int32_t>(nodes_.size());
  auto pr = std::make_shared<Tensor>(std::move(probs));
  auto lb = std::make_shared<std::vector<int>>(std::move(labels));
  return push(Tensor({1}, {loss}), node(logits).rg, [il, io, n, k, pr, lb](Graph& g) {
    double go = g.nodes_[static_cast<size_t>(io)].grad.data[0];
    Tensor& gl = g.grad_buf(il);
    double inv = go / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < k; ++j) {
        double delta = (j == (*lb)[static_cast<size_t>(i)]) ? 1.0 : 0.0;
        gl[i * k + j] += ((*pr)[i * k + j] - delta) * inv;
      }
  });
}

Value Graph::bilinear_resize(Value x, int64_t out_h, int64_t out_w) {
  const Tensor& tx = val(x);
  check(tx.rank() == 4, "bilinear_resize expects NCHW");
  check(out_h >= 1 && out_w >= 1, "bilinear_resize: bad target size");
  int64_t n = tx.shape[0], c = tx.shape[1], h = tx.shape[2], w = tx.shape[3];
  Lerp1D ly = make_lerp(h, out_h);
  Lerp1D lx = make_lerp(w, out_w);
  Tensor out({n, c, out_h, out_w});
  for (int64_t i = 0; i < n * c; ++i) {
    const double* src = tx.data.data() + i * h * w;
    double* dst = out.data.data() + i * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      int64_t y0 = ly.i0[static_cast<size_t>(oy)], y1 = ly.i1[static_cast<size_t>(oy)];
      double wy = ly.w[static_cast<size_t>(oy)];
      for (int64_t ox = 0; ox < out_w; ++ox) {
        int64_t x0 = lx.i0[static_cast<size_t>(ox)], x1 = lx.i1[static_cast<size_t>(ox)];
        double wx = lx.w[static_cast<size_t>(ox)];
        dst[oy * out_w + ox] = (1 - wy) * ((1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
                               wy * ((1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
      }
    }
  }
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  auto lys = std::make_shared<Lerp1D>(std::move(ly));
  auto lxs = std::make_shared<Lerp1D>(std::move(lx));
  return push(std::move(out), node(x).rg, [ix, io, n, c, h, w, out_h, out_w, lys, lxs](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    for (int64_t i = 0; i < n * c; ++i) {
      double* src = gx.data.data() + i * h * w;
      const double* dst = go.data.data() + i * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        int64_t y0 = lys->i0[static_cast<size_t>(oy)], y1 = lys->i1[static_cast<size_t>(oy)];
        double wy = lys->w[static_cast<size_t>(oy)];
        for (int64_t ox = 0; ox < out_w; ++ox) {
          int64_t x0 = lxs->i0[static_cast<size_t>(ox)], x1 = lxs->i1[static_cast<size_t>(ox)];
          double wx = lxs->w[static_cast<size_t>(ox)];
          double gv = dst[oy * out_w + ox];
          src[y0 * w + x0] += (1 - wy) * (1 - wx) * gv;
          src[y0 * w + x1] += (1 - wy) * wx * gv;
          src[y1 * w + x0] += wy * (1 - wx) * gv;
          src[y1 * w + x1] += wy * wx * gv;
        }
      }
    }
  });
}

Value Graph::circular_shift(Value x, int64_t dy, int64_t dx) {
  const Tensor& tx = val(x);
  check(tx.rank() == 3 || tx.rank() == 4, "circular_shift expects CHW or NCHW");
  int64_t h = tx.shape[tx.rank() - 2], w = tx.shape.back();
  int64_t planes = tx.numel() / (h * w);
  Tensor out(tx.shape);
  for (int64_t p = 0; p < planes; ++p) {
    const double* src = tx.data.data() + p * h * w;
    double* dst = out.data.data() + p * h * w;
    for (int64_t i = 0; i < h; ++i) {
      int64_t si = positive_mod(i - dy, h);
      for (int64_t j = 0; j < w; ++j) dst[i * w + j] = src[si * w + positive_mod(j - dx, w)];
    }
  }
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(x).rg, [ix, io, planes, h, w, dy, dx](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    for (int64_t p = 0; p < planes; ++p) {
      const double* src = go.data.data() + p * h * w;
      double* dst = gx.data.data() + p * h * w;
      for (int64_t i = 0; i < h; ++i) {
        int64_t si = positive_mod(i - dy, h);
        for (int64_t j = 0; j < w; ++j) dst[si * w + positive_mod(j - dx, w)] += src[i * w + j];
      }
    }
  });
}

Value Graph::tile_batch(Value x, int64_t n) {
  const Tensor& tx = val(x);
  check(tx.rank() == 3, "tile_batch expects CHW");
  check(n >= 1, "tile_batch: n must be >= 1");
  int64_t sz = tx.numel();
  Tensor out({n, tx.shape[0], tx.shape[1], tx.shape[2]});
  for (int64_t i = 0; i < n; ++i)
    std::copy(tx.data.begin(), tx.data.end(), out.data.begin() + i * sz);
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(x).rg, [ix, io, n, sz](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t k = 0; k < sz; ++k) gx[k] += go[i * sz + k];
  });
}

Value Graph::channel_affine_batch(Value x, const Tensor& sig, const Tensor& mu) {
  const Tensor& tx = val(x);
  check(tx.rank() == 4, "channel_affine_batch expects NCHW");
  int64_t n = tx.shape[0], c = tx.shape[1], hw = tx.shape[2] * tx.shape[3];
  check(sig.rank() == 2 && sig.shape[0] == n && sig.shape[1] == c && sig.same_shape(mu),
        "channel_affine_batch: parameter shape mismatch");
  Tensor out(tx.shape);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ci = 0; ci < c; ++ci) {
      double s = sig[i * c + ci], m = mu[i * c + ci];
      const double* p = tx.data.data() + (i * c + ci) * hw;
      double* q = out.data.data() + (i * c + ci) * hw;
      for (int64_t k = 0; k < hw; ++k) q[k] = s * p[k] - m;
    }
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  auto ss = std::make_shared<Tensor>(sig);
  return push(std::move(out), node(x).rg, [ix, io, n, c, hw, ss](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ci = 0; ci < c; ++ci) {
        double s = (*ss)[i * c + ci];
        const double* p = go.data.data() + (i * c + ci) * hw;
        double* q = gx.data.data() + (i * c + ci) * hw;
        for (int64_t k = 0; k < hw; ++k) q[k] += s * p[k];
      }
  });
}

Value Graph::channel_normalize(Value x, const std::vector<double>& mean,
                               const std::vector<double>& stdd) {
  const Tensor& tx = val(x);
  check(tx.rank() == 4, "channel_normalize expects NCHW");
  int64_t n = tx.shape[0], c = tx.shape[1], hw = tx.shape[2] * tx.shape[3];
  check(static_cast<int64_t>(mean.size()) == c && static_cast<int64_t>(stdd.size()) == c,
        "channel_normalize: stats dim mismatch");
  for (double s : stdd) {
    if (!(s > 0.0)) throw ParameterError("channel_normalize: std must be positive");
  }
  Tensor out(tx.shape);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* p = tx.data.data() + (i * c + ci) * hw;
      double* q = out.data.data() + (i * c + ci) * hw;
      double m = mean[static_cast<size_t>(ci)], s = stdd[static_cast<size_t>(ci)];
      for (int64_t k = 0; k < hw; ++k) q[k] = (p[k] - m) / s;
    }
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  std::vector<double> sd = stdd;
  return push(std::move(out), node(x).rg, [ix, io, n, c, hw, sd](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ci = 0; ci < c; ++ci) {
        const double* p = go.data.data() + (i * c + ci) * hw;
        double* q = gx.data.data() + (i * c + ci) * hw;
        double s = sd[static_cast<size_t>(ci)];
        for (int64_t k = 0; k < hw; ++k) q[k] += p[k] / s;
      }
  });
}

Value Graph::crop_resize_batch(Value x, const std::vector<CropRect>& rects) {
  const Tensor& tx = val(x);
  check(tx.rank() == 4, "crop_resize_batch expects NCHW");
  int64_t n = tx.shape[0], c = tx.shape[1], h = tx.shape[2], w = tx.shape[3];
  check(static_cast<int64_t>(rects.size()) == n, "crop_resize_batch: one rect per member");
  for (const CropRect& r : rects) {
    if (r.top < 0 || r.left < 0 || r.height < 1 || r.width < 1 || r.top + r.height > h ||
        r.left + r.width > w)
      throw ParameterError("crop_resize_batch: rect out of bounds");
  }
  Tensor out(tx.shape);
  std::vector<Lerp1D> lys, lxs;
  lys.reserve(rects.size());
  lxs.reserve(rects.size());
  for (const CropRect& r : rects) {
    lys.push_back(make_lerp(r.height, h, r.top));
    lxs.push_back(make_lerp(r.width, w, r.left));
  }
  for (int64_t i = 0; i < n; ++i) {
    const Lerp1D& ly = lys[static_cast<size_t>(i)];
    const Lerp1D& lx = lxs[static_cast<size_t>(i)];
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* src = tx.data.data() + (i * c + ci) * h * w;
      double* dst = out.data.data() + (i * c + ci) * h * w;
      for (int64_t oy = 0; oy < h; ++oy) {
        int64_t y0 = ly.i0[static_cast<size_t>(oy)], y1 = ly.i1[static_cast<size_t>(oy)];
        double wy = ly.w[static_cast<size_t>(oy)];
        for (int64_t ox = 0; ox < w; ++ox) {
          int64_t x0 = lx.i0[static_cast<size_t>(ox)], x1 = lx.i1[static_cast<size_t>(ox)];
          double wx = lx.w[static_cast<size_t>(ox)];
          dst[oy * w + ox] = (1 - wy) * ((1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1]) +
                             wy * ((1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
        }
      }
    }
  }
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  auto lys_s = std::make_shared<std::vector<Lerp1D>>(std::move(lys));
  auto lxs_s = std::make_shared<std::vector<Lerp1D>>(std::move(lxs));
  return push(std::move(out), node(x).rg, [ix, io, n, c, h, w, lys_s, lxs_s](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    for (int64_t i = 0; i < n; ++i) {
      const Lerp1D& ly = (*lys_s)[static_cast<size_t>(i)];
      const Lerp1D& lx = (*lxs_s)[static_cast<size_t>(i)];
      for (int64_t ci = 0; ci < c; ++ci) {
        double* src = gx.data.data() + (i * c + ci) * h * w;
        const double* dst = go.data.data() + (i * c + ci) * h * w;
        for (int64_t oy = 0; oy < h; ++oy) {
          int64_t y0 = ly.i0[static_cast<size_t>(oy)], y1 = ly.i1[static_cast<size_t>(oy)];
          double wy = ly.w[static_cast<size_t>(oy)];
          for (int64_t ox = 0; ox < w; ++ox) {
            int64_t x0 = lx.i0[static_cast<size_t>(ox)], x1 = lx.i1[static_cast<size_t>(ox)];
            double wx = lx.w[static_cast<size_t>(ox)];
            double gv = dst[oy * w + ox];
            src[y0 * w + x0] += (1 - wy) * (1 - wx) * gv;
            src[y0 * w + x1] += (1 - wy) * wx * gv;
            src[y1 * w + x0] += wy * (1 - wx) * gv;
            src[y1 * w + x1] += wy * wx * gv;
          }
        }
      }
    }
  });
}

Value Graph::flip_h_batch(Value x, const std::vector<uint8_t>& mask) {
  const Tensor& tx = val(x);
  check(tx.rank() == 4, "flip_h_batch expects NCHW");
  int64_t n = tx.shape[0], c = tx.shape[1], h = tx.shape[2], w = tx.shape[3];
  check(static_cast<int64_t>(mask.size()) == n, "flip_h_batch: one flag per member");
  Tensor out(tx.shape);
  for (int64_t i = 0; i < n; ++i) {
    bool f = mask[static_cast<size_t>(i)] != 0;
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* src = tx.data.data() + (i * c + ci) * h * w;
      double* dst = out.data.data() + (i * c + ci) * h * w;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xj = 0; xj < w; ++xj)
          dst[y * w + xj] = src[y * w + (f ? w - 1 - xj : xj)];
    }
  }
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  std::vector<uint8_t> mk = mask;
  return push(std::move(out), node(x).rg, [ix, io, n, c, h, w, mk](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    for (int64_t i = 0; i < n; ++i) {
      bool f = mk[static_cast<size_t>(i)] != 0;
      for (int64_t ci = 0; ci < c; ++ci) {
        const double* src = go.data.data() + (i * c + ci) * h * w;
        double* dst = gx.data.data() + (i * c + ci) * h * w;
        for (int64_t y = 0; y < h; ++y)
          for (int64_t xj = 0; xj < w; ++xj)
            dst[y * w + (f ? w - 1 - xj : xj)] += src[y * w + xj];
      }
    }
  });
}

Value Graph::color_matrix_batch(Value x, const Tensor& m) {
  const Tensor& tx = val(x);
  check(tx.rank() == 4 && tx.shape[1] == 3, "color_matrix_batch expects [N,3,H,W]");
  int64_t n = tx.shape[0], hw = tx.shape[2] * tx.shape[3];
  check(m.rank() == 3 && m.shape[0] == n && m.shape[1] == 3 && m.shape[2] == 3,
        "color_matrix_batch: matrix shape mismatch");
  Tensor out(tx.shape);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < hw; ++k) {
      double r = tx[(i * 3 + 0) * hw + k];
      double gch = tx[(i * 3 + 1) * hw + k];
      double b = tx[(i * 3 + 2) * hw + k];
      for (int64_t c = 0; c < 3; ++c)
        out[(i * 3 + c) * hw + k] = m[(i * 3 + c) * 3 + 0] * r + m[(i * 3 + c) * 3 + 1] * gch +
                                    m[(i * 3 + c) * 3 + 2] * b;
    }
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  auto ms = std::make_shared<Tensor>(m);
  return push(std::move(out), node(x).rg, [ix, io, n, hw, ms](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t k = 0; k < hw; ++k)
        for (int64_t c = 0; c < 3; ++c) {
          double gv = go[(i * 3 + c) * hw + k];
          for (int64_t c2 = 0; c2 < 3; ++c2)
            gx[(i * 3 + c2) * hw + k] += (*ms)[(i * 3 + c) * 3 + c2] * gv;
        }
  });
}

Value Graph::mean_chw(Value x) {
  const Tensor& tx = val(x);
  check(tx.rank() == 4, "mean_chw expects NCHW");
  int64_t n = tx.shape[0];
  int64_t sz = tx.numel() / n;
  Tensor out({n});
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    const double* p = tx.data.data() + i * sz;
    for (int64_t k = 0; k < sz; ++k) acc += p[k];
    out[i] = acc / static_cast<double>(sz);
  }
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  return push(std::move(out), node(x).rg, [ix, io, n, sz](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    Tensor& gx = g.grad_buf(ix);
    for (int64_t i = 0; i < n; ++i) {
      double gv = go[i] / static_cast<double>(sz);
      double* p = gx.data.data() + i * sz;
      for (int64_t k = 0; k < sz; ++k) p[k] += gv;
    }
  });
}

Value Graph::blend_with_scalar_batch(Value x, const std::vector<double>& c, Value s) {
  const Tensor& tx = val(x);
  const Tensor& ts = val(s);
  check(tx.rank() == 4, "blend_with_scalar_batch expects NCHW");
  int64_t n = tx.shape[0];
  check(static_cast<int64_t>(c.size()) == n && ts.numel() == n,
        "blend_with_scalar_batch: per-member arity mismatch");
  int64_t sz = tx.numel() / n;
  Tensor out(tx.shape);
  for (int64_t i = 0; i < n; ++i) {
    double ci = c[static_cast<size_t>(i)], si = ts[i];
    const double* p = tx.data.data() + i * sz;
    double* q = out.data.data() + i * sz;
    for (int64_t k = 0; k < sz; ++k) q[k] = ci * p[k] + (1.0 - ci) * si;
  }
  int32_t ix = x.idx, is = s.idx, io = static_cast<int32_t>(nodes_.size());
  std::vector<double> cs = c;
  return push(std::move(out), node(x).rg || node(s).rg, [ix, is, io, n, sz, cs](Graph& g) {
    const Tensor& go = g.nodes_[static_cast<size_t>(io)].grad;
    bool rgx = g.nodes_[static_cast<size_t>(ix)].rg;
    bool rgs = g.nodes_[static_cast<size_t>(is)].rg;
    for (int64_t i = 0; i < n; ++i) {
      double ci = cs[static_cast<size_t>(i)];
      const double* p = go.data.data() + i * sz;
      if (rgx) {
        double* q = g.grad_buf(ix).data.data() + i * sz;
        for (int64_t k = 0; k < sz; ++k) q[k] += ci * p[k];
      }
      if (rgs) {
        double acc = 0.0;
        for (int64_t k = 0; k < sz; ++k) acc += p[k];
        g.grad_buf(is)[i] += (1.0 - ci) * acc;
      }
    }
  });
}

Value Graph::total_variation(Value x) {
  const Tensor& tx = val(x);
  check(tx.rank() == 3, "total_variation expects CHW");
  int64_t c = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
  if (h < 2 || w < 2) throw ParameterError("total_variation requires at least a 2x2 image");
  // Four direction terms; each sums squared differences over all channels
  // and positions, then takes one square root.
  double t[4] = {0, 0, 0, 0};
  for (int64_t ci = 0; ci < c; ++ci)
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        double v = tx.at(ci, i, j);
        if (i + 1 < h) {
          double d = tx.at(ci, i + 1, j) - v;
          t[0] += d * d;
        }
        if (j + 1 < w) {
          double d = tx.at(ci, i, j + 1) - v;
          t[1] += d * d;
        }
        if (i + 1 < h && j + 1 < w) {
          double d = tx.at(ci, i + 1, j + 1) - v;
          t[2] += d * d;
          double da = tx.at(ci, i + 1, j) - tx.at(ci, i, j + 1);
          t[3] += da * da;
        }
      }
  double r[4];
  double total = 0.0;
  for (int k = 0; k < 4; ++k) {
    r[k] = std::sqrt(t[k]);
    total += r[k];
  }
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  std::array<double, 4> roots{r[0], r[1], r[2], r[3]};
  return push(Tensor({1}, {total}), node(x).rg, [ix, io, c, h, w, roots](Graph& g) {
    double go = g.nodes_[static_cast<size_t>(io)].grad.data[0];
    const Tensor& tx = g.nodes_[static_cast<size_t>(ix)].val;
    Tensor& gx = g.grad_buf(ix);
    double s0 = roots[0] > 0 ? go / roots[0] : 0.0;
    double s1 = roots[1] > 0 ? go / roots[1] : 0.0;
    double s2 = roots[2] > 0 ? go / roots[2] : 0.0;
    double s3 = roots[3] > 0 ? go / roots[3] : 0.0;
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) {
          double v = tx.at(ci, i, j);
          if (i + 1 < h) {
            double d = tx.at(ci, i + 1, j) - v;
            gx.at(ci, i + 1, j) += s0 * d;
            gx.at(ci, i, j) -= s0 * d;
          }
          if (j + 1 < w) {
            double d = tx.at(ci, i, j + 1) - v;
            gx.at(ci, i, j + 1) += s1 * d;
            gx.at(ci, i, j) -= s1 * d;
          }
          if (i + 1 < h && j + 1 < w) {
            double d = tx.at(ci, i + 1, j + 1) - v;
            gx.at(ci, i + 1, j + 1) += s2 * d;
            gx.at(ci, i, j) -= s2 * d;
            double da = tx.at(ci, i + 1, j) - tx.at(ci, i, j + 1);
            gx.at(ci, i + 1, j) += s3 * da;
            gx.at(ci, i, j + 1) -= s3 * da;
          }
        }
  });
}

Value Graph::l2_penalty(Value x) {
  const Tensor& tx = val(x);
  double acc = 0.0;
  for (double v : tx.data) acc += v * v;
  int32_t ix = x.idx, io = static_cast<int32_t>(nodes_.size());
  return push(Tensor({1}, {acc}), node(x).rg, [ix, io](Graph& g) {
    double go = g.nodes_[static_cast<size_t>(io)].grad.data[0];
    const Tensor& tx = g.nodes_[static_cast<size_t>(ix)].val;
    Tensor& gx = g.grad_buf(ix);
    for (int64_t i = 0; i < tx.numel(); ++i) gx[i] += 2.0 * tx[i] * go;
  });
}

Value Graph::feature_match(Value act, const Tensor& t_mean, const Tensor& t_var) {
  const Tensor& ta = val(act);
  check(ta.rank() == 4 || ta.rank() == 2, "feature_match expects [N,C,H,W] or [N,C]");
  int64_t n = ta.shape[0], c = ta.shape[1];
  int64_t hw = ta.rank() == 4 ? ta.shape[2] * ta.shape[3] : 1;
  check(t_mean.numel() == c && t_var.numel() == c, "feature_match: stats dim mismatch");
  int64_t m = n * hw;
  if (m < 2) throw ParameterError("feature_match needs at least 2 pooled samples per channel");
  Tensor mu({c}), var({c});
  for (int64_t ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double* p = ta.data.data() + (i * c + ci) * hw;
      for (int64_t k = 0; k < hw; ++k) acc += p[k];
    }
    mu[ci] = acc / static_cast<double>(m);
    double v = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double* p = ta.data.data() + (i * c + ci) * hw;
      for (int64_t k = 0; k < hw; ++k) v += (p[k] - mu[ci]) * (p[k] - mu[ci]);
    }
    var[ci] = v / static_cast<double>(m);
  }
  double d1 = 0.0, d2 = 0.0;
  for (int64_t ci = 0; ci < c; ++ci) {
    d1 += (mu[ci] - t_mean[ci]) * (mu[ci] - t_mean[ci]);
    d2 += (var[ci] - t_var[ci]) * (var[ci] - t_var[ci]);
  }
  d1 = std::sqrt(d1);
  d2 = std::sqrt(d2);
  int32_t ia = act.idx, io = static_cast<int32_t>(nodes_.size());
  auto mu_s = std::make_shared<Tensor>(std::move(mu));
  auto var_s = std::make_shared<Tensor>(std::move(var));
  auto tm = std::make_shared<Tensor>(t_mean);
  auto tv = std::make_shared<Tensor>(t_var);
  double dd1 = d1, dd2 = d2;
  return push(Tensor({1}, {d1 + d2}), node(act).rg,
              [ia, io, n, c, hw, mu_s, var_s, tm, tv, dd1, dd2](Graph& g) {
    double go = g.nodes_[static_cast<size_t>(io)].grad.data[0];
    const Tensor& ta = g.nodes_[static_cast<size_t>(ia)].val;
    Tensor& ga = g.grad_buf(ia);
    double md = static_cast<double>(n * hw);
    for (int64_t ci = 0; ci < c; ++ci) {
      double dmu = dd1 > 0 ? ((*mu_s)[ci] - (*tm)[ci]) / dd1 : 0.0;
      double dvar = dd2 > 0 ? ((*var_s)[ci] - (*tv)[ci]) / dd2 : 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const double* p = ta.data.data() + (i * c + ci) * hw;
        double* q = ga.data.data() + (i * c + ci) * hw;
        for (int64_t k = 0; k < hw; ++k)
          q[k] += go * (dmu / md + dvar * 2.0 * (p[k] - (*mu_s)[ci]) / md);
      }
    }
  });
}

}  // namespace pii::ad
