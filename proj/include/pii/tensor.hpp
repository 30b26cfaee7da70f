#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace pii {

// Dense row-major tensor of doubles. Small and copyable by design: every
// image, activation and parameter in this library fits in memory at desk
// scale, and double precision is required by the finite-difference oracles.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::vector<int64_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {}

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int64_t> s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = v;
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // Index helpers for the ranks used in this codebase.
  double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
  double& at(int64_t c, int64_t i, int64_t j) {
    return data[static_cast<size_t>((c * shape[1] + i) * shape[2] + j)];
  }
  double at(int64_t c, int64_t i, int64_t j) const {
    return data[static_cast<size_t>((c * shape[1] + i) * shape[2] + j)];
  }
  double& at(int64_t n, int64_t c, int64_t i, int64_t j) {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + i) * shape[3] + j)];
  }
  double at(int64_t n, int64_t c, int64_t i, int64_t j) const {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + i) * shape[3] + j)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  std::string shape_str() const;
};

}  // namespace pii
