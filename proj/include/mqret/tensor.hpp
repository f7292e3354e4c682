#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mqret/error.hpp"

namespace mqret {

/// Dense row-major tensor of 64-bit floats with an optional gradient buffer.
/// All model activations and parameters live in this type.
class Tensor {
 public:
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "no gradient buffer"

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }

  Tensor(std::vector<std::size_t> s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel_of(shape)) {
      throw Error(ErrorKind::Dimension, "tensor data length " + std::to_string(data.size()) +
                                            " does not match shape product " +
                                            std::to_string(numel_of(shape)));
    }
  }

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<std::size_t> s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = v;
    return t;
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  bool has_grad() const { return !grad.empty(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }

  void zero_grad() {
    for (double& g : grad) g = 0.0;
  }

  void drop_grad() { grad.clear(); }

  // row-major index helpers
  std::size_t index2(std::size_t i, std::size_t j) const { return i * shape[1] + j; }
  std::size_t index3(std::size_t i, std::size_t j, std::size_t k) const {
    return (i * shape[1] + j) * shape[2] + k;
  }

  double& at2(std::size_t i, std::size_t j) { return data[index2(i, j)]; }
  double at2(std::size_t i, std::size_t j) const { return data[index2(i, j)]; }
  double& at3(std::size_t i, std::size_t j, std::size_t k) { return data[index3(i, j, k)]; }
  double at3(std::size_t i, std::size_t j, std::size_t k) const { return data[index3(i, j, k)]; }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }
};

std::string shape_string(const Tensor& t);

// Throws a Dimension error naming `op` and `operand` unless the shape matches.
void require_shape(const Tensor& t, const std::vector<std::size_t>& expected, const char* op,
                   const char* operand);
void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* operand);

}  // namespace mqret
