#include "fbdebias/tensor.hpp"

#include <cmath>
#include <sstream>

#include "fbdebias/error.hpp"

namespace fbd {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != shape_size(shape_)) {
    fail(ErrorCode::ShapeMismatch, "tensor value count " + std::to_string(values_.size()) +
                                       " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor(Shape{rows, cols}, std::vector<double>(values));
}

double Tensor::item() const {
  if (!is_scalar()) fail(ErrorCode::ShapeMismatch, "item() on non-scalar tensor " + shape_string(shape_));
  return values_[0];
}

void Tensor::fill(double v) {
  for (double& x : values_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : values_)
    if (!std::isfinite(x)) return false;
  return true;
}

std::size_t ParameterSet::add(std::string name, Tensor value) {
  names.push_back(std::move(name));
  values.push_back(std::move(value));
  return values.size() - 1;
}

std::size_t ParameterSet::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  fail(ErrorCode::InvalidArgument, "unknown parameter '" + name + "'");
}

std::size_t ParameterSet::element_count() const {
  std::size_t n = 0;
  for (const auto& t : values) n += t.size();
  return n;
}

double ParameterSet::squared_norm() const {
  double s = 0.0;
  for (const auto& t : values)
    for (double x : t.values()) s += x * x;
  return s;
}

std::vector<Tensor> ParameterSet::zero_gradients() const {
  std::vector<Tensor> g;
  g.reserve(values.size());
  for (const auto& t : values) g.push_back(Tensor::zeros_like(t));
  return g;
}

}  // namespace fbd
