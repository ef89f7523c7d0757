#include "tpnt/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "tpnt/error.hpp"

namespace tpnt {

std::size_t shape_size(const Shape& shape) {
  if (shape.empty()) fail(Errc::InvalidShape, "empty shape");
  std::size_t n = 1;
  for (int e : shape) {
    if (e < 1) fail(Errc::InvalidShape, "extent < 1 in " + shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0f) {}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_size(shape_))
    fail(Errc::InvalidShape, "data length does not match " + shape_str(shape_));
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::constant(Shape shape, float value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::uniform(Shape shape, float lo, float hi, Rng& rng) {
  if (!(lo < hi)) fail(Errc::InvalidParams, "uniform requires lo < hi");
  Tensor t(std::move(shape));
  for (float& v : t.data_) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) fail(Errc::ShapeMismatch, "reshape " + shape_str(shape_) + " -> " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

void Tensor::fill(float value) {
  for (float& v : data_) v = value;
}

bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (a.shape() != b.shape())
    fail(Errc::ShapeMismatch, std::string(where) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Tensor zip_map(const Tensor& a, const Tensor& b, ZipOp op) {
  require_same_shape(a, b, "zip_map");
  Tensor out(a.shape());
  const std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) {
    switch (op) {
      case ZipOp::Add: out[i] = a[i] + b[i]; break;
      case ZipOp::Sub: out[i] = a[i] - b[i]; break;
      case ZipOp::Mul: out[i] = a[i] * b[i]; break;
    }
  }
  return out;
}

Tensor scale(const Tensor& t, float alpha) {
  Tensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = alpha * t[i];
  return out;
}

double frobenius_norm(const Tensor& t) {
  require_finite(t, "frobenius_norm");
  double acc = 0.0;
  for (float v : t.data()) acc += static_cast<double>(v) * v;
  return std::sqrt(acc);
}

double sum(const Tensor& t) {
  double acc = 0.0;
  for (float v : t.data()) acc += v;
  return acc;
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

double mean_abs(const Tensor& t) {
  if (t.empty()) return 0.0;
  double acc = 0.0;
  for (float v : t.data()) acc += std::fabs(static_cast<double>(v));
  return acc / static_cast<double>(t.size());
}

bool all_finite(const Tensor& t) {
  for (float v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

void require_finite(const Tensor& t, const char* where) {
  if (!all_finite(t)) fail(Errc::NonFinite, where);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         (a.size() == 0 || std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(float)) == 0);
}

}  // namespace tpnt
