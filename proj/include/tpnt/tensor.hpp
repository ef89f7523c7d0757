#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tpnt/rng.hpp"

namespace tpnt {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float tensor. Feature maps are H x W x C, conv kernels
// m x m x D x C. Reductions accumulate in double.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape);
  static Tensor constant(Shape shape, float value);
  // Consumes rng in row-major order.
  static Tensor uniform(Shape shape, float lo, float hi, Rng& rng);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* ptr() { return data_.data(); }
  const float* ptr() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // H x W x C indexing for rank-3 tensors.
  float& at(int h, int w, int c) {
    return data_[(static_cast<std::size_t>(h) * shape_[1] + w) * shape_[2] + c];
  }
  float at(int h, int w, int c) const {
    return data_[(static_cast<std::size_t>(h) * shape_[1] + w) * shape_[2] + c];
  }

  Tensor reshaped(Shape shape) const;
  void fill(float value);

  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::vector<float> data_;
};

enum class ZipOp { Add, Sub, Mul };

Tensor zip_map(const Tensor& a, const Tensor& b, ZipOp op);
Tensor scale(const Tensor& t, float alpha);

double frobenius_norm(const Tensor& t);
double sum(const Tensor& t);
double dot(const Tensor& a, const Tensor& b);
double mean_abs(const Tensor& t);

bool all_finite(const Tensor& t);
// Throws NonFinite if any entry is NaN or Inf.
void require_finite(const Tensor& t, const char* where);
void require_same_shape(const Tensor& a, const Tensor& b, const char* where);

// Bitwise equality of shape and data, treating -0 and +0 as different.
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace tpnt
