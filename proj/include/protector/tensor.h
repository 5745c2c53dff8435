// Copyright 2026 The Protector Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef PROTECTOR_TENSOR_H_
#define PROTECTOR_TENSOR_H_

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace protector {

// Dense row-major tensor of doubles. Owns its storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  // Row pointer for a rank-2 tensor.
  double* row(std::size_t r) { return values_.data() + r * shape_[1]; }
  const double* row(std::size_t r) const {
    return values_.data() + r * shape_[1];
  }

  void Fill(double v);
  bool AllFinite() const;
  bool SameShape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

std::string ShapeString(const std::vector<std::size_t>& shape);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

}  // namespace protector

#endif  // PROTECTOR_TENSOR_H_
