// Copyright 2026 The beamsplat Authors
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

#pragma once

#include "beamsplat/common.hpp"

#include <random>
#include <vector>

namespace beamsplat {

/// Fully connected ReLU network evaluated column-batched: inputs are
/// (in_dim x N), outputs (out_dim x N). The last layer is linear.
template <typename S>
struct Mlp {
  std::vector<MatX<S>> weight;  // (out x in) per layer
  std::vector<VecX<S>> bias;

  /// Activations kept for the backward pass.
  struct Cache {
    MatX<S> input;
    std::vector<MatX<S>> hidden;  // post-ReLU, one per hidden layer
  };

  static Mlp create(const std::vector<int>& dims);
  static Mlp zeros_like(const Mlp& other);

  int in_dim() const { return static_cast<int>(weight.front().cols()); }
  int out_dim() const { return static_cast<int>(weight.back().rows()); }
  std::size_t parameter_count() const;

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
  void init_uniform(std::mt19937_64& rng);
  void set_zero();

  MatX<S> forward(const MatX<S>& x, Cache* cache = nullptr) const;

  /// Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
  MatX<S> backward(const Cache& cache, const MatX<S>& grad_out, Mlp& grad) const;

  bool all_finite() const;

  template <typename T>
  Mlp<T> cast() const {
    Mlp<T> out;
    for (const auto& w : weight) out.weight.push_back(w.template cast<T>());
    for (const auto& b : bias) out.bias.push_back(b.template cast<T>());
    return out;
  }
};

extern template struct Mlp<float>;
extern template struct Mlp<double>;

}  // namespace beamsplat
