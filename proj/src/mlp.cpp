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

#include "beamsplat/mlp.hpp"

#include <cmath>

namespace beamsplat {

template <typename S>
Mlp<S> Mlp<S>::create(const std::vector<int>& dims) {
  if (dims.size() < 2) throw DomainError("mlp needs at least an input and an output width");
  Mlp m;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    if (dims[l] <= 0 || dims[l + 1] <= 0) throw DomainError("mlp widths must be positive");
    m.weight.push_back(MatX<S>::Zero(dims[l + 1], dims[l]));
    m.bias.push_back(VecX<S>::Zero(dims[l + 1]));
  }
  return m;
}

template <typename S>
Mlp<S> Mlp<S>::zeros_like(const Mlp& other) {
  Mlp m;
  for (const auto& w : other.weight) m.weight.push_back(MatX<S>::Zero(w.rows(), w.cols()));
  for (const auto& b : other.bias) m.bias.push_back(VecX<S>::Zero(b.size()));
  return m;
}

template <typename S>
std::size_t Mlp<S>::parameter_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weight.size(); ++l) n += weight[l].size() + bias[l].size();
  return n;
}

template <typename S>
void Mlp<S>::init_uniform(std::mt19937_64& rng) {
  for (std::size_t l = 0; l < weight.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(weight[l].cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index j = 0; j < weight[l].cols(); ++j)
      for (Eigen::Index i = 0; i < weight[l].rows(); ++i) weight[l](i, j) = static_cast<S>(u(rng));
    for (Eigen::Index i = 0; i < bias[l].size(); ++i) bias[l](i) = static_cast<S>(u(rng));
  }
}

template <typename S>
void Mlp<S>::set_zero() {
  for (auto& w : weight) w.setZero();
  for (auto& b : bias) b.setZero();
}

template <typename S>
MatX<S> Mlp<S>::forward(const MatX<S>& x, Cache* cache) const {
  if (x.rows() != in_dim()) throw DomainError("mlp input width mismatch");
  if (cache) {
    cache->input = x;
    cache->hidden.clear();
  }
  MatX<S> h = x;
  const std::size_t layers = weight.size();
  for (std::size_t l = 0; l < layers; ++l) {
    MatX<S> z = weight[l] * h;
    z.colwise() += bias[l];
    if (l + 1 < layers) {
      z = z.cwiseMax(S(0));
      if (cache) cache->hidden.push_back(z);
    }
    h = std::move(z);
  }
  return h;
}

template <typename S>
MatX<S> Mlp<S>::backward(const Cache& cache, const MatX<S>& grad_out, Mlp& grad) const {
  MatX<S> g = grad_out;
  for (std::size_t l = weight.size(); l-- > 0;) {
    const MatX<S>& in = l == 0 ? cache.input : cache.hidden[l - 1];
    grad.weight[l].noalias() += g * in.transpose();
    grad.bias[l] += g.rowwise().sum();
    MatX<S> g_in = weight[l].transpose() * g;
    if (l > 0) g_in = (in.array() > S(0)).select(g_in, S(0));
    g = std::move(g_in);
  }
  return g;
}

template <typename S>
bool Mlp<S>::all_finite() const {
  for (std::size_t l = 0; l < weight.size(); ++l)
    if (!weight[l].allFinite() || !bias[l].allFinite()) return false;
  return true;
}

template struct Mlp<float>;
template struct Mlp<double>;

}  // namespace beamsplat
