// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "tokenseek/ditcher.hpp"
#include "tokenseek/matrix.hpp"
#include "tokenseek/model.hpp"

namespace tokenseek::testing {

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(r, c);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

inline TokenIds random_tokens(std::mt19937_64& rng, std::size_t n, int vocab) {
  std::uniform_int_distribution<int> dist(0, vocab - 1);
  TokenIds t(n);
  for (int& v : t) v = dist(rng);
  return t;
}

inline SelectionMask random_mask(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> count(1, n);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count(rng));
  return SelectionMask::from_selected(n, idx);
}

// Tiny model whose norm gains/shifts and biases are perturbed away from their
// init values, so every parameter has a non-trivial gradient.
inline Parameters random_params(const ModelConfig& config, std::uint64_t seed, double scale = 0.3) {
  Parameters p = init_params(config, scale);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.1);
  for (auto& [name, m] : p.named_tensors()) {
    for (double& v : m->data()) v += dist(rng);
  }
  return p;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

inline double max_abs_diff(const Parameters& a, const Parameters& b) {
  double d = 0.0;
  auto ta = a.named_tensors();
  auto tb = b.named_tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) d = std::max(d, max_abs_diff(*ta[i].second, *tb[i].second));
  return d;
}

}  // namespace tokenseek::testing
