// SPDX-License-Identifier: Apache-2.0
//
// Token ditching: tokens are split into a selected group t and an unselected
// group t-bar. Both groups run the ordinary forward, but only the selected
// group keeps activations and receives gradient. Attention of the selected
// queries reads keys/values of every token; the unselected group's keys and
// values are held as constants, and the causal mask is evaluated on original
// positions.

#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "tokenseek/cache.hpp"
#include "tokenseek/lora.hpp"
#include "tokenseek/model.hpp"

namespace tokenseek {

class SelectionMask {
 public:
  SelectionMask() = default;

  // Throws std::invalid_argument on an empty selection, duplicates or
  // indices >= n.
  static SelectionMask from_selected(std::size_t n, std::vector<std::size_t> selected);
  static SelectionMask all(std::size_t n);

  std::size_t n() const { return n_; }
  const std::vector<std::size_t>& selected() const { return selected_; }
  const std::vector<std::size_t>& unselected() const { return unselected_; }
  bool is_selected(std::size_t pos) const;
  bool all_selected() const { return selected_.size() == n_; }

  // Regrouped index -> original position, for the order [unselected, selected].
  std::vector<std::size_t> permutation() const;
  // Original position -> regrouped index.
  std::vector<std::size_t> inverse_permutation() const;

  friend bool operator==(const SelectionMask&, const SelectionMask&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> selected_;
  std::vector<std::size_t> unselected_;
};

// Number of selected tokens for ratio r: max(1, round-half-up(r * n)).
// Throws std::invalid_argument unless 0 < r <= 1.
std::size_t selection_size(std::size_t n, double ratio);

// Rows of `hidden` split into (selected, unselected), each in ascending original order.
std::pair<Matrix, Matrix> partition(const Matrix& hidden, const SelectionMask& mask);
// Inverse of partition.
Matrix reorganize(const Matrix& out_selected, const Matrix& out_unselected, const SelectionMask& mask);

struct SelectiveCache {
  SelectionMask mask;
  bool adapted = false;
  bool frozen_backbone = false;
  TensorStash stash;

  std::size_t total_scalars() const { return stash.total_scalars(); }
};

struct SplitOptions {
  // Skip tensors that only feed backbone weight gradients.
  bool frozen_backbone = false;
};

struct SplitForwardResult {
  double loss = 0.0;
  std::size_t target_count = 0;
  Matrix logits;  // original order
  SelectiveCache cache;
  std::vector<Matrix> final_attn;  // original order, one n x n per head
};

SplitForwardResult forward_split(const Parameters& params, const TokenIds& tokens, const TokenIds& targets,
                                 const SelectionMask& mask, const AdapterContext& adapters = {},
                                 SplitOptions options = {});

struct DitchedGradients {
  Gradients backbone;
  AdapterGradients adapters;
};

// Gradients of the ditched graph: unselected-token paths are constants.
Gradients backward_ditched(const Parameters& params, const SelectiveCache& cache, const TokenIds& tokens,
                           const TokenIds& targets, const SelectionMask& mask);

// As backward_ditched, with adapters. Backbone gradients stay zero when the
// cache was built with a frozen backbone.
DitchedGradients backward_ditched(const Parameters& params, const SelectiveCache& cache, const TokenIds& tokens,
                                  const TokenIds& targets, const SelectionMask& mask, const AdapterContext& adapters);

}  // namespace tokenseek
