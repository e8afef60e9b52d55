// SPDX-License-Identifier: Apache-2.0
//
// Layer kernels shared by the full model path and the split (ditched) path.
// Both paths must call the same kernels in the same order so a split with
// every token selected reproduces the full computation bit for bit.

#pragma once

#include <span>
#include <vector>

#include "tokenseek/lora.hpp"
#include "tokenseek/matrix.hpp"
#include "tokenseek/model.hpp"

namespace tokenseek::detail {

inline constexpr double kNormEps = 1e-5;

struct NormOut {
  Matrix y;
  Matrix hat;
  Matrix rstd;  // rows x 1
};

NormOut layer_norm(const Matrix& x, const Matrix& gain, const Matrix& shift);
// Rebuilds the normalized output from a cached hat.
Matrix layer_norm_apply(const Matrix& hat, const Matrix& gain, const Matrix& shift);
// dgain / dshift may be null when the norm parameters are frozen.
Matrix layer_norm_backward(const Matrix& dy, const Matrix& hat, const Matrix& rstd, const Matrix& gain,
                           Matrix* dgain, Matrix* dshift);

Matrix embed(const Parameters& params, const TokenIds& tokens, std::span<const std::size_t> positions);

// x W + b, plus scale * (drop(x) down) up when an adapter is attached to
// (layer, target). `rank_out` receives drop(x) down when non-null.
Matrix project(const Matrix& x, const Matrix& w, const Matrix& b, const AdapterContext& ctx, int layer,
               ProjTarget target, std::span<const std::size_t> positions, Matrix* rank_out);

struct ProjectGrads {
  Matrix* dw = nullptr;  // null when the backbone is frozen
  Matrix* db = nullptr;
  AdapterGradients* adapter = nullptr;
};

// Returns dL/dx. `rank` is the cached drop(x) down for adapted projections.
Matrix project_backward(const Matrix& dy, const Matrix& x, const Matrix& w, const AdapterContext& ctx, int layer,
                        ProjTarget target, std::span<const std::size_t> positions, const Matrix* rank,
                        const ProjectGrads& grads);

struct AttentionOut {
  Matrix concat;              // queries x hidden
  std::vector<Matrix> probs;  // per head, queries x keys
};

AttentionOut attention(const Matrix& q, const Matrix& k, const Matrix& v, const AllowMask& allowed, int n_heads);

struct AttentionGrads {
  Matrix dq, dk, dv;
};

AttentionGrads attention_backward(const Matrix& dconcat, const Matrix& q, const Matrix& k, const Matrix& v,
                                  const std::vector<Matrix>& probs, int n_heads);

// Row-wise cross-entropy terms. Rows with kNoTarget contribute nothing.
struct CrossEntropyOut {
  std::vector<double> row_loss;  // 0 for rows without a target
  Matrix probs;
};
CrossEntropyOut cross_entropy_rows(const Matrix& logits, std::span<const int> targets);

// (probs - onehot) / count for rows with a target, zero elsewhere.
Matrix cross_entropy_backward(const Matrix& probs, std::span<const int> targets, std::size_t count);

std::size_t count_targets(const TokenIds& targets);

// Mean over defined targets, summing row losses in ascending original position.
double mean_loss(const std::vector<double>& row_loss_in_original_order, std::size_t count);

}  // namespace tokenseek::detail
