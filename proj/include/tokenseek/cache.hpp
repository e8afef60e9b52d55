// SPDX-License-Identifier: Apache-2.0
//
// Keyed store for tensors kept alive between forward and backward. Both the
// full activation cache and the selective cache are built on it, so the
// memory accountant can enumerate exactly what is held.

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <string_view>
#include <tuple>
#include <vector>

#include "tokenseek/matrix.hpp"

namespace tokenseek {

enum class CacheKind : std::uint8_t {
  kNorm1Hat,     // normalized block input before attention
  kNorm1Rstd,    // reciprocal std per row
  kQuery,
  kKey,
  kValue,
  kKeyFrozen,    // keys of unselected tokens, value only
  kValueFrozen,  // values of unselected tokens, value only
  kAttnProb,     // one entry per head
  kAttnConcat,   // concatenated head outputs, input of W^O
  kNorm2Hat,
  kNorm2Rstd,
  kFfnPre,       // pre-activation a = h W1 + b1
  kFfnAct,       // gelu(a), input of W2
  kFinalHat,
  kFinalRstd,
  kProbs,        // softmax of the LM head logits
  kAdapterRank,  // low-rank adapter intermediate x * down
};

std::string_view cache_kind_name(CacheKind kind);

struct CacheEntry {
  CacheKind kind;
  int layer;  // -1 for entries outside the decoder stack
  int sub;    // head index or adapter target, 0 otherwise
  Matrix value;
};

class TensorStash {
 public:
  const Matrix& put(CacheKind kind, int layer, int sub, Matrix value);
  const Matrix& put(CacheKind kind, int layer, Matrix value) { return put(kind, layer, 0, std::move(value)); }

  // Throws std::out_of_range when the entry was never stored.
  const Matrix& get(CacheKind kind, int layer, int sub = 0) const;
  bool contains(CacheKind kind, int layer, int sub = 0) const;

  const std::deque<CacheEntry>& entries() const { return entries_; }

  // Sum of rows*cols recomputed from the stored matrices.
  std::size_t total_scalars() const;
  // Counter maintained as entries are stored.
  std::size_t running_total() const { return running_total_; }

 private:
  std::deque<CacheEntry> entries_;  // stable references across put()
  std::map<std::tuple<CacheKind, int, int>, std::size_t> index_;
  std::size_t running_total_ = 0;
};

}  // namespace tokenseek
