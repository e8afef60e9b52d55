// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/cache.hpp"

#include <stdexcept>
#include <string>

namespace tokenseek {

std::string_view cache_kind_name(CacheKind kind) {
  switch (kind) {
    case CacheKind::kNorm1Hat: return "norm1_hat";
    case CacheKind::kNorm1Rstd: return "norm1_rstd";
    case CacheKind::kQuery: return "query";
    case CacheKind::kKey: return "key";
    case CacheKind::kValue: return "value";
    case CacheKind::kKeyFrozen: return "key_frozen";
    case CacheKind::kValueFrozen: return "value_frozen";
    case CacheKind::kAttnProb: return "attn_prob";
    case CacheKind::kAttnConcat: return "attn_concat";
    case CacheKind::kNorm2Hat: return "norm2_hat";
    case CacheKind::kNorm2Rstd: return "norm2_rstd";
    case CacheKind::kFfnPre: return "ffn_pre";
    case CacheKind::kFfnAct: return "ffn_act";
    case CacheKind::kFinalHat: return "final_hat";
    case CacheKind::kFinalRstd: return "final_rstd";
    case CacheKind::kProbs: return "probs";
    case CacheKind::kAdapterRank: return "adapter_rank";
  }
  return "unknown";
}

const Matrix& TensorStash::put(CacheKind kind, int layer, int sub, Matrix value) {
  const auto key = std::make_tuple(kind, layer, sub);
  if (index_.contains(key)) {
    throw std::logic_error("TensorStash: duplicate entry " + std::string(cache_kind_name(kind)) +
                           " layer " + std::to_string(layer));
  }
  running_total_ += value.size();
  index_.emplace(key, entries_.size());
  entries_.push_back({kind, layer, sub, std::move(value)});
  return entries_.back().value;
}

const Matrix& TensorStash::get(CacheKind kind, int layer, int sub) const {
  auto it = index_.find(std::make_tuple(kind, layer, sub));
  if (it == index_.end()) {
    throw std::out_of_range("TensorStash: missing " + std::string(cache_kind_name(kind)) + " layer " +
                            std::to_string(layer) + " sub " + std::to_string(sub));
  }
  return entries_[it->second].value;
}

bool TensorStash::contains(CacheKind kind, int layer, int sub) const {
  return index_.contains(std::make_tuple(kind, layer, sub));
}

std::size_t TensorStash::total_scalars() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += e.value.rows() * e.value.cols();
  return total;
}

}  // namespace tokenseek
