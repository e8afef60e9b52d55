// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/memacct.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace tokenseek {

std::string_view category_name(MemCategory c) {
  switch (c) {
    case MemCategory::kAttentionMaps: return "attention_maps";
    case MemCategory::kQkv: return "qkv";
    case MemCategory::kFfnPreact: return "ffn_preact";
    case MemCategory::kHidden: return "hidden";
    case MemCategory::kNormStats: return "norm_stats";
    case MemCategory::kKvValueOnly: return "kv_value_only";
    case MemCategory::kHead: return "head";
    case MemCategory::kAdapter: return "adapter";
  }
  return "unknown";
}

MemCategory category_of(CacheKind kind) {
  switch (kind) {
    case CacheKind::kAttnProb: return MemCategory::kAttentionMaps;
    case CacheKind::kQuery:
    case CacheKind::kKey:
    case CacheKind::kValue: return MemCategory::kQkv;
    case CacheKind::kFfnPre: return MemCategory::kFfnPreact;
    case CacheKind::kNorm1Hat:
    case CacheKind::kAttnConcat:
    case CacheKind::kNorm2Hat:
    case CacheKind::kFfnAct:
    case CacheKind::kFinalHat: return MemCategory::kHidden;
    case CacheKind::kNorm1Rstd:
    case CacheKind::kNorm2Rstd:
    case CacheKind::kFinalRstd: return MemCategory::kNormStats;
    case CacheKind::kKeyFrozen:
    case CacheKind::kValueFrozen: return MemCategory::kKvValueOnly;
    case CacheKind::kProbs: return MemCategory::kHead;
    case CacheKind::kAdapterRank: return MemCategory::kAdapter;
  }
  return MemCategory::kHidden;
}

MemoryReport count_stash(const TensorStash& stash) {
  MemoryReport r;
  for (const auto& e : stash.entries()) {
    const std::size_t n = e.value.rows() * e.value.cols();
    r.scalars[static_cast<std::size_t>(category_of(e.kind))] += n;
    r.total_scalars += n;
  }
  r.peak_scalars = r.total_scalars;
  r.average_scalars = static_cast<double>(r.total_scalars);
  return r;
}

MemoryReport count_cache(const ActivationCache& cache) { return count_stash(cache.stash); }
MemoryReport count_cache(const SelectiveCache& cache) { return count_stash(cache.stash); }

std::string MemoryReport::to_table() const {
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-16s %16s\n", "category", "scalars");
  os << buf;
  for (std::size_t i = 0; i < kMemCategoryCount; ++i) {
    std::snprintf(buf, sizeof buf, "%-16s %16zu\n", std::string(category_name(static_cast<MemCategory>(i))).c_str(),
                  scalars[i]);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-16s %16zu\n%-16s %16zu\n%-16s %16.3f\n", "total", total_scalars, "peak",
                peak_scalars, "average", average_scalars);
  os << buf;
  if (ratio_vs_full) {
    std::snprintf(buf, sizeof buf, "%-16s %16.6f\n", "ratio_vs_full", *ratio_vs_full);
    os << buf;
  }
  return os.str();
}

std::string MemoryReport::to_lines() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < kMemCategoryCount; ++i) {
    os << category_name(static_cast<MemCategory>(i)) << ',' << scalars[i] << '\n';
  }
  os << "total," << total_scalars << '\n' << "peak," << peak_scalars << '\n';
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", average_scalars);
  os << "average," << buf << '\n';
  if (ratio_vs_full) {
    std::snprintf(buf, sizeof buf, "%.17g", *ratio_vs_full);
    os << "ratio_vs_full," << buf << '\n';
  }
  return os.str();
}

namespace {

struct Dims {
  std::size_t L, H, F, V, heads;
};

Dims dims_of(const ModelConfig& c) {
  c.validate();
  return {static_cast<std::size_t>(c.n_layers), static_cast<std::size_t>(c.hidden), static_cast<std::size_t>(c.ff_dim),
          static_cast<std::size_t>(c.vocab), static_cast<std::size_t>(c.n_heads)};
}

// Per-layer scalars for k query rows attending over s keys:
// attention maps, Q/K/V, two norm hats, attention concat, two norm stats,
// feed-forward pre-activation and activation.
std::size_t layer_rows_part(const Dims& d, std::size_t k, std::size_t s) {
  return d.heads * k * s + 3 * k * d.H + 3 * k * d.H + 2 * k + 2 * k * d.F;
}

// Final norm hat, its stats, and the head softmax.
std::size_t head_rows_part(const Dims& d, std::size_t k) { return k * d.H + k + k * d.V; }

}  // namespace

std::size_t estimate_full(const ModelConfig& config, std::size_t batch, std::size_t seq) {
  if (seq > static_cast<std::size_t>(config.max_seq)) {
    throw std::invalid_argument("estimate_full: s exceeds max_seq");
  }
  const Dims d = dims_of(config);
  return batch * (d.L * layer_rows_part(d, seq, seq) + head_rows_part(d, seq));
}

DitchedEstimate estimate_ditched_breakdown(const ModelConfig& config, std::size_t batch, std::size_t seq,
                                           double ratio) {
  if (seq > static_cast<std::size_t>(config.max_seq)) {
    throw std::invalid_argument("estimate_ditched: s exceeds max_seq");
  }
  const Dims d = dims_of(config);
  DitchedEstimate e;
  e.selected_rows = selection_size(seq, ratio);
  const std::size_t k = e.selected_rows;
  e.selected_part = batch * (d.L * layer_rows_part(d, k, seq) + head_rows_part(d, k));
  e.kv_overhead = batch * d.L * 2 * (seq - k) * d.H;
  return e;
}

std::size_t estimate_ditched(const ModelConfig& config, std::size_t batch, std::size_t seq, double ratio) {
  return estimate_ditched_breakdown(config, batch, seq, ratio).total();
}

DitchedEstimate estimate_adapted_breakdown(const ModelConfig& config, const LoraConfig& lora, std::size_t batch,
                                           std::size_t seq, double ratio) {
  DitchedEstimate e = estimate_ditched_breakdown(config, batch, seq, ratio);
  const Dims d = dims_of(config);
  const std::size_t k = e.selected_rows;
  auto has = [&](ProjTarget t) { return std::find(lora.targets.begin(), lora.targets.end(), t) != lora.targets.end(); };
  std::size_t per_layer = 0;
  if (!has(ProjTarget::kOutput)) per_layer += k * d.H;
  if (!has(ProjTarget::kFfnDown)) per_layer += k * d.F;
  e.selected_part -= batch * d.L * per_layer;
  e.selected_part += batch * d.L * lora.targets.size() * k * static_cast<std::size_t>(lora.rank);
  return e;
}

std::size_t estimate_adapted(const ModelConfig& config, const LoraConfig& lora, std::size_t batch, std::size_t seq,
                             double ratio) {
  return estimate_adapted_breakdown(config, lora, batch, seq, ratio).total();
}

LeadingTerms leading_terms(std::size_t batch, std::size_t n_heads, std::size_t seq, std::size_t hidden) {
  LeadingTerms t;
  t.attention = batch * n_heads * seq * seq;
  t.hidden = batch * seq * hidden;
  t.total = t.attention + t.hidden;
  t.weights = hidden * hidden;
  t.activation_to_weight = static_cast<double>(t.total) / static_cast<double>(t.weights);
  return t;
}

}  // namespace tokenseek
