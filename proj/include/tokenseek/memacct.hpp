// SPDX-License-Identifier: Apache-2.0
//
// Activation memory accounting in cached 64-bit scalars. count_cache
// enumerates what a cache actually holds; the estimators give the same
// numbers in closed form for this implementation's cache inventory.

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "tokenseek/ditcher.hpp"
#include "tokenseek/model.hpp"

namespace tokenseek {

enum class MemCategory : std::size_t {
  kAttentionMaps,
  kQkv,
  kFfnPreact,
  kHidden,
  kNormStats,
  kKvValueOnly,
  kHead,
  kAdapter,
};
inline constexpr std::size_t kMemCategoryCount = 8;

std::string_view category_name(MemCategory c);
MemCategory category_of(CacheKind kind);

struct MemoryReport {
  std::array<std::size_t, kMemCategoryCount> scalars{};
  std::size_t total_scalars = 0;
  std::size_t peak_scalars = 0;
  double average_scalars = 0.0;
  std::optional<double> ratio_vs_full;

  std::size_t operator[](MemCategory c) const { return scalars[static_cast<std::size_t>(c)]; }
  // Aligned text table.
  std::string to_table() const;
  // Machine-readable `category,scalars` lines, including total/peak/average.
  std::string to_lines() const;
};

MemoryReport count_stash(const TensorStash& stash);
MemoryReport count_cache(const ActivationCache& cache);
MemoryReport count_cache(const SelectiveCache& cache);

// Scalars cached by a full forward of batch B and length s.
std::size_t estimate_full(const ModelConfig& config, std::size_t batch, std::size_t seq);

struct DitchedEstimate {
  std::size_t selected_rows = 0;     // k
  std::size_t selected_part = 0;     // everything that scales with k
  std::size_t kv_overhead = 0;       // value-only K/V of unselected tokens
  std::size_t total() const { return selected_part + kv_overhead; }
};

DitchedEstimate estimate_ditched_breakdown(const ModelConfig& config, std::size_t batch, std::size_t seq,
                                           double ratio);
std::size_t estimate_ditched(const ModelConfig& config, std::size_t batch, std::size_t seq, double ratio);

// Split forward with LoRA adapters over a frozen backbone: the attention
// concat and feed-forward activation are kept only in layers whose output or
// down projection carries an adapter, and every adapter keeps its k x rank
// intermediate.
DitchedEstimate estimate_adapted_breakdown(const ModelConfig& config, const LoraConfig& lora, std::size_t batch,
                                           std::size_t seq, double ratio);
std::size_t estimate_adapted(const ModelConfig& config, const LoraConfig& lora, std::size_t batch, std::size_t seq,
                             double ratio);

// The asymptotic two-term model B*n_h*s^2 + B*s*H of a single layer, next to
// the H^2 weight count of one projection.
struct LeadingTerms {
  std::size_t attention = 0;
  std::size_t hidden = 0;
  std::size_t total = 0;
  std::size_t weights = 0;
  double activation_to_weight = 0.0;
};
LeadingTerms leading_terms(std::size_t batch, std::size_t n_heads, std::size_t seq, std::size_t hidden);

}  // namespace tokenseek
