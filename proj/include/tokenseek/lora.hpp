// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapter types. The forward/backward kernels in the model and the
// ditcher consult an AdapterSet when one is supplied; the attach/train
// entry points live in adapters.hpp.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tokenseek/matrix.hpp"

namespace tokenseek {

enum class ProjTarget : std::uint8_t { kQuery, kKey, kValue, kOutput, kFfnUp, kFfnDown };

std::string_view target_name(ProjTarget t);
// Accepts "q", "k", "v", "o", "ff1", "ff2"; nullopt otherwise.
std::optional<ProjTarget> parse_target(std::string_view name);

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
  double dropout = 0.05;
  std::uint64_t seed = 0;
  double init_scale = 0.02;  // std of the down projection; up starts at zero
  std::vector<ProjTarget> targets{ProjTarget::kFfnUp, ProjTarget::kFfnDown};

  double scale() const { return alpha / static_cast<double>(rank); }
};

struct LoraAdapter {
  ProjTarget target;
  int layer;
  Matrix down;  // in x rank
  Matrix up;    // rank x out
};

class AdapterSet {
 public:
  AdapterSet() = default;
  AdapterSet(LoraConfig config, std::vector<LoraAdapter> adapters);

  const LoraConfig& config() const { return config_; }
  std::vector<LoraAdapter>& adapters() { return adapters_; }
  const std::vector<LoraAdapter>& adapters() const { return adapters_; }

  const LoraAdapter* find(int layer, ProjTarget target) const;
  LoraAdapter* find(int layer, ProjTarget target);
  std::size_t parameter_count() const;

  // Same layout with every matrix zeroed; used as the gradient container.
  AdapterSet zeros_like() const;

 private:
  LoraConfig config_;
  std::vector<LoraAdapter> adapters_;
};

using AdapterGradients = AdapterSet;

// Dropout on the adapter input is keyed by (seed, stream, layer, target,
// original position, column), so a mask can be replayed in backward and is
// identical whether tokens are processed in original or regrouped order.
struct AdapterContext {
  const AdapterSet* set = nullptr;
  bool training = false;
  std::uint64_t stream = 0;

  bool active() const { return set != nullptr; }
  bool dropout_on() const { return set && training && set->config().dropout > 0.0; }
};

// Inverted-dropout multiplier (0 or 1/(1-p)) for one input element.
double dropout_multiplier(const AdapterContext& ctx, int layer, ProjTarget target, std::size_t position,
                          std::size_t col);

}  // namespace tokenseek
