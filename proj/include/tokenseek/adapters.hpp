// SPDX-License-Identifier: Apache-2.0
//
// Attaching low-rank adapters to a frozen backbone and running the ditched
// forward/backward with gradients flowing to the adapters only.

#pragma once

#include <cstdint>
#include <vector>

#include "tokenseek/ditcher.hpp"
#include "tokenseek/lora.hpp"
#include "tokenseek/model.hpp"

namespace tokenseek {

struct AdaptedParameters {
  Parameters backbone;  // frozen
  AdapterSet adapters;  // trainable
};

// Builds one adapter per (layer, target). down ~ N(0, init_scale) from
// config.seed, up = 0, so the adapted model starts identical to the backbone.
// Throws std::invalid_argument on an empty or duplicated target list.
AdapterSet attach(const ModelConfig& model, const LoraConfig& config);
AdaptedParameters attach(Parameters params, const LoraConfig& config);

// Parses a comma separated target list such as "ff1,ff2"; unknown names throw.
std::vector<ProjTarget> parse_targets(const std::string& list);

// Ditched forward with the backbone frozen. `training` enables adapter dropout;
// `stream` keys the dropout mask (e.g. one value per optimizer step and instance).
SplitForwardResult adapted_forward(const AdaptedParameters& model, const TokenIds& tokens, const TokenIds& targets,
                                   const SelectionMask& mask, bool training = false, std::uint64_t stream = 0);

// Adapter gradients of the ditched graph. Must receive the same training and
// stream values as the forward so the dropout mask is replayed.
AdapterGradients adapted_backward(const AdaptedParameters& model, const SelectiveCache& cache, const TokenIds& tokens,
                                  const TokenIds& targets, bool training = false, std::uint64_t stream = 0);

}  // namespace tokenseek
