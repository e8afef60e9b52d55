// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/adapters.hpp"

#include <algorithm>
#include <random>
#include <sstream>
#include <stdexcept>

namespace tokenseek {

namespace {

std::pair<std::size_t, std::size_t> io_dims(const ModelConfig& c, ProjTarget t) {
  const auto H = static_cast<std::size_t>(c.hidden);
  const auto F = static_cast<std::size_t>(c.ff_dim);
  switch (t) {
    case ProjTarget::kFfnUp: return {H, F};
    case ProjTarget::kFfnDown: return {F, H};
    default: return {H, H};
  }
}

}  // namespace

std::vector<ProjTarget> parse_targets(const std::string& list) {
  std::vector<ProjTarget> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = parse_target(item);
    if (!t) throw std::invalid_argument("unknown adapter target '" + item + "' (expected q,k,v,o,ff1,ff2)");
    out.push_back(*t);
  }
  return out;
}

AdapterSet attach(const ModelConfig& model, const LoraConfig& config) {
  model.validate();
  if (config.targets.empty()) throw std::invalid_argument("attach: no adapter targets");
  auto sorted = config.targets;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw std::invalid_argument("attach: duplicated adapter target");
  }
  if (config.init_scale < 0.0) throw std::invalid_argument("attach: init_scale must be >= 0");
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  const auto r = static_cast<std::size_t>(config.rank);
  std::vector<LoraAdapter> adapters;
  for (int l = 0; l < model.n_layers; ++l) {
    for (ProjTarget t : config.targets) {
      const auto [in, out] = io_dims(model, t);
      LoraAdapter a{t, l, Matrix(in, r), Matrix(r, out)};
      for (double& v : a.down.data()) v = config.init_scale * dist(rng);
      adapters.push_back(std::move(a));
    }
  }
  return AdapterSet(config, std::move(adapters));
}

AdaptedParameters attach(Parameters params, const LoraConfig& config) {
  AdapterSet set = attach(params.config, config);
  return {std::move(params), std::move(set)};
}

SplitForwardResult adapted_forward(const AdaptedParameters& model, const TokenIds& tokens, const TokenIds& targets,
                                   const SelectionMask& mask, bool training, std::uint64_t stream) {
  const AdapterContext ctx{&model.adapters, training, stream};
  return forward_split(model.backbone, tokens, targets, mask, ctx, SplitOptions{true});
}

AdapterGradients adapted_backward(const AdaptedParameters& model, const SelectiveCache& cache, const TokenIds& tokens,
                                  const TokenIds& targets, bool training, std::uint64_t stream) {
  const AdapterContext ctx{&model.adapters, training, stream};
  return backward_ditched(model.backbone, cache, tokens, targets, cache.mask, ctx).adapters;
}

}  // namespace tokenseek
