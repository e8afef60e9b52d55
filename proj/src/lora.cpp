// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/lora.hpp"

#include <stdexcept>

namespace tokenseek {

std::string_view target_name(ProjTarget t) {
  switch (t) {
    case ProjTarget::kQuery: return "q";
    case ProjTarget::kKey: return "k";
    case ProjTarget::kValue: return "v";
    case ProjTarget::kOutput: return "o";
    case ProjTarget::kFfnUp: return "ff1";
    case ProjTarget::kFfnDown: return "ff2";
  }
  return "?";
}

std::optional<ProjTarget> parse_target(std::string_view name) {
  for (auto t : {ProjTarget::kQuery, ProjTarget::kKey, ProjTarget::kValue, ProjTarget::kOutput,
                 ProjTarget::kFfnUp, ProjTarget::kFfnDown}) {
    if (target_name(t) == name) return t;
  }
  return std::nullopt;
}

AdapterSet::AdapterSet(LoraConfig config, std::vector<LoraAdapter> adapters)
    : config_(std::move(config)), adapters_(std::move(adapters)) {
  if (config_.rank < 1) throw std::invalid_argument("LoraConfig: rank must be >= 1");
  if (config_.dropout < 0.0 || config_.dropout >= 1.0) {
    throw std::invalid_argument("LoraConfig: dropout must lie in [0, 1)");
  }
}

const LoraAdapter* AdapterSet::find(int layer, ProjTarget target) const {
  for (const auto& a : adapters_)
    if (a.layer == layer && a.target == target) return &a;
  return nullptr;
}

LoraAdapter* AdapterSet::find(int layer, ProjTarget target) {
  for (auto& a : adapters_)
    if (a.layer == layer && a.target == target) return &a;
  return nullptr;
}

std::size_t AdapterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& a : adapters_) n += a.down.size() + a.up.size();
  return n;
}

AdapterSet AdapterSet::zeros_like() const {
  AdapterSet z = *this;
  for (auto& a : z.adapters_) {
    a.down.fill(0.0);
    a.up.fill(0.0);
  }
  return z;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

double dropout_multiplier(const AdapterContext& ctx, int layer, ProjTarget target, std::size_t position,
                          std::size_t col) {
  if (!ctx.dropout_on()) return 1.0;
  const double p = ctx.set->config().dropout;
  std::uint64_t h = splitmix64(ctx.set->config().seed);
  h = splitmix64(h ^ ctx.stream);
  h = splitmix64(h ^ (static_cast<std::uint64_t>(layer) << 8 | static_cast<std::uint64_t>(target)));
  h = splitmix64(h ^ position);
  h = splitmix64(h ^ col);
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return u < p ? 0.0 : 1.0 / (1.0 - p);
}

}  // namespace tokenseek
