// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "tokenseek/adapters.hpp"
#include "tokenseek/verify.hpp"

using namespace tokenseek;
using namespace tokenseek::testing;

namespace {

ModelConfig tiny(int layers = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.hidden = 8;
  c.n_heads = 2;
  c.ff_dim = 16;
  c.vocab = 13;
  c.max_seq = 12;
  c.seed = 5;
  return c;
}

LoraConfig lora(std::vector<ProjTarget> targets, double dropout = 0.0, int rank = 2) {
  LoraConfig c;
  c.rank = rank;
  c.alpha = 4.0;
  c.dropout = dropout;
  c.seed = 77;
  c.init_scale = 0.3;
  c.targets = std::move(targets);
  return c;
}

const std::vector<ProjTarget> kAll{ProjTarget::kQuery, ProjTarget::kKey, ProjTarget::kValue,
                                   ProjTarget::kOutput, ProjTarget::kFfnUp, ProjTarget::kFfnDown};

// Adapters with a non-zero up matrix, so every adapter tensor has a gradient.
AdaptedParameters trained_like(const ModelConfig& c, const LoraConfig& lc, std::uint64_t seed) {
  AdaptedParameters m = attach(random_params(c, seed), lc);
  std::mt19937_64 rng(seed + 1);
  for (auto& a : m.adapters.adapters()) a.up = random_matrix(rng, a.up.rows(), a.up.cols(), 0.3);
  return m;
}

}  // namespace

TEST_CASE("attach leaves the model output unchanged") {
  const Parameters p = random_params(tiny(), 1);
  const AdaptedParameters m = attach(p, lora(kAll));
  const TokenIds t{1, 4, 2, 8, 3};
  const auto tg = next_token_targets(t);
  const auto base = forward_full(p, t, tg);
  const auto adapted = adapted_forward(m, t, tg, SelectionMask::all(5));
  CHECK(max_abs_diff(base.logits, adapted.logits) <= 1e-12);
  CHECK(adapted.loss == doctest::Approx(base.loss).epsilon(1e-12));
}

TEST_CASE("appendix adapter config gives a scale of two") {
  LoraConfig c;
  CHECK(c.rank == 8);
  CHECK(c.alpha == 16.0);
  CHECK(c.dropout == 0.05);
  CHECK(c.scale() == 2.0);
}

TEST_CASE("adapter parameter count is the shape sum") {
  const ModelConfig c = tiny();
  const AdapterSet s = attach(c, lora(kAll, 0.0, 3));
  // per layer: four H x H targets (8+8)*3 plus ff1 (8+16)*3 and ff2 (16+8)*3
  CHECK(s.parameter_count() == 2 * (4 * 48 + 72 + 72));
  for (const auto& a : s.adapters())
    for (double v : a.up.data()) CHECK(v == 0.0);
}

TEST_CASE("unknown or duplicate targets are rejected") {
  CHECK_THROWS_AS(parse_targets("ff1,gate"), std::invalid_argument);
  CHECK(parse_targets("q,ff2") == std::vector<ProjTarget>{ProjTarget::kQuery, ProjTarget::kFfnDown});
  CHECK_THROWS_AS(attach(tiny(), lora({ProjTarget::kQuery, ProjTarget::kQuery})), std::invalid_argument);
  CHECK_THROWS_AS(attach(tiny(), lora({})), std::invalid_argument);
}

TEST_CASE("adapter gradients match finite differences at full selection") {
  const ModelConfig c = tiny();
  const AdaptedParameters m = trained_like(c, lora(kAll), 2);
  const TokenIds t{3, 1, 4, 1, 5, 9};
  const auto tg = next_token_targets(t);
  const auto mask = SelectionMask::all(6);
  const auto fwd = adapted_forward(m, t, tg, mask);
  const AdapterGradients g = adapted_backward(m, fwd.cache, t, tg);
  const auto stats = verify::finite_difference_check(m.adapters, g, [&](const AdapterSet& a) {
    return forward_full(m.backbone, t, tg, AdapterContext{&a}).loss;
  });
  INFO(stats.worst);
  CHECK(stats.max_rel_err <= 1e-6);
  CHECK(stats.checked == m.adapters.parameter_count());
}

TEST_CASE("adapter gradients with dropout match finite differences under a fixed mask") {
  const ModelConfig c = tiny(1);
  const AdaptedParameters m = trained_like(c, lora({ProjTarget::kFfnUp, ProjTarget::kFfnDown, ProjTarget::kValue}, 0.3), 3);
  const TokenIds t{2, 7, 1, 8, 2};
  const auto tg = next_token_targets(t);
  const auto all = SelectionMask::all(5);
  const auto fwd_all = adapted_forward(m, t, tg, all, true, 42);
  const AdapterGradients g_all = adapted_backward(m, fwd_all.cache, t, tg, true, 42);
  const auto stats_all = verify::finite_difference_check(m.adapters, g_all, [&](const AdapterSet& a) {
    AdaptedParameters probe{m.backbone, a};
    return adapted_forward(probe, t, tg, all, true, 42).loss;
  });
  INFO(stats_all.worst);
  CHECK(stats_all.max_rel_err <= 1e-6);
}

TEST_CASE("ditched adapter gradients match finite differences of the ditched loss") {
  const ModelConfig c = tiny();
  const AdaptedParameters m = trained_like(c, lora(kAll), 4);
  const TokenIds t{5, 5, 0, 12, 3, 7, 1};
  const auto tg = next_token_targets(t);
  const auto mask = SelectionMask::from_selected(7, {1, 3, 6});
  const auto fwd = adapted_forward(m, t, tg, mask);
  const AdapterGradients g = adapted_backward(m, fwd.cache, t, tg);
  const verify::FrozenDitchedLoss ditched(m.backbone, &m.adapters, t, tg, mask);
  const auto stats = verify::finite_difference_check(
      m.adapters, g, [&](const AdapterSet& a) { return ditched(m.backbone, &a); });
  INFO(stats.worst);
  CHECK(stats.max_rel_err <= 1e-6);
}

TEST_CASE("ditched adapted gradients match the stop-gradient oracle") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const ModelConfig c = tiny(1 + trial % 2);
    const AdaptedParameters m = trained_like(c, lora(trial % 3 == 0 ? kAll : std::vector<ProjTarget>{ProjTarget::kFfnUp, ProjTarget::kFfnDown}), 10 + trial);
    const std::size_t n = 1 + rng() % 12;
    const TokenIds t = random_tokens(rng, n, 13);
    const auto tg = next_token_targets(t);
    const auto mask = random_mask(rng, n);
    const auto fwd = adapted_forward(m, t, tg, mask);
    const AdapterGradients g = adapted_backward(m, fwd.cache, t, tg);
    const auto oracle = verify::stopgrad_gradients(m.backbone, &m.adapters, t, tg, mask);
    double worst = 0.0;
    for (std::size_t i = 0; i < g.adapters().size(); ++i) {
      worst = std::max(worst, max_abs_diff(g.adapters()[i].down, oracle.adapters.adapters()[i].down));
      worst = std::max(worst, max_abs_diff(g.adapters()[i].up, oracle.adapters.adapters()[i].up));
    }
    CHECK(worst <= 1e-10);

    // Unfrozen backbone with adapters: both gradient sets match the oracle.
    const AdapterContext ctx{&m.adapters};
    const auto both = forward_split(m.backbone, t, tg, mask, ctx);
    const auto gb = backward_ditched(m.backbone, both.cache, t, tg, mask, ctx);
    CHECK(max_abs_diff(gb.backbone, oracle.backbone) <= 1e-10);
  }
}

TEST_CASE("frozen backbone receives exactly zero gradient") {
  const AdaptedParameters m = trained_like(tiny(), lora(kAll), 20);
  const TokenIds t{1, 2, 3, 4};
  const auto tg = next_token_targets(t);
  const auto mask = SelectionMask::from_selected(4, {1, 2});
  const auto fwd = adapted_forward(m, t, tg, mask);
  const auto g = backward_ditched(m.backbone, fwd.cache, t, tg, mask, AdapterContext{&m.adapters});
  for (const auto& [name, mat] : g.backbone.named_tensors())
    for (double v : mat->data()) CHECK(v == 0.0);
}

TEST_CASE("dropout masks replay bit-identically") {
  const AdaptedParameters m = trained_like(tiny(), lora(kAll, 0.5), 21);
  const TokenIds t{1, 2, 3, 4, 5, 6};
  const auto tg = next_token_targets(t);
  const auto mask = SelectionMask::from_selected(6, {0, 5});
  const auto a = adapted_forward(m, t, tg, mask, true, 3);
  const auto b = adapted_forward(m, t, tg, mask, true, 3);
  const auto d = adapted_forward(m, t, tg, mask, true, 4);
  const auto e = adapted_forward(m, t, tg, mask, false, 3);
  CHECK(a.loss == b.loss);
  CHECK(a.loss != d.loss);
  CHECK(a.loss != e.loss);
  // Dropout is keyed by original position, so the regrouped split forward
  // sees the same masks as the full-order forward.
  const auto full = forward_full(m.backbone, t, tg, AdapterContext{&m.adapters, true, 3});
  CHECK(verify::relative_error(full.loss, a.loss, 0.0) <= 1e-12);
}

TEST_CASE("adapted caching stays within the full cache") {
  std::mt19937_64 rng(30);
  const ModelConfig c = tiny();
  for (ProjTarget extra : kAll) {
    const AdaptedParameters m = trained_like(c, lora({extra, ProjTarget::kFfnUp == extra ? ProjTarget::kFfnDown : ProjTarget::kFfnUp}, 0.0, 4), 31);
    const TokenIds t = random_tokens(rng, 10, 13);
    const auto tg = next_token_targets(t);
    for (double r : {0.1, 0.5, 1.0}) {
      std::vector<std::size_t> idx(selection_size(10, r));
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      const auto mask = SelectionMask::from_selected(10, idx);
      const auto adapted = adapted_forward(m, t, tg, mask);
      const auto plain = forward_split(m.backbone, t, tg, mask);
      CHECK(adapted.cache.total_scalars() <= plain.cache.total_scalars());
    }
  }
}

TEST_CASE("adapter checkpoint round trip") {
  const AdaptedParameters m = trained_like(tiny(), lora(kAll, 0.1), 40);
  const auto path = std::filesystem::temp_directory_path() / "tokenseek_test_adapter_ckpt.bin";
  save_checkpoint(path, m.backbone, &m.adapters);
  const Checkpoint back = load_checkpoint(path);
  std::filesystem::remove(path);
  REQUIRE(back.adapters.has_value());
  CHECK(params_checksum(back.params) == params_checksum(m.backbone));
  CHECK(back.adapters->config().rank == m.adapters.config().rank);
  CHECK(back.adapters->config().targets == m.adapters.config().targets);
  CHECK(back.adapters->config().dropout == m.adapters.config().dropout);
  REQUIRE(back.adapters->adapters().size() == m.adapters.adapters().size());
  for (std::size_t i = 0; i < m.adapters.adapters().size(); ++i) {
    CHECK(back.adapters->adapters()[i].down == m.adapters.adapters()[i].down);
    CHECK(back.adapters->adapters()[i].up == m.adapters.adapters()[i].up);
  }
}
