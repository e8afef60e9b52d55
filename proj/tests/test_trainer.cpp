// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "tokenseek/trainer.hpp"

using namespace tokenseek;
using namespace tokenseek::testing;

namespace {

ModelConfig small() {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden = 8;
  c.n_heads = 2;
  c.ff_dim = 16;
  c.vocab = kByteVocab;
  c.max_seq = 24;
  c.seed = 11;
  return c;
}

// Short sequences that skip the Alpaca header, to keep the tests fast.
EncodedCorpus short_corpus(std::size_t count, std::uint64_t seed) {
  EncodedCorpus c;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    EncodedInstance e;
    e.id = "s" + std::to_string(i);
    e.tokens = tokenize(std::string("ab") + static_cast<char>('a' + rng() % 26) + "xyz" + static_cast<char>('a' + i % 5));
    e.response_start = 4;
    c.instances.push_back(e);
  }
  return c;
}

TrainConfig quick(TrainMode mode, double ratio) {
  TrainConfig t;
  t.mode = mode;
  t.ratio = ratio;
  t.lr_max = 1e-2;
  t.warmup_steps = 1;
  t.accum_steps = 2;
  t.epochs = 2;
  t.seed = 5;
  return t;
}

ScoreSet scores_for(const Parameters& p, const EncodedCorpus& c) { return score_corpus(p, c, 5, 5); }

}  // namespace

TEST_CASE("cosine_lr") {
  TrainConfig c;
  c.lr_max = 1.0;
  c.warmup_steps = 10;
  CHECK(cosine_lr(0, 100, c) == 0.0);
  CHECK(cosine_lr(5, 100, c) == 0.5);
  CHECK(cosine_lr(10, 100, c) == 1.0);
  CHECK(cosine_lr(55, 100, c) == doctest::Approx(0.5));
  CHECK(cosine_lr(99, 100, c) < 1e-3);
  CHECK_THROWS(cosine_lr(100, 100, c));
  double prev = 2.0;
  for (std::size_t s = 10; s < 100; ++s) {
    CHECK(cosine_lr(s, 100, c) <= prev);
    prev = cosine_lr(s, 100, c);
  }
}

TEST_CASE("adam_step closed forms") {
  Matrix p(1, 1, 3.0), g(1, 1, 0.0);
  AdamState st;
  adam_step({&p}, {&g}, st, 0.1, 0.0);
  CHECK(p(0, 0) == 3.0);

  Matrix q(1, 1, 0.0), one(1, 1, 1.0);
  AdamState s2;
  adam_step({&q}, {&one}, s2, 0.01, 0.0);
  CHECK(q(0, 0) == doctest::Approx(-0.01).epsilon(1e-6));

  Matrix d(1, 1, 2.0);
  AdamState s3;
  adam_step({&d}, {&g}, s3, 0.1, 0.1);  // lr * wd = 0.01
  CHECK(d(0, 0) == doctest::Approx(1.98).epsilon(1e-15));
  adam_step({&d}, {&g}, s3, 0.1, 0.1);
  CHECK(d(0, 0) == doctest::Approx(1.98 * 0.99).epsilon(1e-15));
  CHECK_THROWS(adam_step({&d}, {}, s3, 0.1, 0.1));
}

TEST_CASE("all modes coincide at r = 1") {
  const Parameters p = random_params(small(), 1, 0.1);
  const EncodedCorpus corpus = short_corpus(6, 2);
  const ScoreSet scores = scores_for(p, corpus);
  const TrainRun full = train(p, corpus, nullptr, quick(TrainMode::kFull, 1.0));
  const TrainRun seek = train(p, corpus, &scores, quick(TrainMode::kSeek, 1.0));
  const TrainRun rnd = train(p, corpus, nullptr, quick(TrainMode::kRandom, 1.0));
  CHECK(max_abs_diff(full.params, seek.params) <= 1e-12);
  CHECK(max_abs_diff(full.params, rnd.params) <= 1e-12);
  CHECK(max_abs_diff(full.params, p) > 0.0);
  CHECK(full.steps.size() == 6);
}

TEST_CASE("seek at r=0.5 caches less and matches the estimator every step") {
  const Parameters p = random_params(small(), 3, 0.1);
  const EncodedCorpus corpus = short_corpus(6, 4);
  const ScoreSet scores = scores_for(p, corpus);
  TrainConfig cfg = quick(TrainMode::kSeek, 0.5);
  cfg.shuffle = false;
  cfg.epochs = 1;
  cfg.accum_steps = 1;
  const TrainRun seek = train(p, corpus, &scores, cfg);
  const TrainRun full = train(p, corpus, nullptr, quick(TrainMode::kFull, 1.0));
  CHECK(seek.memory.peak_scalars < full.memory.peak_scalars);
  for (std::size_t s = 0; s < seek.steps.size(); ++s) {
    CHECK(seek.steps[s].cached_scalars == estimate_ditched(p.config, 1, corpus.instances[s].tokens.size(), 0.5));
  }
  CHECK(*seek.memory.ratio_vs_full < 1.0);
  CHECK(*full.memory.ratio_vs_full == 1.0);
}

TEST_CASE("training is deterministic") {
  const Parameters p = random_params(small(), 5, 0.1);
  const EncodedCorpus corpus = short_corpus(5, 6);
  const auto a = train(p, corpus, nullptr, quick(TrainMode::kRandom, 0.3));
  const auto b = train(p, corpus, nullptr, quick(TrainMode::kRandom, 0.3));
  CHECK(metrics_text(a) == metrics_text(b));
  CHECK(params_checksum(a.params) == params_checksum(b.params));
  TrainConfig other = quick(TrainMode::kRandom, 0.3);
  other.seed = 6;
  CHECK(params_checksum(train(p, corpus, nullptr, other).params) != params_checksum(a.params));
}

TEST_CASE("accumulation is the mean gradient") {
  const Parameters p = random_params(small(), 7, 0.1);
  const EncodedCorpus corpus = short_corpus(3, 8);
  TrainConfig cfg = quick(TrainMode::kFull, 1.0);
  cfg.accum_steps = 3;
  cfg.epochs = 1;
  cfg.warmup_steps = 0;
  cfg.shuffle = false;
  const TrainRun run = train(p, corpus, nullptr, cfg);
  REQUIRE(run.steps.size() == 1);

  Parameters manual = p;
  Gradients mean = Parameters::zeros(p.config);
  for (const auto& inst : corpus.instances) {
    const auto tg = next_token_targets(inst.tokens);
    const Gradients g = backward_full(p, forward_full(p, inst.tokens, tg).cache, inst.tokens, tg);
    auto dst = mean.named_tensors();
    auto src = g.named_tensors();
    for (std::size_t t = 0; t < dst.size(); ++t) *dst[t].second += *src[t].second;
  }
  std::vector<Matrix*> ps;
  std::vector<const Matrix*> gs;
  for (auto& [n, m] : mean.named_tensors()) *m *= 1.0 / 3.0;
  for (auto& [n, m] : manual.named_tensors()) ps.push_back(m);
  for (auto& [n, m] : mean.named_tensors()) gs.push_back(m);
  AdamState st;
  adam_step(ps, gs, st, cosine_lr(0, 1, cfg), cfg.weight_decay);
  CHECK(max_abs_diff(manual, run.params) <= 1e-12);
}

TEST_CASE("seek requires matching scores") {
  const Parameters p = random_params(small(), 9, 0.1);
  const EncodedCorpus corpus = short_corpus(4, 10);
  CHECK_THROWS_AS(train(p, corpus, nullptr, quick(TrainMode::kSeek, 0.5)), std::invalid_argument);
  ScoreSet scores = scores_for(p, corpus);
  scores.instances[1].id = "other";
  try {
    train(p, corpus, &scores, quick(TrainMode::kSeek, 0.5));
    FAIL("expected a mismatch error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("s1") != std::string::npos);
  }
  CHECK_THROWS_AS(train(p, EncodedCorpus{}, nullptr, quick(TrainMode::kFull, 1.0)), std::invalid_argument);
  TrainConfig bad = quick(TrainMode::kFull, 1.0);
  bad.warmup_steps = 100;
  CHECK_THROWS_AS(train(p, corpus, nullptr, bad), std::invalid_argument);
}

TEST_CASE("adapter training leaves the backbone alone") {
  const Parameters p = random_params(small(), 11, 0.1);
  const EncodedCorpus corpus = short_corpus(4, 12);
  const ScoreSet scores = scores_for(p, corpus);
  TrainConfig cfg = quick(TrainMode::kSeek, 0.5);
  cfg.adapter = true;
  cfg.lora.rank = 2;
  const TrainRun run = train(p, corpus, &scores, cfg);
  CHECK(params_checksum(run.params) == params_checksum(p));
  REQUIRE(run.adapters.has_value());
  double up = 0.0;
  for (const auto& a : run.adapters->adapters()) up += std::abs(a.up(0, 0));
  CHECK(up > 0.0);
  CHECK(metrics_text(run).find("# adapter=1") != std::string::npos);
}

TEST_CASE("eval_loss") {
  const Parameters p = init_params(small(), 1e-6);
  EncodedCorpus noise;
  std::mt19937_64 rng(13);
  for (int i = 0; i < 4; ++i) noise.instances.push_back({"n", random_tokens(rng, 20, 256), 0, false});
  CHECK(std::abs(eval_loss(p, noise) - std::log(259.0)) < 1e-3);
  CHECK(eval_loss(p, noise) == eval_loss(p, noise));
  CHECK_THROWS_AS(eval_loss(p, EncodedCorpus{}), std::invalid_argument);

  // Overfit a two-instance corpus; eval on the same split ends below the last training loss.
  const EncodedCorpus tiny = short_corpus(2, 14);
  TrainConfig cfg = quick(TrainMode::kFull, 1.0);
  cfg.epochs = 60;
  cfg.lr_max = 2e-2;
  cfg.warmup_steps = 2;
  const TrainRun run = train(random_params(small(), 15, 0.1), tiny, nullptr, cfg);
  CHECK(eval_loss(run.params, tiny) <= run.steps.back().loss + 1e-9);
  CHECK(run.steps.back().loss < run.steps.front().loss);
}

TEST_CASE("stability study bookkeeping") {
  const Parameters p = random_params(small(), 16, 0.1);
  const EncodedCorpus corpus = short_corpus(4, 17);
  const ScoreSet scores = scores_for(p, corpus);
  TrainConfig cfg = quick(TrainMode::kFull, 1.0);
  const std::vector<TrainMode> modes{TrainMode::kRandom, TrainMode::kSeek};
  const auto a = stability_study(p, corpus, corpus, &scores, cfg, modes, {0.3, 1.0}, {1, 2, 3});
  CHECK(a.rows.size() == 12);
  CHECK(a.aggregates.size() == 4);
  const auto b = stability_study(p, corpus, corpus, &scores, cfg, modes, {0.3, 1.0}, {1, 2, 3}, 2);
  CHECK(a.rows_csv() == b.rows_csv());
  CHECK(a.aggregate_csv() == b.aggregate_csv());
  const auto* r1 = a.find(TrainMode::kRandom, 1.0);
  const auto* s1 = a.find(TrainMode::kSeek, 1.0);
  REQUIRE(r1);
  REQUIRE(s1);
  CHECK(std::abs(r1->mean - s1->mean) <= 1e-12);
  CHECK(a.rows_csv().rfind("mode,r,seed,final_eval_loss\n", 0) == 0);
  CHECK_THROWS_AS(stability_study(p, corpus, corpus, &scores, cfg, modes, {0.3}, {1, 2}), std::invalid_argument);
}
