// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "tokenseek/memacct.hpp"
#include "tokenseek/seeker.hpp"

using namespace tokenseek;
using namespace tokenseek::testing;

namespace {

ModelConfig small(int layers = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.hidden = 8;
  c.n_heads = 2;
  c.ff_dim = 16;
  c.vocab = kByteVocab;
  c.max_seq = 256;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("context_scores examples") {
  const std::vector<Matrix> heads{Matrix::from_rows({{1, 0}, {0.5, 0.5}})};
  const auto s = context_scores(heads);
  CHECK(s == std::vector<double>{1.5, 0.5});
  // Two heads averaging to the same matrix.
  const auto s2 = context_scores({Matrix::from_rows({{1, 0}, {1, 0}}), Matrix::from_rows({{1, 0}, {0, 1}})});
  CHECK(s2 == std::vector<double>{1.5, 0.5});
  CHECK(context_scores({Matrix(1, 1, 1.0)}) == std::vector<double>{1.0});
  CHECK_THROWS_AS(context_scores({Matrix::from_rows({{1, 0}, {0.5, 0.4}})}), std::invalid_argument);
  CHECK_THROWS_AS(context_scores({Matrix(2, 3)}), std::invalid_argument);
  CHECK_THROWS_AS(context_scores({}), std::invalid_argument);
}

TEST_CASE("context scores sum to n on model attention") {
  std::mt19937_64 rng(1);
  const Parameters p = random_params(small(), 2);
  for (int trial = 0; trial < 20; ++trial) {
    const TokenIds t = random_tokens(rng, 1 + trial * 3, 256);
    const auto s = context_scores(forward_full(p, t, next_token_targets(t)).final_attn);
    double sum = 0.0;
    for (double v : s) {
      CHECK(v > 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - static_cast<double>(t.size())) <= 1e-9);
  }
}

TEST_CASE("gradient_scores") {
  const Parameters one = random_params(small(1), 4);
  const TokenIds t{kBos, 72, 105, 33, kEos};
  const auto tg = next_token_targets(t);
  CHECK(gradient_scores(one, t, TokenIds(5, kNoTarget)) == std::vector<double>(5, 0.0));
  for (double v : gradient_scores(one, t, tg, true)) CHECK(v >= 0.0);

  // Independent route: full backward's stream gradient at block 0.
  const auto r = forward_full(one, t, tg);
  std::vector<Matrix> stream;
  backward_full(one, r.cache, t, tg, &stream);
  const auto signed_scores = gradient_scores(one, t, tg, false);
  const auto abs_scores = gradient_scores(one, t, tg, true);
  for (std::size_t i = 0; i < t.size(); ++i) {
    double s = 0.0, a = 0.0;
    for (std::size_t k = 0; k < 8; ++k) {
      s += stream[0](i, k);
      a += std::abs(stream[0](i, k));
    }
    CHECK(std::abs(signed_scores[i] - s) <= 1e-12);
    CHECK(std::abs(abs_scores[i] - a) <= 1e-12);
  }
}

TEST_CASE("scoring caches less than a full forward") {
  const Parameters p = random_params(small(3), 5);
  const TokenIds t = tokenize("some instruction text");
  const auto tg = next_token_targets(t);
  CHECK(partial_backward_penultimate(p, t, tg).cached_scalars < forward_full(p, t, tg).cache.total_scalars());
}

TEST_CASE("combine_scores") {
  const auto a = combine_scores({1.5, 0.5}, {0, 0}, 1, 0);
  CHECK(a[0] == doctest::Approx(std::log(1.5)));
  CHECK(a[1] == doctest::Approx(std::log(0.5)));
  CHECK(combine_scores({1, 1}, {3, 7}, 0, 1) == std::vector<double>{0, 1});
  CHECK_THROWS_AS(combine_scores({1}, {1}, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(combine_scores({1}, {1, 2}, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(combine_scores({1}, {1}, -1, 1), std::invalid_argument);

  const std::vector<double> i1{0.3, 2.0, 0.7, 1.0}, i2{4, 1, 9, 2};
  const auto f1 = combine_scores(i1, i2, 1, 1);
  const auto f5 = combine_scores(i1, i2, 5, 5);
  for (std::size_t j = 0; j < 4; ++j) CHECK(f5[j] == doctest::Approx(5 * f1[j]));
  CHECK(select_tokens(f1, 0.5) == select_tokens(f5, 0.5));
}

TEST_CASE("select_tokens") {
  std::vector<double> asc(10);
  for (int i = 0; i < 10; ++i) asc[static_cast<std::size_t>(i)] = i;
  CHECK(select_tokens(asc, 0.1).selected() == std::vector<std::size_t>{9});
  CHECK(select_tokens(std::vector<double>(4, 2.0), 0.5).selected() == std::vector<std::size_t>{0, 1});
  CHECK(select_tokens(std::vector<double>(126, 0.0), 0.1).selected().size() == 13);
  CHECK(select_tokens({3.0}, 0.01).selected() == std::vector<std::size_t>{0});

  // Rank-only dependence: a strictly increasing map leaves the mask alone.
  std::mt19937_64 rng(7);
  std::normal_distribution<double> d;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> f(1 + trial % 40);
    for (double& v : f) v = std::round(d(rng) * 4) / 4;  // coarse values create ties
    std::vector<double> g(f.size());
    for (std::size_t j = 0; j < f.size(); ++j) g[j] = std::exp(f[j]) * 3 + 1;
    for (double r : {0.1, 0.3, 0.5, 1.0}) CHECK(select_tokens(f, r) == select_tokens(g, r));
  }
}

TEST_CASE("score file round trip and determinism") {
  const Parameters p = random_params(small(), 6);
  const EncodedCorpus corpus = encode_corpus(toy_corpus("mixed", 3, 1), 256);
  const ScoreSet s = score_corpus(p, corpus, 5, 5);
  REQUIRE(s.instances.size() == 3);
  std::ostringstream a, b;
  write_scores(a, s);
  write_scores(b, score_corpus(p, corpus, 5, 5, true, false, 3));
  CHECK(a.str() == b.str());
  CHECK(a.str().find("instance_id,token_index,i1,i2\n") != std::string::npos);

  std::istringstream in(a.str());
  const ScoreSet back = read_scores(in);
  REQUIRE(back.instances.size() == 3);
  CHECK(back.model_checksum == params_checksum(p));
  CHECK(back.alpha == 5.0);
  CHECK(back.magnitude);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back.instances[i].id == s.instances[i].id);
    CHECK(back.instances[i].i1 == s.instances[i].i1);
    CHECK(back.instances[i].i2 == s.instances[i].i2);
    CHECK(back.instances[i].fused == s.instances[i].fused);
  }
}

TEST_CASE("score_corpus edge cases") {
  const Parameters p = random_params(small(), 8);
  const ScoreSet empty = score_corpus(p, EncodedCorpus{}, 1, 0);
  std::ostringstream os;
  write_scores(os, empty);
  std::istringstream is(os.str());
  CHECK(read_scores(is).instances.empty());

  EncodedCorpus one;
  one.instances.push_back({"solo", {kBos}, 1, false});
  const ScoreSet s = score_corpus(p, one, 5, 5);
  for (double r : {0.01, 0.5, 1.0}) CHECK(select_tokens(s.instances[0].fused, r).selected() == std::vector<std::size_t>{0});

  CHECK_THROWS_AS(score_corpus(p, one, 0, 0), std::invalid_argument);

  EncodedCorpus longer;
  longer.instances.push_back(encode({"big", std::string(300, 'x'), "", "yz"}, 1000));
  const ScoreSet t = score_corpus(p, longer, 5, 5);
  CHECK(t.instances[0].n() == 256);
  CHECK(t.warnings.size() == 1);
}

TEST_CASE("read_scores rejects malformed files") {
  auto parse = [](const std::string& text) {
    std::istringstream is(text);
    return read_scores(is);
  };
  CHECK_THROWS_AS(parse(""), std::runtime_error);
  CHECK_THROWS_AS(parse("garbage\n"), std::runtime_error);
  const std::string head = "# tokenseek-scores v1 alpha=1 beta=1 magnitude=1 model=00 instances=1\ninstance_id,token_index,i1,i2\n";
  CHECK_THROWS_AS(parse(head + "a,1,1,1\n"), std::runtime_error);
  CHECK_THROWS_AS(parse(head + "a,0,-1,1\n"), std::runtime_error);
  CHECK_THROWS_AS(parse(head + "a,0,1\n"), std::runtime_error);
  CHECK_THROWS_AS(parse(head + "a,0,1,x\n"), std::runtime_error);
  CHECK(parse(head + "a,0,1,2\n").instances[0].i2 == std::vector<double>{2});
}
