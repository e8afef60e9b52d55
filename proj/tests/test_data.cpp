// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "tokenseek/data.hpp"

using namespace tokenseek;

namespace {

const std::filesystem::path kFixtures = TOKENSEEK_FIXTURE_DIR;

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path temp_file(const std::string& name, const std::string& content) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p, std::ios::binary | std::ios::trunc) << content;
  return p;
}

}  // namespace

TEST_CASE("render_alpaca matches the golden bytes") {
  const auto loaded = load_jsonl(kFixtures / "alpaca_record.jsonl");
  REQUIRE(loaded.records.size() == 1);
  CHECK(render_alpaca(loaded.records[0]) == slurp(kFixtures / "alpaca_golden.txt"));
  CHECK(render_alpaca(loaded.records[0]) == render_alpaca(loaded.records[0]));
}

TEST_CASE("render_alpaca structure") {
  const std::string s = render_alpaca({"x", "A", "B", "C"});
  CHECK(s.rfind("Below is an instruction that describes a task, paired with an input that provides further context.",
                0) == 0);
  const auto marker = s.find("### Response:\n");
  REQUIRE(marker != std::string::npos);
  CHECK(s.find('C', marker) == marker + 14);
  CHECK(render_alpaca({"x", "A", "", "C"}).find("### Input:\n\n") != std::string::npos);
}

TEST_CASE("tokenizer round trip") {
  CHECK(tokenize("") == TokenIds{kBos, kEos});
  CHECK(tokenize("hi") == TokenIds{kBos, 104, 105, kEos});
  std::mt19937_64 rng(1);
  for (std::size_t len : {1u, 17u, 1024u, 65536u}) {
    std::string blob(len, '\0');
    for (char& c : blob) c = static_cast<char>(rng() & 0xff);
    CHECK(detokenize(tokenize(blob)) == blob);
  }
  CHECK(detokenize(tokenize("héllo ✓")) == "héllo ✓");
}

TEST_CASE("load_jsonl keeps valid lines in order and reports the rest") {
  const auto p = temp_file("tokenseek_test_load.jsonl",
                           "{\"instruction\":\"a\",\"output\":\"1\"}\n"
                           "{\"instruction\":\"b\",\"input\":\"x\"}\n"
                           "not json\n"
                           "\n"
                           "{\"instruction\":\"c\",\"input\":\"y\",\"output\":\"3\",\"id\":7}\n"
                           "{\"instruction\":\"d\",\"output\":\"4\",\"id\":\"last\"}\n");
  const auto r = load_jsonl(p);
  REQUIRE(r.records.size() == 3);
  CHECK(r.records[0].instruction == "a");
  CHECK(r.records[0].id == "0");
  CHECK(r.records[1].id == "7");
  CHECK(r.records[1].input == "y");
  CHECK(r.records[2].id == "last");
  REQUIRE(r.errors.size() == 2);
  CHECK(r.errors[0].line == 2);
  CHECK(r.errors[0].message.find("output") != std::string::npos);
  CHECK(r.errors[1].line == 3);

  CHECK(load_jsonl(temp_file("tokenseek_test_empty.jsonl", "")).records.empty());
  CHECK_THROWS_AS(load_jsonl("/nonexistent/file.jsonl"), std::runtime_error);
  std::filesystem::remove(p);
}

TEST_CASE("write_jsonl round trips") {
  const auto recs = toy_corpus("mixed", 6, 3);
  const auto p = std::filesystem::temp_directory_path() / "tokenseek_test_write.jsonl";
  write_jsonl(p, recs);
  const auto back = load_jsonl(p).records;
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].id == recs[i].id);
    CHECK(render_alpaca(back[i]) == render_alpaca(recs[i]));
  }
  std::filesystem::remove(p);
}

TEST_CASE("response_boundary") {
  const InstructionRecord r{"x", "0123456789", "", "out"};
  const TokenIds t = tokenize(render_alpaca(r));
  // Direct search for the marker bytes.
  const std::string text = render_alpaca(r);
  const std::size_t expect = 1 + text.find("### Response:\n") + std::string("### Response:\n").size();
  CHECK(response_boundary(t) == expect);
  CHECK(response_boundary(t) == response_boundary(t));
  CHECK(detokenize(TokenIds(t.begin() + static_cast<long>(expect), t.end())) == "out");
  CHECK(encode(r, 1000).response_start == expect);

  const TokenIds empty = tokenize(render_alpaca({"x", "i", "", ""}));
  CHECK(response_boundary(empty) == empty.size());
  CHECK_THROWS_AS(response_boundary(tokenize("plain text")), std::invalid_argument);
}

TEST_CASE("truncation drops prompt bytes and keeps the response") {
  const InstructionRecord r{"x", std::string(50, 'p'), "", "response"};
  const auto full = encode(r, 1000);
  CHECK_FALSE(full.truncated);
  const auto cut = encode(r, 100);
  CHECK(cut.truncated);
  CHECK(cut.tokens.size() == 100);
  CHECK(cut.tokens.front() == kBos);
  CHECK(cut.tokens.back() == kEos);
  CHECK(detokenize(TokenIds(cut.tokens.begin() + static_cast<long>(cut.response_start), cut.tokens.end())) ==
        "response");
  CHECK(response_boundary(cut.tokens) == cut.response_start);

  const auto tiny = encode(r, 4);
  CHECK(tiny.tokens.size() == 4);
  CHECK(tiny.response_start == 1);
  const auto corpus = encode_corpus({r}, 4);
  REQUIRE(corpus.warnings.size() == 1);
  CHECK(corpus.warnings[0].find("response tail cut") != std::string::npos);
}

TEST_CASE("encoded corpus cache is keyed by the source checksum") {
  const auto src = std::filesystem::temp_directory_path() / "tokenseek_test_cache_src.jsonl";
  const auto cache = std::filesystem::temp_directory_path() / "tokenseek_test_cache.bin";
  std::filesystem::remove(cache);
  write_jsonl(src, toy_corpus("reverse", 5, 1));
  const auto a = load_corpus(src, 256, cache);
  CHECK(std::filesystem::exists(cache));
  const auto sum = file_checksum(src);
  const auto hit = load_encoded_cache(cache, sum, 256);
  REQUIRE(hit.has_value());
  REQUIRE(hit->instances.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(hit->instances[i].tokens == a.instances[i].tokens);
    CHECK(hit->instances[i].response_start == a.instances[i].response_start);
    CHECK(hit->instances[i].id == a.instances[i].id);
  }
  CHECK_FALSE(load_encoded_cache(cache, sum + 1, 256).has_value());
  CHECK_FALSE(load_encoded_cache(cache, sum, 128).has_value());
  write_jsonl(src, toy_corpus("reverse", 6, 1));
  CHECK(load_corpus(src, 256, cache).instances.size() == 6);
  std::filesystem::remove(src);
  std::filesystem::remove(cache);
}

TEST_CASE("toy corpora are deterministic and correct") {
  CHECK(render_alpaca(toy_corpus("arith", 3, 9)[2]) == render_alpaca(toy_corpus("arith", 3, 9)[2]));
  for (const auto& r : toy_corpus("reverse", 20, 2)) CHECK(r.output == std::string(r.input.rbegin(), r.input.rend()));
  for (const auto& r : toy_corpus("arith", 20, 2)) {
    const auto plus = r.input.find('+');
    CHECK(std::stoi(r.output) == std::stoi(r.input.substr(0, plus)) + std::stoi(r.input.substr(plus + 1)));
  }
  CHECK_THROWS_AS(toy_corpus("sort", 1, 1), std::invalid_argument);
}
