// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace tokenseek {

namespace {

constexpr const char* kHeader =
    "Below is an instruction that describes a task, paired with an input that provides further context. "
    "Write a response that appropriately completes the request.\n\n### Instruction:\n";
constexpr const char* kMarker = "### Response:\n";

}  // namespace

std::string render_prompt(const InstructionRecord& r) {
  std::string s = kHeader;
  s += r.instruction;
  s += "\n\n### Input:\n";
  s += r.input;
  s += "\n\n";
  s += kMarker;
  return s;
}

std::string render_alpaca(const InstructionRecord& r) { return render_prompt(r) + r.output; }

TokenIds tokenize(const std::string& text) {
  TokenIds ids;
  ids.reserve(text.size() + 2);
  ids.push_back(kBos);
  for (unsigned char c : text) ids.push_back(c);
  ids.push_back(kEos);
  return ids;
}

std::string detokenize(const TokenIds& ids) {
  std::string s;
  s.reserve(ids.size());
  for (int id : ids) {
    if (id >= 0 && id < 256) s.push_back(static_cast<char>(id));
  }
  return s;
}

LoadResult load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus file " + path.string());
  LoadResult out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw std::invalid_argument("not a JSON object");
      InstructionRecord r;
      auto text = [&](const char* key, bool required) -> std::string {
        if (!j.contains(key)) {
          if (required) throw std::invalid_argument(std::string("missing \"") + key + "\"");
          return "";
        }
        if (!j.at(key).is_string()) throw std::invalid_argument(std::string("\"") + key + "\" is not a string");
        return j.at(key).get<std::string>();
      };
      r.instruction = text("instruction", true);
      r.input = text("input", false);
      r.output = text("output", true);
      if (r.instruction.empty()) throw std::invalid_argument("empty \"instruction\"");
      if (r.output.empty()) throw std::invalid_argument("empty \"output\"");
      if (j.contains("id")) {
        const auto& id = j.at("id");
        r.id = id.is_string() ? id.get<std::string>() : id.dump();
      } else {
        r.id = std::to_string(out.records.size());
      }
      out.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      out.errors.push_back({lineno, e.what()});
    }
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<InstructionRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["instruction"] = r.instruction;
    j["input"] = r.input;
    j["output"] = r.output;
    out << j.dump() << '\n';
  }
}

std::size_t response_boundary(const TokenIds& tokens) {
  const std::size_t m = std::strlen(kMarker);
  for (std::size_t i = 0; i + m <= tokens.size(); ++i) {
    bool hit = true;
    for (std::size_t k = 0; k < m && hit; ++k) hit = tokens[i + k] == static_cast<unsigned char>(kMarker[k]);
    if (hit) {
      const std::size_t b = i + m;
      if (b == tokens.size() || (b + 1 == tokens.size() && tokens[b] == kEos)) return tokens.size();
      return b;
    }
  }
  throw std::invalid_argument("response_boundary: no \"### Response:\" marker; instance is not Alpaca-rendered");
}

EncodedInstance encode(const InstructionRecord& record, std::size_t max_seq) {
  if (max_seq < 2) throw std::invalid_argument("encode: max_seq must be >= 2");
  EncodedInstance e;
  e.id = record.id;
  e.tokens = tokenize(render_alpaca(record));
  e.response_start = 1 + render_prompt(record).size();
  if (record.output.empty()) e.response_start = e.tokens.size();
  return truncate_instance(std::move(e), max_seq);
}

EncodedInstance truncate_instance(EncodedInstance e, std::size_t max_seq) {
  if (max_seq < 2) throw std::invalid_argument("truncate_instance: max_seq must be >= 2");
  if (e.tokens.size() <= max_seq) return e;
  e.truncated = true;
  const std::size_t excess = e.tokens.size() - max_seq;
  const std::size_t prompt_body = e.response_start > 0 ? e.response_start - 1 : 0;  // between BOS and the response
  const std::size_t drop = std::min(excess, prompt_body);
  e.tokens.erase(e.tokens.begin() + 1, e.tokens.begin() + 1 + static_cast<long>(drop));
  e.response_start -= drop;
  if (e.tokens.size() > max_seq) e.tokens.resize(max_seq);
  e.response_start = std::min(e.response_start, e.tokens.size());
  return e;
}

TokenIds instance_targets(const EncodedInstance& e, bool response_only) {
  TokenIds t = next_token_targets(e.tokens);
  if (response_only) {
    for (std::size_t i = 0; i + 1 < t.size() && i + 1 < e.response_start; ++i) t[i] = kNoTarget;
  }
  return t;
}

namespace {

// Output bytes plus EOS.
std::size_t record_response_len(const InstructionRecord& r) { return r.output.size() + 1; }

}  // namespace

EncodedCorpus encode_corpus(const std::vector<InstructionRecord>& records, std::size_t max_seq) {
  EncodedCorpus c;
  for (const auto& r : records) {
    c.instances.push_back(encode(r, max_seq));
    const auto& e = c.instances.back();
    if (e.truncated) {
      const std::size_t response_len = record_response_len(r);
      const bool cut_response = 1 + response_len > max_seq;
      c.warnings.push_back("instance " + r.id + " truncated to " + std::to_string(max_seq) + " tokens" +
                           (cut_response ? " (response tail cut)" : " (prompt shortened)"));
    }
  }
  return c;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

namespace {

constexpr char kCacheMagic[8] = {'T', 'K', 'S', 'K', 'C', 'O', 'R', 'P'};
constexpr std::uint32_t kCacheVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(static_cast<std::uint64_t>(v) >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof b);
}

template <class T>
T get(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof b)) throw std::runtime_error("truncated corpus cache");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  std::string s(get<std::uint32_t>(is), '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(s.size()))) throw std::runtime_error("truncated corpus cache");
  return s;
}

}  // namespace

void save_encoded_cache(const std::filesystem::path& path, const EncodedCorpus& corpus, std::uint64_t source_checksum,
                        std::size_t max_seq) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write corpus cache " + path.string());
  os.write(kCacheMagic, sizeof kCacheMagic);
  put<std::uint32_t>(os, kCacheVersion);
  put<std::uint64_t>(os, source_checksum);
  put<std::uint64_t>(os, max_seq);
  put<std::uint64_t>(os, corpus.instances.size());
  for (const auto& e : corpus.instances) {
    put_string(os, e.id);
    put<std::uint64_t>(os, e.response_start);
    put<std::uint8_t>(os, e.truncated ? 1 : 0);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.tokens.size()));
    for (int t : e.tokens) put<std::uint16_t>(os, static_cast<std::uint16_t>(t));
  }
  put<std::uint64_t>(os, corpus.warnings.size());
  for (const auto& w : corpus.warnings) put_string(os, w);
}

std::optional<EncodedCorpus> load_encoded_cache(const std::filesystem::path& path, std::uint64_t source_checksum,
                                                std::size_t max_seq) {
  std::ifstream is(path, std::ios::binary);
  if (!is) return std::nullopt;
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCacheMagic, sizeof magic) != 0) return std::nullopt;
  try {
    if (get<std::uint32_t>(is) != kCacheVersion) return std::nullopt;
    if (get<std::uint64_t>(is) != source_checksum) return std::nullopt;
    if (get<std::uint64_t>(is) != max_seq) return std::nullopt;
    EncodedCorpus c;
    const auto count = get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < count; ++i) {
      EncodedInstance e;
      e.id = get_string(is);
      e.response_start = get<std::uint64_t>(is);
      e.truncated = get<std::uint8_t>(is) != 0;
      e.tokens.resize(get<std::uint32_t>(is));
      for (int& t : e.tokens) t = get<std::uint16_t>(is);
      c.instances.push_back(std::move(e));
    }
    const auto warnings = get<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < warnings; ++i) c.warnings.push_back(get_string(is));
    return c;
  } catch (const std::runtime_error&) {
    return std::nullopt;
  }
}

EncodedCorpus load_corpus(const std::filesystem::path& jsonl, std::size_t max_seq,
                          const std::optional<std::filesystem::path>& cache_path) {
  std::uint64_t sum = 0;
  if (cache_path) {
    sum = file_checksum(jsonl);
    if (auto cached = load_encoded_cache(*cache_path, sum, max_seq)) return *cached;
  }
  const LoadResult loaded = load_jsonl(jsonl);
  EncodedCorpus c = encode_corpus(loaded.records, max_seq);
  for (const auto& err : loaded.errors) {
    c.warnings.insert(c.warnings.begin(), jsonl.string() + ":" + std::to_string(err.line) + ": skipped: " + err.message);
  }
  if (cache_path) save_encoded_cache(*cache_path, c, sum, max_seq);
  return c;
}

namespace {

std::string random_word(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> letter('a', 'z');
  std::string s(len(rng), 'a');
  for (char& c : s) c = static_cast<char>(letter(rng));
  return s;
}

InstructionRecord make_toy(const std::string& task, std::mt19937_64& rng) {
  InstructionRecord r;
  if (task == "copy") {
    r.instruction = "Repeat the text.";
    r.input = random_word(rng, 3, 8);
    r.output = r.input;
  } else if (task == "reverse") {
    r.instruction = "Reverse the text.";
    r.input = random_word(rng, 3, 8);
    r.output = std::string(r.input.rbegin(), r.input.rend());
  } else if (task == "arith") {
    std::uniform_int_distribution<int> num(0, 99);
    const int a = num(rng), b = num(rng);
    r.instruction = "Add the two numbers.";
    r.input = std::to_string(a) + "+" + std::to_string(b);
    r.output = std::to_string(a + b);
  } else {
    throw std::invalid_argument("unknown toy task '" + task + "' (expected copy, reverse, arith, mixed)");
  }
  return r;
}

}  // namespace

std::vector<InstructionRecord> toy_corpus(const std::string& task, std::size_t count, std::uint64_t seed,
                                          const std::string& id_prefix) {
  std::mt19937_64 rng(seed);
  std::vector<InstructionRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string t = task == "mixed" ? (i % 2 == 0 ? "reverse" : "arith") : task;
    InstructionRecord r = make_toy(t, rng);
    r.id = id_prefix + t + "-" + std::to_string(i);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace tokenseek
