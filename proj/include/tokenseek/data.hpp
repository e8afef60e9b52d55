// SPDX-License-Identifier: Apache-2.0
//
// Instruction data: JSONL ingestion, Alpaca rendering, byte tokenizer and
// prompt/response boundaries.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tokenseek/model.hpp"

namespace tokenseek {

inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kByteVocab = 259;

struct InstructionRecord {
  std::string id;
  std::string instruction;
  std::string input;
  std::string output;
};

struct EncodedInstance {
  std::string id;
  TokenIds tokens;
  std::size_t response_start = 0;
  bool truncated = false;
};

// The prompt header only (template through "### Response:\n").
std::string render_prompt(const InstructionRecord& record);
// Prompt header followed by the output text.
std::string render_alpaca(const InstructionRecord& record);

// Bytes to ids with BOS prepended and EOS appended.
TokenIds tokenize(const std::string& text);
// Inverse of tokenize; special ids are dropped.
std::string detokenize(const TokenIds& ids);

struct LineError {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct LoadResult {
  std::vector<InstructionRecord> records;
  std::vector<LineError> errors;
};

// One record per non-blank line. Missing ids default to the 0-based record
// index. Malformed lines are skipped and reported; an unreadable file throws
// std::runtime_error.
LoadResult load_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<InstructionRecord>& records);

// Index of the first token after the "### Response:\n" marker, or n when
// only EOS follows it. Throws std::invalid_argument when the marker is absent.
std::size_t response_boundary(const TokenIds& tokens);

// Renders and tokenizes; when longer than max_seq, tokens are dropped from
// the prompt just after BOS. Only if the response alone does not fit is its
// tail cut, and `truncated` is set either way.
EncodedInstance encode(const InstructionRecord& record, std::size_t max_seq);

// Left-truncates an already encoded instance the same way encode does.
EncodedInstance truncate_instance(EncodedInstance instance, std::size_t max_seq);

// Next-token targets; with `response_only` only tokens at or after
// response_start are predicted.
TokenIds instance_targets(const EncodedInstance& instance, bool response_only);

struct EncodedCorpus {
  std::vector<EncodedInstance> instances;
  std::vector<std::string> warnings;
};

EncodedCorpus encode_corpus(const std::vector<InstructionRecord>& records, std::size_t max_seq);

// FNV-1a of the file bytes.
std::uint64_t file_checksum(const std::filesystem::path& path);

// Encoded-corpus cache, a versioned binary keyed by the source checksum and
// max_seq. load returns nullopt when the cache is absent or stale.
void save_encoded_cache(const std::filesystem::path& path, const EncodedCorpus& corpus, std::uint64_t source_checksum,
                        std::size_t max_seq);
std::optional<EncodedCorpus> load_encoded_cache(const std::filesystem::path& path, std::uint64_t source_checksum,
                                                std::size_t max_seq);

// Loads the JSONL file and encodes it, reusing `cache_path` when it matches.
// Line errors are returned as warnings.
EncodedCorpus load_corpus(const std::filesystem::path& jsonl, std::size_t max_seq,
                          const std::optional<std::filesystem::path>& cache_path = std::nullopt);

// Toy instruction tasks: "copy", "reverse", "arith" (two-number addition),
// or "mixed" (reverse and arith alternating).
std::vector<InstructionRecord> toy_corpus(const std::string& task, std::size_t count, std::uint64_t seed,
                                          const std::string& id_prefix = "");

}  // namespace tokenseek
