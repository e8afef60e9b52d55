// SPDX-License-Identifier: Apache-2.0
//
// Token scoring from the final-layer attention (context) and the gradient
// at the input of the final block, score fusion and top-k selection, plus
// the persisted score file.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "tokenseek/data.hpp"
#include "tokenseek/ditcher.hpp"
#include "tokenseek/model.hpp"

namespace tokenseek {

inline constexpr double kScoreEps = 1e-12;

// Column sums of the head-averaged attention. Each head must be square and
// row-stochastic within 1e-9, otherwise std::invalid_argument.
std::vector<double> context_scores(const std::vector<Matrix>& final_attn);

// Row sums of dL/dz at the input of the final block, of |G| when `magnitude`.
std::vector<double> gradient_scores(const Parameters& params, const TokenIds& tokens, const TokenIds& targets,
                                    bool magnitude = true);

// alpha * log(i1) + beta * minmax(i2). Rejects alpha = beta = 0, negative
// weights and length mismatches.
std::vector<double> combine_scores(const std::vector<double>& i1, const std::vector<double>& i2, double alpha,
                                   double beta, double eps = kScoreEps);

// The k = selection_size(n, ratio) largest scores; ties go to the lower index.
SelectionMask select_tokens(const std::vector<double>& fused, double ratio);

struct TokenScores {
  std::string id;
  std::vector<double> i1;
  std::vector<double> i2;
  std::vector<double> fused;
  std::size_t n() const { return i1.size(); }
};

struct ScoreSet {
  double alpha = 5.0;
  double beta = 5.0;
  bool magnitude = true;
  std::uint64_t model_checksum = 0;
  std::vector<TokenScores> instances;
  std::vector<std::string> warnings;
  std::vector<std::string> notes;  // written as '#' lines after the header, skipped on read

  const TokenScores* find(const std::string& id) const;
  // Recomputes every fused vector with new weights.
  void refuse(double alpha, double beta);
};

// Both signals for one instance from a single partial backward.
TokenScores score_instance(const Parameters& params, const std::string& id, const TokenIds& tokens,
                           const TokenIds& targets, double alpha, double beta, bool magnitude = true);

// Scores every instance (next-token targets on all positions unless
// `response_only`). Instances longer than max_seq are truncated with a
// warning. Work is spread over `threads` workers; results keep corpus order.
ScoreSet score_corpus(const Parameters& params, const EncodedCorpus& corpus, double alpha, double beta,
                      bool magnitude = true, bool response_only = false, unsigned threads = 1);

// Text format: a '#' header line with version, weights, magnitude flag and
// model checksum, '#'-prefixed warning lines, the column line
// `instance_id,token_index,i1,i2`, then one line per token with %.17g reals.
void write_scores(std::ostream& os, const ScoreSet& scores);
void write_scores(const std::filesystem::path& path, const ScoreSet& scores);
// Fused scores are recomputed from the header weights. Throws
// std::runtime_error with a line number on malformed input.
ScoreSet read_scores(std::istream& is);
ScoreSet read_scores(const std::filesystem::path& path);

}  // namespace tokenseek
