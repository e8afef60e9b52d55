// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/seeker.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace tokenseek {

std::vector<double> context_scores(const std::vector<Matrix>& final_attn) {
  if (final_attn.empty()) throw std::invalid_argument("context_scores: no attention heads");
  const std::size_t n = final_attn.front().rows();
  Matrix avg(n, n);
  for (std::size_t h = 0; h < final_attn.size(); ++h) {
    const Matrix& a = final_attn[h];
    if (a.rows() != n || a.cols() != n) {
      throw std::invalid_argument("context_scores: head " + std::to_string(h) + " is " + a.shape_str() +
                                  ", expected square " + std::to_string(n) + "x" + std::to_string(n));
    }
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (a(i, j) < 0.0) throw std::invalid_argument("context_scores: negative attention weight");
        s += a(i, j);
      }
      if (std::abs(s - 1.0) > 1e-9) {
        throw std::invalid_argument("context_scores: row " + std::to_string(i) + " of head " + std::to_string(h) +
                                    " sums to " + std::to_string(s));
      }
    }
    avg += a;
  }
  avg *= 1.0 / static_cast<double>(final_attn.size());
  const Matrix sums = column_sums(avg);
  return {sums.data().begin(), sums.data().end()};
}

std::vector<double> gradient_scores(const Parameters& params, const TokenIds& tokens, const TokenIds& targets,
                                    bool magnitude) {
  const Matrix g = partial_backward_penultimate(params, tokens, targets).grad;
  std::vector<double> out(g.rows(), 0.0);
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t k = 0; k < g.cols(); ++k) out[i] += magnitude ? std::abs(g(i, k)) : g(i, k);
  return out;
}

std::vector<double> combine_scores(const std::vector<double>& i1, const std::vector<double>& i2, double alpha,
                                   double beta, double eps) {
  if (i1.size() != i2.size()) {
    throw std::invalid_argument("combine_scores: " + std::to_string(i1.size()) + " context scores vs " +
                                std::to_string(i2.size()) + " gradient scores");
  }
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("combine_scores: alpha and beta must be >= 0");
  if (alpha == 0.0 && beta == 0.0) throw std::invalid_argument("combine_scores: alpha = beta = 0 gives no ranking");
  if (i1.empty()) return {};
  const auto l = stable_log(i1, eps);
  const auto m = minmax_norm(i2, eps);
  std::vector<double> out(i1.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = alpha * l[j] + beta * m[j];
  return out;
}

SelectionMask select_tokens(const std::vector<double>& fused, double ratio) {
  const std::size_t k = selection_size(fused.size(), ratio);
  std::vector<std::size_t> idx(fused.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return fused[a] > fused[b]; });
  idx.resize(k);
  return SelectionMask::from_selected(fused.size(), std::move(idx));
}

const TokenScores* ScoreSet::find(const std::string& id) const {
  for (const auto& s : instances)
    if (s.id == id) return &s;
  return nullptr;
}

void ScoreSet::refuse(double a, double b) {
  for (auto& s : instances) s.fused = combine_scores(s.i1, s.i2, a, b);
  alpha = a;
  beta = b;
}

TokenScores score_instance(const Parameters& params, const std::string& id, const TokenIds& tokens,
                           const TokenIds& targets, double alpha, double beta, bool magnitude) {
  const auto pb = partial_backward_penultimate(params, tokens, targets);
  TokenScores s;
  s.id = id;
  s.i1 = context_scores(pb.final_attn);
  s.i2.assign(pb.grad.rows(), 0.0);
  for (std::size_t i = 0; i < pb.grad.rows(); ++i)
    for (std::size_t k = 0; k < pb.grad.cols(); ++k) s.i2[i] += magnitude ? std::abs(pb.grad(i, k)) : pb.grad(i, k);
  s.fused = combine_scores(s.i1, s.i2, alpha, beta);
  return s;
}

ScoreSet score_corpus(const Parameters& params, const EncodedCorpus& corpus, double alpha, double beta, bool magnitude,
                      bool response_only, unsigned threads) {
  // Validate the weights before any work.
  combine_scores({1.0}, {0.0}, alpha, beta);
  ScoreSet out;
  out.alpha = alpha;
  out.beta = beta;
  out.magnitude = magnitude;
  out.model_checksum = params_checksum(params);
  out.warnings = corpus.warnings;

  const auto max_seq = static_cast<std::size_t>(params.config.max_seq);
  std::vector<EncodedInstance> work;
  work.reserve(corpus.instances.size());
  for (const auto& inst : corpus.instances) {
    if (inst.id.find_first_of(",\n\r") != std::string::npos) {
      throw std::invalid_argument("score_corpus: instance id '" + inst.id + "' contains a comma or newline");
    }
    if (inst.tokens.size() > max_seq) {
      out.warnings.push_back("instance " + inst.id + " truncated from " + std::to_string(inst.tokens.size()) + " to " +
                             std::to_string(max_seq) + " tokens for scoring");
    }
    work.push_back(truncate_instance(inst, max_seq));
  }

  out.instances.resize(work.size());
  auto run = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < work.size(); i += step) {
      out.instances[i] = score_instance(params, work[i].id, work[i].tokens, instance_targets(work[i], response_only),
                                        alpha, beta, magnitude);
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, work.size()))));
  if (threads == 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          run(t, threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return out;
}

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_scores(std::ostream& os, const ScoreSet& s) {
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016" PRIx64, s.model_checksum);
  os << "# tokenseek-scores v1 alpha=" << fmt17(s.alpha) << " beta=" << fmt17(s.beta)
     << " magnitude=" << (s.magnitude ? 1 : 0) << " model=" << hex << " instances=" << s.instances.size() << '\n';
  for (const auto& note : s.notes) os << "# " << note << '\n';
  for (const auto& w : s.warnings) os << "# warning: " << w << '\n';
  os << "instance_id,token_index,i1,i2\n";
  for (const auto& inst : s.instances)
    for (std::size_t j = 0; j < inst.n(); ++j)
      os << inst.id << ',' << j << ',' << fmt17(inst.i1[j]) << ',' << fmt17(inst.i2[j]) << '\n';
}

void write_scores(const std::filesystem::path& path, const ScoreSet& scores) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write score file " + path.string());
  write_scores(os, scores);
}

namespace {

[[noreturn]] void bad(std::size_t line, const std::string& what) {
  throw std::runtime_error("score file line " + std::to_string(line) + ": " + what);
}

double parse_real(const std::string& s, std::size_t line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    bad(line, "bad number '" + s + "'");
  }
  if (used != s.size()) bad(line, "bad number '" + s + "'");
  return v;
}

}  // namespace

ScoreSet read_scores(std::istream& is) {
  ScoreSet s;
  std::string line;
  std::size_t lineno = 0;
  bool header = false, columns = false;
  std::size_t declared = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!header) {
      if (line.rfind("# tokenseek-scores v1", 0) != 0) bad(lineno, "missing 'tokenseek-scores v1' header");
      std::istringstream hs(line.substr(21));
      std::string kv;
      bool got_alpha = false, got_beta = false;
      while (hs >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) bad(lineno, "bad header field '" + kv + "'");
        const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
        if (key == "alpha") {
          s.alpha = parse_real(val, lineno);
          got_alpha = true;
        } else if (key == "beta") {
          s.beta = parse_real(val, lineno);
          got_beta = true;
        } else if (key == "magnitude") {
          s.magnitude = val == "1";
        } else if (key == "model") {
          s.model_checksum = std::stoull(val, nullptr, 16);
        } else if (key == "instances") {
          declared = std::stoull(val);
        }
      }
      if (!got_alpha || !got_beta) bad(lineno, "header lacks alpha/beta");
      header = true;
      continue;
    }
    if (line.rfind("# warning: ", 0) == 0) {
      s.warnings.push_back(line.substr(11));
      continue;
    }
    if (!line.empty() && line[0] == '#') continue;
    if (!columns) {
      if (line != "instance_id,token_index,i1,i2") bad(lineno, "expected column line");
      columns = true;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string part;
    while (std::getline(ls, part, ',')) f.push_back(part);
    if (f.size() != 4) bad(lineno, "expected 4 fields, got " + std::to_string(f.size()));
    const std::size_t idx = static_cast<std::size_t>(parse_real(f[1], lineno));
    if (s.instances.empty() || s.instances.back().id != f[0]) {
      if (idx != 0) bad(lineno, "instance " + f[0] + " does not start at token 0");
      if (s.find(f[0])) bad(lineno, "instance " + f[0] + " appears twice");
      s.instances.push_back({f[0], {}, {}, {}});
    }
    auto& inst = s.instances.back();
    if (idx != inst.n()) bad(lineno, "token index " + f[1] + " out of sequence");
    const double i1 = parse_real(f[2], lineno);
    if (!(i1 > 0.0)) bad(lineno, "context score must be positive");
    inst.i1.push_back(i1);
    inst.i2.push_back(parse_real(f[3], lineno));
  }
  if (!header) throw std::runtime_error("score file is empty");
  if (!columns) bad(lineno, "missing column line");
  if (declared != s.instances.size()) {
    throw std::runtime_error("score file declares " + std::to_string(declared) + " instances but holds " +
                             std::to_string(s.instances.size()));
  }
  s.refuse(s.alpha, s.beta);
  return s;
}

ScoreSet read_scores(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read score file " + path.string());
  return read_scores(is);
}

}  // namespace tokenseek
