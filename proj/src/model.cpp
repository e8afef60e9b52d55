// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/model.hpp"

#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "blocks.hpp"

namespace tokenseek {

using detail::AttentionOut;

void ModelConfig::validate() const {
  if (n_layers < 1 || hidden < 1 || n_heads < 1 || ff_dim < 1 || vocab < 1) {
    throw std::invalid_argument("ModelConfig: all counts must be >= 1 (" + describe() + ")");
  }
  if (max_seq < 2) throw std::invalid_argument("ModelConfig: max_seq must be >= 2");
  if (hidden % n_heads != 0) {
    throw std::invalid_argument("ModelConfig: hidden " + std::to_string(hidden) + " not divisible by n_heads " +
                                std::to_string(n_heads));
  }
}

std::string ModelConfig::describe() const {
  std::ostringstream os;
  os << "n_layers=" << n_layers << " hidden=" << hidden << " n_heads=" << n_heads << " ff_dim=" << ff_dim
     << " vocab=" << vocab << " max_seq=" << max_seq << " seed=" << seed;
  return os.str();
}

namespace {

template <class P, class Out>
void collect(P& p, Out& out) {
  out.emplace_back("token_embedding", &p.token_embedding);
  out.emplace_back("position_embedding", &p.position_embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.emplace_back(pre + "norm1_gain", &L.norm1_gain);
    out.emplace_back(pre + "norm1_shift", &L.norm1_shift);
    out.emplace_back(pre + "wq", &L.wq);
    out.emplace_back(pre + "bq", &L.bq);
    out.emplace_back(pre + "wk", &L.wk);
    out.emplace_back(pre + "bk", &L.bk);
    out.emplace_back(pre + "wv", &L.wv);
    out.emplace_back(pre + "bv", &L.bv);
    out.emplace_back(pre + "wo", &L.wo);
    out.emplace_back(pre + "bo", &L.bo);
    out.emplace_back(pre + "norm2_gain", &L.norm2_gain);
    out.emplace_back(pre + "norm2_shift", &L.norm2_shift);
    out.emplace_back(pre + "w1", &L.w1);
    out.emplace_back(pre + "b1", &L.b1);
    out.emplace_back(pre + "w2", &L.w2);
    out.emplace_back(pre + "b2", &L.b2);
  }
  out.emplace_back("final_gain", &p.final_gain);
  out.emplace_back("final_shift", &p.final_shift);
  out.emplace_back("lm_head", &p.lm_head);
}

}  // namespace

std::vector<std::pair<std::string, Matrix*>> Parameters::named_tensors() {
  std::vector<std::pair<std::string, Matrix*>> out;
  collect(*this, out);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> Parameters::named_tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  collect(*this, out);
  return out;
}

std::size_t Parameters::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : named_tensors()) n += m->size();
  return n;
}

Parameters Parameters::zeros(const ModelConfig& c) {
  c.validate();
  const auto H = static_cast<std::size_t>(c.hidden);
  const auto F = static_cast<std::size_t>(c.ff_dim);
  const auto V = static_cast<std::size_t>(c.vocab);
  Parameters p;
  p.config = c;
  p.token_embedding = Matrix(V, H);
  p.position_embedding = Matrix(static_cast<std::size_t>(c.max_seq), H);
  p.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& L : p.layers) {
    L.norm1_gain = L.norm1_shift = Matrix(1, H);
    L.wq = L.wk = L.wv = L.wo = Matrix(H, H);
    L.bq = L.bk = L.bv = L.bo = Matrix(1, H);
    L.norm2_gain = L.norm2_shift = Matrix(1, H);
    L.w1 = Matrix(H, F);
    L.b1 = Matrix(1, F);
    L.w2 = Matrix(F, H);
    L.b2 = Matrix(1, H);
  }
  p.final_gain = p.final_shift = Matrix(1, H);
  p.lm_head = Matrix(H, V);
  return p;
}

std::size_t parameter_count(const ModelConfig& c) {
  const auto H = static_cast<std::size_t>(c.hidden);
  const auto F = static_cast<std::size_t>(c.ff_dim);
  const auto V = static_cast<std::size_t>(c.vocab);
  const auto S = static_cast<std::size_t>(c.max_seq);
  const std::size_t per_layer = 4 * H + 4 * (H * H + H) + (H * F + F) + (F * H + H);
  return V * H + S * H + static_cast<std::size_t>(c.n_layers) * per_layer + 2 * H + H * V;
}

Parameters init_params(const ModelConfig& config, double init_scale) {
  if (init_scale < 0.0) throw std::invalid_argument("init_params: init_scale must be non-negative");
  Parameters p = Parameters::zeros(config);
  std::mt19937_64 rng(config.seed);
  // Box-Muller on raw engine output keeps the stream identical across standard libraries.
  auto uniform = [&rng] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
  auto gaussian = [&] {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  };
  auto fill = [&](Matrix& m) {
    for (double& v : m.data()) v = init_scale * gaussian();
  };
  fill(p.token_embedding);
  fill(p.position_embedding);
  for (auto& L : p.layers) {
    L.norm1_gain.fill(1.0);
    L.norm2_gain.fill(1.0);
    fill(L.wq);
    fill(L.wk);
    fill(L.wv);
    fill(L.wo);
    fill(L.w1);
    fill(L.w2);
  }
  p.final_gain.fill(1.0);
  fill(p.lm_head);
  return p;
}

std::uint64_t params_checksum(const Parameters& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_u64 = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  };
  const auto& c = params.config;
  for (int v : {c.n_layers, c.hidden, c.n_heads, c.ff_dim, c.vocab, c.max_seq}) mix_u64(static_cast<std::uint64_t>(v));
  for (const auto& [name, m] : params.named_tensors())
    for (double v : m->data()) mix_u64(std::bit_cast<std::uint64_t>(v));
  return h;
}

TokenIds next_token_targets(const TokenIds& tokens) {
  TokenIds t(tokens.size(), kNoTarget);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) t[i] = tokens[i + 1];
  return t;
}

void validate_inputs(const ModelConfig& config, const TokenIds& tokens, const TokenIds& targets) {
  if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(config.max_seq)) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                                std::to_string(config.max_seq));
  }
  if (targets.size() != tokens.size()) {
    throw std::invalid_argument("forward: targets length " + std::to_string(targets.size()) +
                                " != tokens length " + std::to_string(tokens.size()));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= config.vocab) {
      throw std::invalid_argument("forward: token id " + std::to_string(tokens[i]) + " at position " +
                                  std::to_string(i) + " outside vocab " + std::to_string(config.vocab));
    }
    if (targets[i] != kNoTarget && (targets[i] < 0 || targets[i] >= config.vocab)) {
      throw std::invalid_argument("forward: target id " + std::to_string(targets[i]) + " at position " +
                                  std::to_string(i) + " outside vocab");
    }
  }
}

namespace {

std::vector<std::size_t> iota_positions(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

// One pre-norm block over all rows. Caches into `stash` when non-null.
Matrix block_forward(const Parameters& params, int l, const Matrix& x, std::span<const std::size_t> positions,
                     const AllowMask& mask, const AdapterContext& ctx, TensorStash* stash,
                     std::vector<Matrix>* attn_probs) {
  const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
  const int heads = params.config.n_heads;
  auto keep = [&](CacheKind kind, int sub, const Matrix& m) {
    if (stash) stash->put(kind, l, sub, m);
  };
  Matrix rank;

  auto n1 = detail::layer_norm(x, lp.norm1_gain, lp.norm1_shift);
  keep(CacheKind::kNorm1Hat, 0, n1.hat);
  keep(CacheKind::kNorm1Rstd, 0, n1.rstd);

  auto proj = [&](const Matrix& in, const Matrix& w, const Matrix& b, ProjTarget t) {
    Matrix r;
    Matrix y = detail::project(in, w, b, ctx, l, t, positions, &r);
    if (!r.empty()) keep(CacheKind::kAdapterRank, static_cast<int>(t), r);
    return y;
  };

  Matrix q = proj(n1.y, lp.wq, lp.bq, ProjTarget::kQuery);
  Matrix k = proj(n1.y, lp.wk, lp.bk, ProjTarget::kKey);
  Matrix v = proj(n1.y, lp.wv, lp.bv, ProjTarget::kValue);
  keep(CacheKind::kQuery, 0, q);
  keep(CacheKind::kKey, 0, k);
  keep(CacheKind::kValue, 0, v);

  AttentionOut att = detail::attention(q, k, v, mask, heads);
  for (int h = 0; h < heads; ++h) keep(CacheKind::kAttnProb, h, att.probs[static_cast<std::size_t>(h)]);
  keep(CacheKind::kAttnConcat, 0, att.concat);
  Matrix x1 = add(x, proj(att.concat, lp.wo, lp.bo, ProjTarget::kOutput));

  auto n2 = detail::layer_norm(x1, lp.norm2_gain, lp.norm2_shift);
  keep(CacheKind::kNorm2Hat, 0, n2.hat);
  keep(CacheKind::kNorm2Rstd, 0, n2.rstd);
  Matrix a = proj(n2.y, lp.w1, lp.b1, ProjTarget::kFfnUp);
  keep(CacheKind::kFfnPre, 0, a);
  Matrix f = gelu(a);
  keep(CacheKind::kFfnAct, 0, f);
  Matrix out = add(x1, proj(f, lp.w2, lp.b2, ProjTarget::kFfnDown));
  require_finite(out, "block_forward");
  if (attn_probs) *attn_probs = std::move(att.probs);
  return out;
}

// Backward through one block. Weight gradients go to `g` when non-null.
Matrix block_backward(const Parameters& params, int l, const Matrix& dout, const TensorStash& stash,
                      LayerParams* g) {
  const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
  const int heads = params.config.n_heads;
  const AdapterContext none;
  const std::span<const std::size_t> no_pos;
  auto grads = [&](Matrix* dw, Matrix* db) { return detail::ProjectGrads{g ? dw : nullptr, g ? db : nullptr, nullptr}; };

  const Matrix& f = stash.get(CacheKind::kFfnAct, l);
  Matrix df = detail::project_backward(dout, f, lp.w2, none, l, ProjTarget::kFfnDown, no_pos, nullptr,
                                       grads(g ? &g->w2 : nullptr, g ? &g->b2 : nullptr));
  Matrix da = gelu_backward(stash.get(CacheKind::kFfnPre, l), df);
  const Matrix& hat2 = stash.get(CacheKind::kNorm2Hat, l);
  Matrix h2 = detail::layer_norm_apply(hat2, lp.norm2_gain, lp.norm2_shift);
  Matrix dh2 = detail::project_backward(da, h2, lp.w1, none, l, ProjTarget::kFfnUp, no_pos, nullptr,
                                        grads(g ? &g->w1 : nullptr, g ? &g->b1 : nullptr));
  Matrix dx1 = dout;
  dx1 += detail::layer_norm_backward(dh2, hat2, stash.get(CacheKind::kNorm2Rstd, l), lp.norm2_gain,
                                     g ? &g->norm2_gain : nullptr, g ? &g->norm2_shift : nullptr);

  Matrix dconcat = detail::project_backward(dx1, stash.get(CacheKind::kAttnConcat, l), lp.wo, none, l,
                                            ProjTarget::kOutput, no_pos, nullptr,
                                            grads(g ? &g->wo : nullptr, g ? &g->bo : nullptr));
  std::vector<Matrix> probs;
  for (int h = 0; h < heads; ++h) probs.push_back(stash.get(CacheKind::kAttnProb, l, h));
  const Matrix& q = stash.get(CacheKind::kQuery, l);
  const Matrix& k = stash.get(CacheKind::kKey, l);
  const Matrix& v = stash.get(CacheKind::kValue, l);
  auto ag = detail::attention_backward(dconcat, q, k, v, probs, heads);

  const Matrix& hat1 = stash.get(CacheKind::kNorm1Hat, l);
  Matrix h1 = detail::layer_norm_apply(hat1, lp.norm1_gain, lp.norm1_shift);
  Matrix dh1 = detail::project_backward(ag.dq, h1, lp.wq, none, l, ProjTarget::kQuery, no_pos, nullptr,
                                        grads(g ? &g->wq : nullptr, g ? &g->bq : nullptr));
  dh1 += detail::project_backward(ag.dk, h1, lp.wk, none, l, ProjTarget::kKey, no_pos, nullptr,
                                  grads(g ? &g->wk : nullptr, g ? &g->bk : nullptr));
  dh1 += detail::project_backward(ag.dv, h1, lp.wv, none, l, ProjTarget::kValue, no_pos, nullptr,
                                  grads(g ? &g->wv : nullptr, g ? &g->bv : nullptr));
  Matrix dx = dx1;
  dx += detail::layer_norm_backward(dh1, hat1, stash.get(CacheKind::kNorm1Rstd, l), lp.norm1_gain,
                                    g ? &g->norm1_gain : nullptr, g ? &g->norm1_shift : nullptr);
  return dx;
}

struct HeadOut {
  Matrix logits;
  detail::CrossEntropyOut ce;
};

HeadOut head_forward(const Parameters& params, const Matrix& x, const TokenIds& targets, TensorStash* stash) {
  auto nf = detail::layer_norm(x, params.final_gain, params.final_shift);
  Matrix logits = matmul(nf.y, params.lm_head);
  auto ce = detail::cross_entropy_rows(logits, targets);
  if (stash) {
    stash->put(CacheKind::kFinalHat, -1, nf.hat);
    stash->put(CacheKind::kFinalRstd, -1, nf.rstd);
    stash->put(CacheKind::kProbs, -1, ce.probs);
  }
  return {std::move(logits), std::move(ce)};
}

// dL/d(final stream) from the cached head tensors; head grads go to `g` when non-null.
Matrix head_backward(const Parameters& params, const TensorStash& stash, const TokenIds& targets, std::size_t count,
                     Gradients* g) {
  Matrix dlogits = detail::cross_entropy_backward(stash.get(CacheKind::kProbs, -1), targets, count);
  const Matrix& hat = stash.get(CacheKind::kFinalHat, -1);
  if (g) g->lm_head += matmul_tn(detail::layer_norm_apply(hat, params.final_gain, params.final_shift), dlogits);
  Matrix dy = matmul_nt(dlogits, params.lm_head);
  return detail::layer_norm_backward(dy, hat, stash.get(CacheKind::kFinalRstd, -1), params.final_gain,
                                     g ? &g->final_gain : nullptr, g ? &g->final_shift : nullptr);
}

}  // namespace

ForwardResult forward_full(const Parameters& params, const TokenIds& tokens, const TokenIds& targets,
                           const AdapterContext& adapters) {
  validate_inputs(params.config, tokens, targets);
  const std::size_t n = tokens.size();
  const auto positions = iota_positions(n);
  const AllowMask mask = AllowMask::causal(n);

  ForwardResult r;
  r.cache.n = n;
  r.cache.adapted = adapters.active();
  Matrix x = detail::embed(params, tokens, positions);
  const int L = params.config.n_layers;
  for (int l = 0; l < L; ++l) {
    x = block_forward(params, l, x, positions, mask, adapters, &r.cache.stash, l == L - 1 ? &r.final_attn : nullptr);
  }
  HeadOut head = head_forward(params, x, targets, &r.cache.stash);
  r.target_count = detail::count_targets(targets);
  r.loss = detail::mean_loss(head.ce.row_loss, r.target_count);
  r.logits = std::move(head.logits);
  return r;
}

Gradients backward_full(const Parameters& params, const ActivationCache& cache, const TokenIds& tokens,
                        const TokenIds& targets, std::vector<Matrix>* stream_grads) {
  validate_inputs(params.config, tokens, targets);
  if (cache.n != tokens.size()) {
    throw std::invalid_argument("backward_full: cache built for n=" + std::to_string(cache.n) + ", got n=" +
                                std::to_string(tokens.size()));
  }
  if (cache.adapted) {
    throw std::invalid_argument("backward_full: cache was built with adapters; use adapted_backward");
  }
  const auto& stash = cache.stash;
  if (stash.get(CacheKind::kProbs, -1).cols() != static_cast<std::size_t>(params.config.vocab) ||
      stash.get(CacheKind::kNorm1Hat, 0).cols() != static_cast<std::size_t>(params.config.hidden)) {
    throw std::invalid_argument("backward_full: cache shapes do not match parameters");
  }
  Gradients g = Parameters::zeros(params.config);
  const std::size_t count = detail::count_targets(targets);
  Matrix dx = head_backward(params, stash, targets, count, &g);
  const int L = params.config.n_layers;
  if (stream_grads) stream_grads->assign(static_cast<std::size_t>(L), Matrix());
  for (int l = L - 1; l >= 0; --l) {
    dx = block_backward(params, l, dx, stash, &g.layers[static_cast<std::size_t>(l)]);
    if (stream_grads) (*stream_grads)[static_cast<std::size_t>(l)] = dx;
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto te = g.token_embedding.row(static_cast<std::size_t>(tokens[i]));
    auto pe = g.position_embedding.row(i);
    for (std::size_t j = 0; j < dx.cols(); ++j) {
      te[j] += dx(i, j);
      pe[j] += dx(i, j);
    }
  }
  return g;
}

PenultimateResult partial_backward_penultimate(const Parameters& params, const TokenIds& tokens,
                                               const TokenIds& targets) {
  validate_inputs(params.config, tokens, targets);
  const std::size_t n = tokens.size();
  const auto positions = iota_positions(n);
  const AllowMask mask = AllowMask::causal(n);
  const int L = params.config.n_layers;

  Matrix x = detail::embed(params, tokens, positions);
  for (int l = 0; l < L - 1; ++l) x = block_forward(params, l, x, positions, mask, {}, nullptr, nullptr);

  PenultimateResult r;
  TensorStash stash;
  x = block_forward(params, L - 1, x, positions, mask, {}, &stash, &r.final_attn);
  HeadOut head = head_forward(params, x, targets, &stash);
  const std::size_t count = detail::count_targets(targets);
  r.loss = detail::mean_loss(head.ce.row_loss, count);
  r.cached_scalars = stash.total_scalars();

  Matrix dx = head_backward(params, stash, targets, count, nullptr);
  r.grad = block_backward(params, L - 1, dx, stash, nullptr);
  return r;
}

}  // namespace tokenseek
