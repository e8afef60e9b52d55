// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/ditcher.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "blocks.hpp"

namespace tokenseek {

SelectionMask SelectionMask::from_selected(std::size_t n, std::vector<std::size_t> selected) {
  if (selected.empty()) throw std::invalid_argument("SelectionMask: empty selection");
  std::sort(selected.begin(), selected.end());
  if (std::adjacent_find(selected.begin(), selected.end()) != selected.end()) {
    throw std::invalid_argument("SelectionMask: duplicate index");
  }
  if (selected.back() >= n) {
    throw std::invalid_argument("SelectionMask: index " + std::to_string(selected.back()) + " out of range for n=" +
                                std::to_string(n));
  }
  SelectionMask m;
  m.n_ = n;
  std::size_t s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (s < selected.size() && selected[s] == i) {
      ++s;
    } else {
      m.unselected_.push_back(i);
    }
  }
  m.selected_ = std::move(selected);
  return m;
}

SelectionMask SelectionMask::all(std::size_t n) {
  std::vector<std::size_t> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = i;
  return from_selected(n, std::move(s));
}

bool SelectionMask::is_selected(std::size_t pos) const {
  return std::binary_search(selected_.begin(), selected_.end(), pos);
}

std::vector<std::size_t> SelectionMask::permutation() const {
  std::vector<std::size_t> p = unselected_;
  p.insert(p.end(), selected_.begin(), selected_.end());
  return p;
}

std::vector<std::size_t> SelectionMask::inverse_permutation() const {
  const auto p = permutation();
  std::vector<std::size_t> inv(n_);
  for (std::size_t r = 0; r < p.size(); ++r) inv[p[r]] = r;
  return inv;
}

std::size_t selection_size(std::size_t n, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw std::invalid_argument("selection ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
  // The slack absorbs representation error in decimal ratios such as 0.3 * 5.
  const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5 + 1e-9));
  return std::clamp<std::size_t>(k, 1, std::max<std::size_t>(n, 1));
}

std::pair<Matrix, Matrix> partition(const Matrix& hidden, const SelectionMask& mask) {
  if (hidden.rows() != mask.n()) {
    throw std::invalid_argument("partition: " + hidden.shape_str() + " rows vs mask n=" + std::to_string(mask.n()));
  }
  Matrix sel = gather_rows(hidden, mask.selected());
  Matrix unsel = gather_rows(hidden, mask.unselected());
  return {std::move(sel), std::move(unsel)};
}

Matrix reorganize(const Matrix& out_selected, const Matrix& out_unselected, const SelectionMask& mask) {
  if (out_selected.rows() != mask.selected().size() || out_unselected.rows() != mask.unselected().size()) {
    throw std::invalid_argument("reorganize: group sizes " + out_selected.shape_str() + " / " +
                                out_unselected.shape_str() + " do not match mask");
  }
  const std::size_t cols = out_selected.cols();
  if (!out_unselected.empty() && out_unselected.cols() != cols) {
    throw std::invalid_argument("reorganize: column mismatch");
  }
  Matrix out(mask.n(), cols);
  for (std::size_t i = 0; i < mask.selected().size(); ++i) {
    std::copy(out_selected.row(i).begin(), out_selected.row(i).end(), out.row(mask.selected()[i]).begin());
  }
  for (std::size_t i = 0; i < mask.unselected().size(); ++i) {
    std::copy(out_unselected.row(i).begin(), out_unselected.row(i).end(), out.row(mask.unselected()[i]).begin());
  }
  return out;
}

namespace {

AllowMask position_mask(const std::vector<std::size_t>& query_pos, const std::vector<std::size_t>& key_pos) {
  AllowMask m(query_pos.size(), key_pos.size(), false);
  for (std::size_t i = 0; i < query_pos.size(); ++i)
    for (std::size_t j = 0; j < key_pos.size(); ++j) m.set(i, j, key_pos[j] <= query_pos[i]);
  return m;
}

TokenIds gather_targets(const TokenIds& targets, const std::vector<std::size_t>& pos) {
  TokenIds t(pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i) t[i] = targets[pos[i]];
  return t;
}

bool needs_attn_concat(const SelectiveCache& c, const AdapterContext& ctx, int l) {
  return !c.frozen_backbone || (ctx.active() && ctx.set->find(l, ProjTarget::kOutput));
}

bool needs_ffn_act(const SelectiveCache& c, const AdapterContext& ctx, int l) {
  return !c.frozen_backbone || (ctx.active() && ctx.set->find(l, ProjTarget::kFfnDown));
}

struct Group {
  Matrix x;
  std::vector<std::size_t> pos;
};

}  // namespace

SplitForwardResult forward_split(const Parameters& params, const TokenIds& tokens, const TokenIds& targets,
                                 const SelectionMask& mask, const AdapterContext& ctx, SplitOptions options) {
  validate_inputs(params.config, tokens, targets);
  if (mask.n() != tokens.size()) {
    throw std::invalid_argument("forward_split: mask n=" + std::to_string(mask.n()) + " vs sequence length " +
                                std::to_string(tokens.size()));
  }
  if (mask.selected().empty()) throw std::invalid_argument("forward_split: empty selection");
  if (options.frozen_backbone && !ctx.active()) {
    throw std::invalid_argument("forward_split: a frozen backbone needs adapters to train");
  }

  SplitForwardResult r;
  r.cache.mask = mask;
  r.cache.adapted = ctx.active();
  r.cache.frozen_backbone = options.frozen_backbone;
  TensorStash& stash = r.cache.stash;

  const int L = params.config.n_layers;
  const int heads = params.config.n_heads;
  Group sel{detail::embed(params, tokens, mask.selected()), mask.selected()};
  Group uns{detail::embed(params, tokens, mask.unselected()), mask.unselected()};
  // Keys are stored per group but attended in original position order, so the
  // softmax and value sums reduce in the same order as the full forward.
  const std::size_t n = tokens.size();
  std::vector<std::size_t> key_pos(n);
  for (std::size_t j = 0; j < n; ++j) key_pos[j] = j;
  const AllowMask sel_mask = position_mask(sel.pos, key_pos);
  const AllowMask uns_mask = position_mask(uns.pos, key_pos);

  std::vector<Matrix> sel_probs_last, uns_probs_last;
  for (int l = 0; l < L; ++l) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
    auto proj = [&](const Group& g, const Matrix& in, const Matrix& w, const Matrix& b, ProjTarget t, bool keep) {
      Matrix rank;
      Matrix y = detail::project(in, w, b, ctx, l, t, g.pos, &rank);
      if (keep && !rank.empty()) stash.put(CacheKind::kAdapterRank, l, static_cast<int>(t), std::move(rank));
      return y;
    };

    // Attention sub-block. The unselected group is the no-gradient region.
    auto n1s = detail::layer_norm(sel.x, lp.norm1_gain, lp.norm1_shift);
    auto n1u = detail::layer_norm(uns.x, lp.norm1_gain, lp.norm1_shift);
    stash.put(CacheKind::kNorm1Hat, l, n1s.hat);
    stash.put(CacheKind::kNorm1Rstd, l, n1s.rstd);
    Matrix qs = proj(sel, n1s.y, lp.wq, lp.bq, ProjTarget::kQuery, true);
    Matrix ks = proj(sel, n1s.y, lp.wk, lp.bk, ProjTarget::kKey, true);
    Matrix vs = proj(sel, n1s.y, lp.wv, lp.bv, ProjTarget::kValue, true);
    Matrix qu = proj(uns, n1u.y, lp.wq, lp.bq, ProjTarget::kQuery, false);
    Matrix ku = proj(uns, n1u.y, lp.wk, lp.bk, ProjTarget::kKey, false);
    Matrix vu = proj(uns, n1u.y, lp.wv, lp.bv, ProjTarget::kValue, false);
    const Matrix k_cat = reorganize(ks, ku, mask);
    const Matrix v_cat = reorganize(vs, vu, mask);

    auto att_s = detail::attention(qs, k_cat, v_cat, sel_mask, heads);
    auto att_u = detail::attention(qu, k_cat, v_cat, uns_mask, heads);
    stash.put(CacheKind::kQuery, l, std::move(qs));
    stash.put(CacheKind::kKey, l, std::move(ks));
    stash.put(CacheKind::kValue, l, std::move(vs));
    stash.put(CacheKind::kKeyFrozen, l, std::move(ku));
    stash.put(CacheKind::kValueFrozen, l, std::move(vu));
    for (int h = 0; h < heads; ++h) stash.put(CacheKind::kAttnProb, l, h, att_s.probs[static_cast<std::size_t>(h)]);

    Matrix os = proj(sel, att_s.concat, lp.wo, lp.bo, ProjTarget::kOutput, true);
    Matrix ou = proj(uns, att_u.concat, lp.wo, lp.bo, ProjTarget::kOutput, false);
    if (needs_attn_concat(r.cache, ctx, l)) stash.put(CacheKind::kAttnConcat, l, std::move(att_s.concat));
    Matrix x1s = add(sel.x, os);
    Matrix x1u = add(uns.x, ou);

    // Feed-forward sub-block.
    auto n2s = detail::layer_norm(x1s, lp.norm2_gain, lp.norm2_shift);
    auto n2u = detail::layer_norm(x1u, lp.norm2_gain, lp.norm2_shift);
    stash.put(CacheKind::kNorm2Hat, l, n2s.hat);
    stash.put(CacheKind::kNorm2Rstd, l, n2s.rstd);
    Matrix as = proj(sel, n2s.y, lp.w1, lp.b1, ProjTarget::kFfnUp, true);
    Matrix au = proj(uns, n2u.y, lp.w1, lp.b1, ProjTarget::kFfnUp, false);
    Matrix fs = gelu(as);
    Matrix fu = gelu(au);
    stash.put(CacheKind::kFfnPre, l, std::move(as));
    Matrix ms = proj(sel, fs, lp.w2, lp.b2, ProjTarget::kFfnDown, true);
    Matrix mu = proj(uns, fu, lp.w2, lp.b2, ProjTarget::kFfnDown, false);
    if (needs_ffn_act(r.cache, ctx, l)) stash.put(CacheKind::kFfnAct, l, std::move(fs));
    sel.x = add(x1s, ms);
    uns.x = add(x1u, mu);
    require_finite(sel.x, "forward_split");
    require_finite(uns.x, "forward_split");

    if (l == L - 1) {
      sel_probs_last = std::move(att_s.probs);
      uns_probs_last = std::move(att_u.probs);
    }
  }

  // Final attention back in original query order.
  for (int h = 0; h < heads; ++h) {
    Matrix a(n, n);
    auto scatter = [&](const Matrix& p, const std::vector<std::size_t>& qpos) {
      for (std::size_t i = 0; i < qpos.size(); ++i)
        for (std::size_t j = 0; j < key_pos.size(); ++j) a(qpos[i], key_pos[j]) = p(i, j);
    };
    scatter(sel_probs_last[static_cast<std::size_t>(h)], sel.pos);
    scatter(uns_probs_last[static_cast<std::size_t>(h)], uns.pos);
    r.final_attn.push_back(std::move(a));
  }

  auto nfs = detail::layer_norm(sel.x, params.final_gain, params.final_shift);
  auto nfu = detail::layer_norm(uns.x, params.final_gain, params.final_shift);
  Matrix logits_s = matmul(nfs.y, params.lm_head);
  Matrix logits_u = matmul(nfu.y, params.lm_head);
  const TokenIds tgt_s = gather_targets(targets, sel.pos);
  const TokenIds tgt_u = gather_targets(targets, uns.pos);
  auto ce_s = detail::cross_entropy_rows(logits_s, tgt_s);
  auto ce_u = detail::cross_entropy_rows(logits_u, tgt_u);
  stash.put(CacheKind::kFinalHat, -1, std::move(nfs.hat));
  stash.put(CacheKind::kFinalRstd, -1, std::move(nfs.rstd));
  stash.put(CacheKind::kProbs, -1, std::move(ce_s.probs));

  std::vector<double> row_loss(n, 0.0);
  for (std::size_t i = 0; i < sel.pos.size(); ++i) row_loss[sel.pos[i]] = ce_s.row_loss[i];
  for (std::size_t i = 0; i < uns.pos.size(); ++i) row_loss[uns.pos[i]] = ce_u.row_loss[i];
  r.target_count = detail::count_targets(targets);
  r.loss = detail::mean_loss(row_loss, r.target_count);
  r.logits = reorganize(logits_s, logits_u, mask);
  return r;
}

DitchedGradients backward_ditched(const Parameters& params, const SelectiveCache& cache, const TokenIds& tokens,
                                  const TokenIds& targets, const SelectionMask& mask, const AdapterContext& ctx) {
  validate_inputs(params.config, tokens, targets);
  if (!(cache.mask == mask)) throw std::invalid_argument("backward_ditched: mask does not match the cache");
  if (mask.n() != tokens.size()) throw std::invalid_argument("backward_ditched: mask length mismatch");
  if (cache.adapted != ctx.active()) {
    throw std::invalid_argument("backward_ditched: adapter context differs from the one used in forward");
  }
  const TensorStash& stash = cache.stash;
  const bool frozen = cache.frozen_backbone;
  const int L = params.config.n_layers;
  const int heads = params.config.n_heads;
  const auto& pos = mask.selected();
  const std::size_t k = pos.size();

  DitchedGradients out{Parameters::zeros(params.config), ctx.active() ? ctx.set->zeros_like() : AdapterSet{}};
  Gradients& g = out.backbone;
  AdapterGradients* ag = ctx.active() ? &out.adapters : nullptr;
  auto pg = [&](Matrix& dw, Matrix& db) {
    return detail::ProjectGrads{frozen ? nullptr : &dw, frozen ? nullptr : &db, ag};
  };
  auto rank_of = [&](int l, ProjTarget t) -> const Matrix* {
    return stash.contains(CacheKind::kAdapterRank, l, static_cast<int>(t))
               ? &stash.get(CacheKind::kAdapterRank, l, static_cast<int>(t))
               : nullptr;
  };
  const Matrix none;

  const TokenIds tgt_s = gather_targets(targets, pos);
  Matrix dlogits = detail::cross_entropy_backward(stash.get(CacheKind::kProbs, -1), tgt_s,
                                                  detail::count_targets(targets));
  const Matrix& hatf = stash.get(CacheKind::kFinalHat, -1);
  if (!frozen) g.lm_head += matmul_tn(detail::layer_norm_apply(hatf, params.final_gain, params.final_shift), dlogits);
  Matrix dx = detail::layer_norm_backward(matmul_nt(dlogits, params.lm_head), hatf,
                                          stash.get(CacheKind::kFinalRstd, -1), params.final_gain,
                                          frozen ? nullptr : &g.final_gain, frozen ? nullptr : &g.final_shift);

  for (int l = L - 1; l >= 0; --l) {
    const LayerParams& lp = params.layers[static_cast<std::size_t>(l)];
    LayerParams& gl = g.layers[static_cast<std::size_t>(l)];

    const Matrix& f = stash.contains(CacheKind::kFfnAct, l) ? stash.get(CacheKind::kFfnAct, l) : none;
    Matrix df = detail::project_backward(dx, f, lp.w2, ctx, l, ProjTarget::kFfnDown, pos,
                                         rank_of(l, ProjTarget::kFfnDown), pg(gl.w2, gl.b2));
    Matrix da = gelu_backward(stash.get(CacheKind::kFfnPre, l), df);
    const Matrix& hat2 = stash.get(CacheKind::kNorm2Hat, l);
    Matrix h2 = detail::layer_norm_apply(hat2, lp.norm2_gain, lp.norm2_shift);
    Matrix dh2 = detail::project_backward(da, h2, lp.w1, ctx, l, ProjTarget::kFfnUp, pos,
                                          rank_of(l, ProjTarget::kFfnUp), pg(gl.w1, gl.b1));
    Matrix dx1 = dx;
    dx1 += detail::layer_norm_backward(dh2, hat2, stash.get(CacheKind::kNorm2Rstd, l), lp.norm2_gain,
                                       frozen ? nullptr : &gl.norm2_gain, frozen ? nullptr : &gl.norm2_shift);

    const Matrix& concat = stash.contains(CacheKind::kAttnConcat, l) ? stash.get(CacheKind::kAttnConcat, l) : none;
    Matrix dconcat = detail::project_backward(dx1, concat, lp.wo, ctx, l, ProjTarget::kOutput, pos,
                                              rank_of(l, ProjTarget::kOutput), pg(gl.wo, gl.bo));
    std::vector<Matrix> probs;
    for (int h = 0; h < heads; ++h) probs.push_back(stash.get(CacheKind::kAttnProb, l, h));
    const Matrix& qs = stash.get(CacheKind::kQuery, l);
    const Matrix k_cat = reorganize(stash.get(CacheKind::kKey, l), stash.get(CacheKind::kKeyFrozen, l), mask);
    const Matrix v_cat = reorganize(stash.get(CacheKind::kValue, l), stash.get(CacheKind::kValueFrozen, l), mask);
    auto att = detail::attention_backward(dconcat, qs, k_cat, v_cat, probs, heads);
    // Only the selected keys/values carry gradient.
    const Matrix dks = gather_rows(att.dk, pos);
    const Matrix dvs = gather_rows(att.dv, pos);

    const Matrix& hat1 = stash.get(CacheKind::kNorm1Hat, l);
    Matrix h1 = detail::layer_norm_apply(hat1, lp.norm1_gain, lp.norm1_shift);
    Matrix dh1 = detail::project_backward(att.dq, h1, lp.wq, ctx, l, ProjTarget::kQuery, pos,
                                          rank_of(l, ProjTarget::kQuery), pg(gl.wq, gl.bq));
    dh1 += detail::project_backward(dks, h1, lp.wk, ctx, l, ProjTarget::kKey, pos, rank_of(l, ProjTarget::kKey),
                                    pg(gl.wk, gl.bk));
    dh1 += detail::project_backward(dvs, h1, lp.wv, ctx, l, ProjTarget::kValue, pos, rank_of(l, ProjTarget::kValue),
                                    pg(gl.wv, gl.bv));
    dx = dx1;
    dx += detail::layer_norm_backward(dh1, hat1, stash.get(CacheKind::kNorm1Rstd, l), lp.norm1_gain,
                                      frozen ? nullptr : &gl.norm1_gain, frozen ? nullptr : &gl.norm1_shift);
  }

  if (!frozen) {
    for (std::size_t i = 0; i < k; ++i) {
      auto te = g.token_embedding.row(static_cast<std::size_t>(tokens[pos[i]]));
      auto pe = g.position_embedding.row(pos[i]);
      for (std::size_t j = 0; j < dx.cols(); ++j) {
        te[j] += dx(i, j);
        pe[j] += dx(i, j);
      }
    }
  }
  return out;
}

Gradients backward_ditched(const Parameters& params, const SelectiveCache& cache, const TokenIds& tokens,
                           const TokenIds& targets, const SelectionMask& mask) {
  if (cache.adapted) throw std::invalid_argument("backward_ditched: cache was built with adapters");
  return backward_ditched(params, cache, tokens, targets, mask, AdapterContext{}).backbone;
}

}  // namespace tokenseek
