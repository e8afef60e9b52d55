// SPDX-License-Identifier: Apache-2.0

#include "blocks.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace tokenseek::detail {

NormOut layer_norm(const Matrix& x, const Matrix& gain, const Matrix& shift) {
  const std::size_t h = x.cols();
  NormOut out{Matrix(x.rows(), h), Matrix(x.rows(), h), Matrix(x.rows(), 1)};
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto xi = x.row(i);
    double mean = 0.0;
    for (double v : xi) mean += v;
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (double v : xi) var += (v - mean) * (v - mean);
    var /= static_cast<double>(h);
    const double rstd = 1.0 / std::sqrt(var + kNormEps);
    out.rstd(i, 0) = rstd;
    for (std::size_t j = 0; j < h; ++j) {
      const double hat = (xi[j] - mean) * rstd;
      out.hat(i, j) = hat;
      out.y(i, j) = hat * gain(0, j) + shift(0, j);
    }
  }
  return out;
}

Matrix layer_norm_apply(const Matrix& hat, const Matrix& gain, const Matrix& shift) {
  Matrix y(hat.rows(), hat.cols());
  for (std::size_t i = 0; i < hat.rows(); ++i)
    for (std::size_t j = 0; j < hat.cols(); ++j) y(i, j) = hat(i, j) * gain(0, j) + shift(0, j);
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& hat, const Matrix& rstd, const Matrix& gain,
                           Matrix* dgain, Matrix* dshift) {
  const std::size_t h = hat.cols();
  Matrix dx(hat.rows(), h);
  for (std::size_t i = 0; i < hat.rows(); ++i) {
    double mean_dhat = 0.0;
    double mean_dhat_hat = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double dhat = dy(i, j) * gain(0, j);
      mean_dhat += dhat;
      mean_dhat_hat += dhat * hat(i, j);
    }
    mean_dhat /= static_cast<double>(h);
    mean_dhat_hat /= static_cast<double>(h);
    for (std::size_t j = 0; j < h; ++j) {
      const double dhat = dy(i, j) * gain(0, j);
      dx(i, j) = rstd(i, 0) * (dhat - mean_dhat - hat(i, j) * mean_dhat_hat);
    }
  }
  if (dgain) {
    for (std::size_t i = 0; i < hat.rows(); ++i)
      for (std::size_t j = 0; j < h; ++j) (*dgain)(0, j) += dy(i, j) * hat(i, j);
  }
  if (dshift) *dshift += column_sums(dy);
  return dx;
}

Matrix embed(const Parameters& params, const TokenIds& tokens, std::span<const std::size_t> positions) {
  const std::size_t h = static_cast<std::size_t>(params.config.hidden);
  Matrix x(positions.size(), h);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const std::size_t pos = positions[i];
    const auto tok = static_cast<std::size_t>(tokens[pos]);
    for (std::size_t j = 0; j < h; ++j) x(i, j) = params.token_embedding(tok, j) + params.position_embedding(pos, j);
  }
  return x;
}

namespace {

Matrix dropped_input(const Matrix& x, const AdapterContext& ctx, int layer, ProjTarget target,
                     std::span<const std::size_t> positions) {
  if (!ctx.dropout_on()) return x;
  Matrix d = x;
  for (std::size_t i = 0; i < d.rows(); ++i)
    for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) *= dropout_multiplier(ctx, layer, target, positions[i], j);
  return d;
}

}  // namespace

Matrix project(const Matrix& x, const Matrix& w, const Matrix& b, const AdapterContext& ctx, int layer,
               ProjTarget target, std::span<const std::size_t> positions, Matrix* rank_out) {
  Matrix y = add_row_broadcast(matmul(x, w), b);
  const LoraAdapter* ad = ctx.active() ? ctx.set->find(layer, target) : nullptr;
  if (!ad) return y;
  Matrix u = matmul(dropped_input(x, ctx, layer, target, positions), ad->down);
  Matrix delta = matmul(u, ad->up);
  delta *= ctx.set->config().scale();
  y += delta;
  if (rank_out) *rank_out = std::move(u);
  return y;
}

Matrix project_backward(const Matrix& dy, const Matrix& x, const Matrix& w, const AdapterContext& ctx, int layer,
                        ProjTarget target, std::span<const std::size_t> positions, const Matrix* rank,
                        const ProjectGrads& grads) {
  if (grads.dw) *grads.dw += matmul_tn(x, dy);
  if (grads.db) *grads.db += column_sums(dy);
  Matrix dx = matmul_nt(dy, w);
  const LoraAdapter* ad = ctx.active() ? ctx.set->find(layer, target) : nullptr;
  if (!ad) return dx;
  if (!rank) throw std::logic_error("project_backward: adapter intermediate missing");
  const double s = ctx.set->config().scale();
  if (grads.adapter) {
    LoraAdapter* g = grads.adapter->find(layer, target);
    Matrix dup = matmul_tn(*rank, dy);
    dup *= s;
    g->up += dup;
  }
  Matrix du = matmul_nt(dy, ad->up);
  du *= s;
  if (grads.adapter) {
    grads.adapter->find(layer, target)->down += matmul_tn(dropped_input(x, ctx, layer, target, positions), du);
  }
  // Dropout is linear in x, so the mask applies to the returned gradient too.
  Matrix dxa = dropped_input(matmul_nt(du, ad->down), ctx, layer, target, positions);
  dx += dxa;
  return dx;
}

AttentionOut attention(const Matrix& q, const Matrix& k, const Matrix& v, const AllowMask& allowed, int n_heads) {
  const std::size_t dk = q.cols() / static_cast<std::size_t>(n_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  AttentionOut out{Matrix(q.rows(), q.cols()), {}};
  out.probs.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dk;
    const Matrix qh = slice_cols(q, off, dk);
    const Matrix kh = slice_cols(k, off, dk);
    const Matrix vh = slice_cols(v, off, dk);
    Matrix scores = matmul_nt(qh, kh);
    scores *= scale;
    Matrix p = row_softmax_masked(scores, allowed);
    write_cols(out.concat, matmul(p, vh), off);
    out.probs.push_back(std::move(p));
  }
  return out;
}

AttentionGrads attention_backward(const Matrix& dconcat, const Matrix& q, const Matrix& k, const Matrix& v,
                                  const std::vector<Matrix>& probs, int n_heads) {
  const std::size_t dk = q.cols() / static_cast<std::size_t>(n_heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  AttentionGrads g{Matrix(q.rows(), q.cols()), Matrix(k.rows(), k.cols()), Matrix(v.rows(), v.cols())};
  for (int h = 0; h < n_heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dk;
    const Matrix& p = probs[static_cast<std::size_t>(h)];
    const Matrix doh = slice_cols(dconcat, off, dk);
    const Matrix qh = slice_cols(q, off, dk);
    const Matrix kh = slice_cols(k, off, dk);
    const Matrix vh = slice_cols(v, off, dk);
    Matrix dscores = row_softmax_backward(p, matmul_nt(doh, vh));
    dscores *= scale;
    write_cols(g.dq, matmul(dscores, kh), off);
    write_cols(g.dk, matmul_tn(dscores, qh), off);
    write_cols(g.dv, matmul_tn(p, doh), off);
  }
  return g;
}

CrossEntropyOut cross_entropy_rows(const Matrix& logits, std::span<const int> targets) {
  CrossEntropyOut out{std::vector<double>(logits.rows(), 0.0), Matrix(logits.rows(), logits.cols())};
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto li = logits.row(i);
    double mx = li[0];
    for (double v : li) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t j = 0; j < li.size(); ++j) {
      const double e = std::exp(li[j] - mx);
      out.probs(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < li.size(); ++j) out.probs(i, j) /= sum;
    if (targets[i] != kNoTarget) {
      out.row_loss[i] = mx + std::log(sum) - li[static_cast<std::size_t>(targets[i])];
    }
  }
  return out;
}

Matrix cross_entropy_backward(const Matrix& probs, std::span<const int> targets, std::size_t count) {
  Matrix d(probs.rows(), probs.cols());
  if (count == 0) return d;
  const double inv = 1.0 / static_cast<double>(count);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    if (targets[i] == kNoTarget) continue;
    for (std::size_t j = 0; j < probs.cols(); ++j) d(i, j) = probs(i, j) * inv;
    d(i, static_cast<std::size_t>(targets[i])) -= inv;
  }
  return d;
}

std::size_t count_targets(const TokenIds& targets) {
  std::size_t c = 0;
  for (int t : targets)
    if (t != kNoTarget) ++c;
  return c;
}

double mean_loss(const std::vector<double>& row_loss, std::size_t count) {
  if (count == 0) return 0.0;
  double s = 0.0;
  for (double v : row_loss) s += v;
  return s / static_cast<double>(count);
}

}  // namespace tokenseek::detail
