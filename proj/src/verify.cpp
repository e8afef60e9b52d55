// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/verify.hpp"

#include "tokenseek/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

namespace tokenseek::verify {

double relative_error(double a, double b, double floor) {
  if (a == b) return 0.0;
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

namespace {

void note(CheckStats& s, double analytic, double numeric, const std::string& name, std::size_t idx) {
  const double rel = relative_error(analytic, numeric);
  s.max_abs_err = std::max(s.max_abs_err, std::abs(analytic - numeric));
  if (rel > s.max_rel_err || s.checked == 0) {
    if (rel >= s.max_rel_err) s.worst = name + "[" + std::to_string(idx) + "]";
    s.max_rel_err = std::max(s.max_rel_err, rel);
  }
  ++s.checked;
}

template <class Set, class Tensors>
CheckStats fd_generic(Set work, Tensors tensors_of, const Set& analytic_set,
                      const std::function<double(const Set&)>& loss, double step) {
  CheckStats s;
  auto work_tensors = tensors_of(work);
  auto analytic = tensors_of(const_cast<Set&>(analytic_set));
  for (std::size_t t = 0; t < work_tensors.size(); ++t) {
    Matrix& m = *work_tensors[t].second;
    const Matrix& g = *analytic[t].second;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double orig = m.data()[i];
      m.data()[i] = orig + step;
      const double up = loss(work);
      m.data()[i] = orig - step;
      const double down = loss(work);
      m.data()[i] = orig;
      note(s, g.data()[i], (up - down) / (2.0 * step), work_tensors[t].first, i);
    }
  }
  return s;
}

std::vector<std::pair<std::string, Matrix*>> adapter_tensors(AdapterSet& a) {
  std::vector<std::pair<std::string, Matrix*>> out;
  for (auto& ad : a.adapters()) {
    const std::string pre = "adapter." + std::to_string(ad.layer) + "." + std::string(target_name(ad.target));
    out.emplace_back(pre + ".down", &ad.down);
    out.emplace_back(pre + ".up", &ad.up);
  }
  return out;
}

}  // namespace

CheckStats finite_difference_check(const Parameters& params, const Gradients& analytic,
                                   const std::function<double(const Parameters&)>& loss, double step) {
  return fd_generic<Parameters>(params, [](Parameters& p) { return p.named_tensors(); }, analytic, loss, step);
}

CheckStats finite_difference_check(const AdapterSet& adapters, const AdapterGradients& analytic,
                                   const std::function<double(const AdapterSet&)>& loss, double step) {
  return fd_generic<AdapterSet>(adapters, adapter_tensors, analytic, loss, step);
}

CheckStats compare(const Parameters& a, const Parameters& b) {
  CheckStats s;
  auto ta = a.named_tensors();
  auto tb = b.named_tensors();
  if (ta.size() != tb.size()) throw std::invalid_argument("compare: parameter layouts differ");
  for (std::size_t t = 0; t < ta.size(); ++t)
    for (std::size_t i = 0; i < ta[t].second->size(); ++i)
      note(s, ta[t].second->data()[i], tb[t].second->data()[i], ta[t].first, i);
  return s;
}

CheckStats compare(const AdapterSet& a, const AdapterSet& b) {
  CheckStats s;
  auto ta = adapter_tensors(const_cast<AdapterSet&>(a));
  auto tb = adapter_tensors(const_cast<AdapterSet&>(b));
  if (ta.size() != tb.size()) throw std::invalid_argument("compare: adapter layouts differ");
  for (std::size_t t = 0; t < ta.size(); ++t)
    for (std::size_t i = 0; i < ta[t].second->size(); ++i)
      note(s, ta[t].second->data()[i], tb[t].second->data()[i], ta[t].first, i);
  return s;
}

namespace {

// ---- reference transformer, original token order, everything retained ----

struct Norm {
  Matrix hat, rstd, y;
};

Norm norm_fwd(const Matrix& x, const Matrix& gain, const Matrix& shift) {
  Norm n{Matrix(x.rows(), x.cols()), Matrix(x.rows(), 1), Matrix(x.rows(), x.cols())};
  const double H = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) mu += x(i, j);
    mu /= H;
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= H;
    n.rstd(i, 0) = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t j = 0; j < x.cols(); ++j) {
      n.hat(i, j) = (x(i, j) - mu) * n.rstd(i, 0);
      n.y(i, j) = n.hat(i, j) * gain(0, j) + shift(0, j);
    }
  }
  return n;
}

Matrix norm_bwd(const Matrix& dy, const Norm& n, const Matrix& gain, Matrix& dgain, Matrix& dshift) {
  const std::size_t H = dy.cols();
  Matrix dx(dy.rows(), H);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    std::vector<double> dhat(H);
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < H; ++j) {
      dhat[j] = dy(i, j) * gain(0, j);
      a += dhat[j];
      b += dhat[j] * n.hat(i, j);
      dgain(0, j) += dy(i, j) * n.hat(i, j);
      dshift(0, j) += dy(i, j);
    }
    for (std::size_t j = 0; j < H; ++j)
      dx(i, j) = n.rstd(i, 0) * (dhat[j] - a / static_cast<double>(H) - n.hat(i, j) * b / static_cast<double>(H));
  }
  return dx;
}

struct Proj {
  Matrix y;
  Matrix u;  // adapter rank intermediate, empty without adapter
};

Proj linear_fwd(const Matrix& x, const Matrix& w, const Matrix& b, const AdapterSet* ad, int layer, ProjTarget t) {
  Proj p{Matrix(x.rows(), w.cols()), {}};
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double s = b(0, j);
      for (std::size_t k = 0; k < x.cols(); ++k) s += x(i, k) * w(k, j);
      p.y(i, j) = s;
    }
  const LoraAdapter* a = ad ? ad->find(layer, t) : nullptr;
  if (a) {
    p.u = matmul(x, a->down);
    Matrix delta = matmul(p.u, a->up);
    delta *= ad->config().scale();
    p.y += delta;
  }
  return p;
}

// Returns dx; accumulates dW, db and adapter grads.
Matrix linear_bwd(const Matrix& dy, const Matrix& x, const Matrix& w, const Proj& fwd, const AdapterSet* ad,
                  AdapterSet* adg, int layer, ProjTarget t, Matrix& dw, Matrix& db) {
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < dy.cols(); ++j) {
      db(0, j) += dy(i, j);
      for (std::size_t k = 0; k < x.cols(); ++k) dw(k, j) += x(i, k) * dy(i, j);
    }
  Matrix dx = matmul(dy, transpose(w));
  const LoraAdapter* a = ad ? ad->find(layer, t) : nullptr;
  if (a) {
    const double s = ad->config().scale();
    LoraAdapter* g = adg->find(layer, t);
    Matrix dup = matmul(transpose(fwd.u), dy);
    dup *= s;
    g->up += dup;
    Matrix du = matmul(dy, transpose(a->up));
    du *= s;
    g->down += matmul(transpose(x), du);
    dx += matmul(du, transpose(a->down));
  }
  return dx;
}

struct LayerTrace {
  Matrix x_in;
  Norm n1;
  Proj q, k, v;
  std::vector<Matrix> probs;
  Matrix concat;
  Proj o;
  Matrix x1;
  Norm n2;
  Proj a;
  Matrix f;
  Proj m;
};

struct Trace {
  std::vector<LayerTrace> layers;
  Norm nf;
  Matrix probs;
  std::vector<double> row_loss;
};

struct Pins {
  const std::vector<Matrix>* x_in = nullptr;
  const std::vector<Matrix>* k = nullptr;
  const std::vector<Matrix>* v = nullptr;
  const std::vector<bool>* selected = nullptr;
};

void pin_rows(Matrix& m, const Matrix& from, const std::vector<bool>& selected) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    if (!selected[i])
      for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = from(i, j);
}

Trace run(const Parameters& P, const AdapterSet* ad, const TokenIds& tokens, const TokenIds& targets,
          const Pins& pins) {
  validate_inputs(P.config, tokens, targets);
  const std::size_t n = tokens.size();
  const std::size_t H = static_cast<std::size_t>(P.config.hidden);
  const int heads = P.config.n_heads;
  const std::size_t dk = H / static_cast<std::size_t>(heads);
  Trace tr;
  Matrix x(n, H);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < H; ++j)
      x(i, j) = P.token_embedding(static_cast<std::size_t>(tokens[i]), j) + P.position_embedding(i, j);

  for (int l = 0; l < P.config.n_layers; ++l) {
    const LayerParams& lp = P.layers[static_cast<std::size_t>(l)];
    LayerTrace L;
    if (pins.x_in) pin_rows(x, (*pins.x_in)[static_cast<std::size_t>(l)], *pins.selected);
    L.x_in = x;
    L.n1 = norm_fwd(x, lp.norm1_gain, lp.norm1_shift);
    L.q = linear_fwd(L.n1.y, lp.wq, lp.bq, ad, l, ProjTarget::kQuery);
    L.k = linear_fwd(L.n1.y, lp.wk, lp.bk, ad, l, ProjTarget::kKey);
    L.v = linear_fwd(L.n1.y, lp.wv, lp.bv, ad, l, ProjTarget::kValue);
    if (pins.k) {
      pin_rows(L.k.y, (*pins.k)[static_cast<std::size_t>(l)], *pins.selected);
      pin_rows(L.v.y, (*pins.v)[static_cast<std::size_t>(l)], *pins.selected);
    }
    L.concat = Matrix(n, H);
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * dk;
      Matrix p(n, n);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(i + 1);
        double mx = -INFINITY;
        for (std::size_t j = 0; j <= i; ++j) {
          double d = 0.0;
          for (std::size_t c = 0; c < dk; ++c) d += L.q.y(i, off + c) * L.k.y(j, off + c);
          s[j] = d / std::sqrt(static_cast<double>(dk));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) z += std::exp(s[j] - mx);
        for (std::size_t j = 0; j <= i; ++j) p(i, j) = std::exp(s[j] - mx) / z;
        for (std::size_t c = 0; c < dk; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= i; ++j) acc += p(i, j) * L.v.y(j, off + c);
          L.concat(i, off + c) = acc;
        }
      }
      L.probs.push_back(std::move(p));
    }
    L.o = linear_fwd(L.concat, lp.wo, lp.bo, ad, l, ProjTarget::kOutput);
    L.x1 = add(x, L.o.y);
    L.n2 = norm_fwd(L.x1, lp.norm2_gain, lp.norm2_shift);
    L.a = linear_fwd(L.n2.y, lp.w1, lp.b1, ad, l, ProjTarget::kFfnUp);
    L.f = Matrix(n, L.a.y.cols());
    for (std::size_t i = 0; i < L.f.size(); ++i) L.f.data()[i] = gelu(L.a.y.data()[i]);
    L.m = linear_fwd(L.f, lp.w2, lp.b2, ad, l, ProjTarget::kFfnDown);
    x = add(L.x1, L.m.y);
    tr.layers.push_back(std::move(L));
  }
  tr.nf = norm_fwd(x, P.final_gain, P.final_shift);
  const Matrix logits = matmul(tr.nf.y, P.lm_head);
  tr.probs = Matrix(n, logits.cols());
  tr.row_loss.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) z += std::exp(logits(i, j) - mx);
    for (std::size_t j = 0; j < logits.cols(); ++j) tr.probs(i, j) = std::exp(logits(i, j) - mx) / z;
    if (targets[i] != kNoTarget) tr.row_loss[i] = std::log(z) + mx - logits(i, static_cast<std::size_t>(targets[i]));
  }
  return tr;
}

std::size_t target_count(const TokenIds& targets) {
  return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](int t) { return t != kNoTarget; }));
}

double mean_of(const std::vector<double>& row_loss, std::size_t count) {
  if (count == 0) return 0.0;
  double s = 0.0;
  for (double v : row_loss) s += v;
  return s / static_cast<double>(count);
}

std::vector<bool> selected_flags(const SelectionMask& mask) {
  std::vector<bool> f(mask.n(), false);
  for (std::size_t i : mask.selected()) f[i] = true;
  return f;
}

void zero_unselected(Matrix& m, const std::vector<bool>& selected) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    if (!selected[i])
      for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = 0.0;
}

}  // namespace

double reference_loss(const Parameters& params, const AdapterSet* adapters, const TokenIds& tokens,
                      const TokenIds& targets) {
  const Trace tr = run(params, adapters, tokens, targets, {});
  return mean_of(tr.row_loss, target_count(targets));
}

FrozenDitchedLoss::FrozenDitchedLoss(const Parameters& base, const AdapterSet* base_adapters, TokenIds tokens,
                                     TokenIds targets, SelectionMask mask)
    : tokens_(std::move(tokens)), targets_(std::move(targets)), mask_(std::move(mask)) {
  if (base_adapters && base_adapters->config().dropout > 0.0) {
    throw std::invalid_argument("FrozenDitchedLoss: dropout must be disabled");
  }
  const Trace tr = run(base, base_adapters, tokens_, targets_, {});
  for (const auto& L : tr.layers) {
    pinned_.x_in.push_back(L.x_in);
    pinned_.k.push_back(L.k.y);
    pinned_.v.push_back(L.v.y);
  }
  pinned_.row_loss = tr.row_loss;
}

double FrozenDitchedLoss::operator()(const Parameters& params, const AdapterSet* adapters) const {
  const std::vector<bool> sel = selected_flags(mask_);
  Pins pins{&pinned_.x_in, &pinned_.k, &pinned_.v, &sel};
  Trace tr = run(params, adapters, tokens_, targets_, pins);
  for (std::size_t i = 0; i < sel.size(); ++i)
    if (!sel[i]) tr.row_loss[i] = pinned_.row_loss[i];
  return mean_of(tr.row_loss, target_count(targets_));
}

OracleGradients stopgrad_gradients(const Parameters& P, const AdapterSet* ad, const TokenIds& tokens,
                                   const TokenIds& targets, const SelectionMask& mask) {
  if (ad && ad->config().dropout > 0.0) throw std::invalid_argument("stopgrad_gradients: dropout must be disabled");
  if (mask.n() != tokens.size()) throw std::invalid_argument("stopgrad_gradients: mask length mismatch");
  const Trace tr = run(P, ad, tokens, targets, {});
  const std::vector<bool> sel = selected_flags(mask);
  const std::size_t n = tokens.size();
  const std::size_t H = static_cast<std::size_t>(P.config.hidden);
  const int heads = P.config.n_heads;
  const std::size_t dk = H / static_cast<std::size_t>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  OracleGradients out{Parameters::zeros(P.config), ad ? ad->zeros_like() : AdapterSet{}};
  Gradients& G = out.backbone;
  AdapterSet* adg = ad ? &out.adapters : nullptr;

  const std::size_t count = target_count(targets);
  Matrix dlogits(n, tr.probs.cols());
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == kNoTarget || count == 0) continue;
    for (std::size_t j = 0; j < dlogits.cols(); ++j) dlogits(i, j) = tr.probs(i, j) / static_cast<double>(count);
    dlogits(i, static_cast<std::size_t>(targets[i])) -= 1.0 / static_cast<double>(count);
  }
  zero_unselected(dlogits, sel);
  G.lm_head += matmul(transpose(tr.nf.y), dlogits);
  Matrix dx = norm_bwd(matmul(dlogits, transpose(P.lm_head)), tr.nf, P.final_gain, G.final_gain, G.final_shift);

  for (int l = P.config.n_layers - 1; l >= 0; --l) {
    const LayerParams& lp = P.layers[static_cast<std::size_t>(l)];
    LayerParams& gl = G.layers[static_cast<std::size_t>(l)];
    const LayerTrace& L = tr.layers[static_cast<std::size_t>(l)];
    zero_unselected(dx, sel);

    Matrix df = linear_bwd(dx, L.f, lp.w2, L.m, ad, adg, l, ProjTarget::kFfnDown, gl.w2, gl.b2);
    Matrix da(df.rows(), df.cols());
    for (std::size_t i = 0; i < da.size(); ++i) da.data()[i] = df.data()[i] * gelu_derivative(L.a.y.data()[i]);
    Matrix dh2 = linear_bwd(da, L.n2.y, lp.w1, L.a, ad, adg, l, ProjTarget::kFfnUp, gl.w1, gl.b1);
    Matrix dx1 = add(dx, norm_bwd(dh2, L.n2, lp.norm2_gain, gl.norm2_gain, gl.norm2_shift));

    Matrix dconcat = linear_bwd(dx1, L.concat, lp.wo, L.o, ad, adg, l, ProjTarget::kOutput, gl.wo, gl.bo);
    Matrix dq(n, H), dkey(n, H), dval(n, H);
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * dk;
      const Matrix& p = L.probs[static_cast<std::size_t>(h)];
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> dp(n, 0.0);
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          for (std::size_t c = 0; c < dk; ++c) dp[j] += dconcat(i, off + c) * L.v.y(j, off + c);
          dot += dp[j] * p(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = p(i, j) * (dp[j] - dot) * scale;
          for (std::size_t c = 0; c < dk; ++c) {
            dq(i, off + c) += ds * L.k.y(j, off + c);
            dkey(j, off + c) += ds * L.q.y(i, off + c);
            dval(j, off + c) += p(i, j) * dconcat(i, off + c);
          }
        }
      }
    }
    zero_unselected(dq, sel);
    zero_unselected(dkey, sel);
    zero_unselected(dval, sel);
    Matrix dh1 = linear_bwd(dq, L.n1.y, lp.wq, L.q, ad, adg, l, ProjTarget::kQuery, gl.wq, gl.bq);
    dh1 += linear_bwd(dkey, L.n1.y, lp.wk, L.k, ad, adg, l, ProjTarget::kKey, gl.wk, gl.bk);
    dh1 += linear_bwd(dval, L.n1.y, lp.wv, L.v, ad, adg, l, ProjTarget::kValue, gl.wv, gl.bv);
    dx = add(dx1, norm_bwd(dh1, L.n1, lp.norm1_gain, gl.norm1_gain, gl.norm1_shift));
    zero_unselected(dx, sel);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < H; ++j) {
      G.token_embedding(static_cast<std::size_t>(tokens[i]), j) += dx(i, j);
      G.position_embedding(i, j) += dx(i, j);
    }
  return out;
}

bool SuiteResult::pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const SuiteCheck& c) { return c.pass(); });
}

ModelConfig gradcheck_config(const std::string& size) {
  ModelConfig c;
  if (size == "tiny") {
    c.n_layers = 1;
    c.hidden = 8;
    c.n_heads = 2;
    c.ff_dim = 16;
    c.vocab = 13;
    c.max_seq = 8;
  } else if (size == "small") {
    c.n_layers = 2;
    c.hidden = 16;
    c.n_heads = 4;
    c.ff_dim = 32;
    c.vocab = 29;
    c.max_seq = 16;
  } else {
    throw std::invalid_argument("unknown gradcheck size '" + size + "' (expected tiny or small)");
  }
  return c;
}

namespace {

// Weights away from init so every parameter, including gains and biases,
// carries a non-trivial gradient.
void perturb(std::vector<Matrix*> tensors, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 0.1);
  for (Matrix* m : tensors)
    for (double& v : m->data()) v += dist(rng);
}

std::vector<Matrix*> all_tensors(Parameters& p) {
  std::vector<Matrix*> out;
  for (auto& [name, m] : p.named_tensors()) out.push_back(m);
  return out;
}

std::vector<Matrix*> all_tensors(AdapterSet& a) {
  std::vector<Matrix*> out;
  for (auto& ad : a.adapters()) {
    out.push_back(&ad.down);
    out.push_back(&ad.up);
  }
  return out;
}

TokenIds random_sequence(std::mt19937_64& rng, std::size_t n, int vocab) {
  std::uniform_int_distribution<int> dist(0, vocab - 1);
  TokenIds t(n);
  for (int& v : t) v = dist(rng);
  return t;
}

SelectionMask random_selection_mask(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> count(1, n);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count(rng));
  return SelectionMask::from_selected(n, idx);
}

void merge(CheckStats& into, const CheckStats& s) {
  if (s.max_rel_err > into.max_rel_err || into.checked == 0) {
    into.max_rel_err = std::max(into.max_rel_err, s.max_rel_err);
    into.worst = s.worst;
  }
  into.max_abs_err = std::max(into.max_abs_err, s.max_abs_err);
  into.checked += s.checked;
}

}  // namespace

SuiteResult gradcheck_suite(const ModelConfig& config, std::uint64_t seed, std::size_t oracle_masks,
                            double fd_tolerance, double oracle_tolerance) {
  ModelConfig c = config;
  c.seed = seed;
  c.validate();
  std::mt19937_64 rng(seed);
  Parameters p = init_params(c, 0.3);
  perturb(all_tensors(p), rng);

  LoraConfig lc;
  lc.rank = 2;
  lc.alpha = 2.0;
  lc.dropout = 0.0;
  lc.seed = seed;
  lc.init_scale = 0.3;
  lc.targets = parse_targets("q,k,v,o,ff1,ff2");
  AdaptedParameters adapted = attach(p, lc);
  perturb(all_tensors(adapted.adapters), rng);

  const std::size_t n = static_cast<std::size_t>(c.max_seq) - 2;
  const TokenIds t = random_sequence(rng, n, c.vocab);
  const TokenIds tg = next_token_targets(t);
  const SelectionMask mask = random_selection_mask(rng, n);
  SuiteResult out;

  {
    const auto fwd = forward_full(p, t, tg);
    const Gradients g = backward_full(p, fwd.cache, t, tg);
    out.checks.push_back(
        {"fd_full", finite_difference_check(p, g, [&](const Parameters& q) { return forward_full(q, t, tg).loss; }),
         fd_tolerance});
  }
  {
    const auto fwd = forward_split(p, t, tg, mask);
    const Gradients g = backward_ditched(p, fwd.cache, t, tg, mask);
    const FrozenDitchedLoss loss(p, nullptr, t, tg, mask);
    out.checks.push_back(
        {"fd_ditched", finite_difference_check(p, g, [&](const Parameters& q) { return loss(q); }), fd_tolerance});
  }
  {
    const auto fwd = adapted_forward(adapted, t, tg, mask);
    const AdapterGradients g = adapted_backward(adapted, fwd.cache, t, tg);
    const FrozenDitchedLoss loss(adapted.backbone, &adapted.adapters, t, tg, mask);
    out.checks.push_back({"fd_adapted",
                          finite_difference_check(adapted.adapters, g,
                                                  [&](const AdapterSet& a) { return loss(adapted.backbone, &a); }),
                          fd_tolerance});
  }

  CheckStats backbone, adapters;
  for (std::size_t i = 0; i < oracle_masks; ++i) {
    const std::size_t len = 1 + rng() % static_cast<std::size_t>(c.max_seq);
    const TokenIds ts = random_sequence(rng, len, c.vocab);
    const TokenIds tgs = next_token_targets(ts);
    const SelectionMask m = random_selection_mask(rng, len);
    const auto fwd = forward_split(p, ts, tgs, m);
    merge(backbone, compare(backward_ditched(p, fwd.cache, ts, tgs, m), stopgrad_gradients(p, nullptr, ts, tgs, m).backbone));
    const auto afwd = adapted_forward(adapted, ts, tgs, m);
    merge(adapters, compare(adapted_backward(adapted, afwd.cache, ts, tgs),
                            stopgrad_gradients(adapted.backbone, &adapted.adapters, ts, tgs, m).adapters));
  }
  out.checks.push_back({"oracle_ditched", backbone, oracle_tolerance});
  out.checks.push_back({"oracle_adapted", adapters, oracle_tolerance});
  return out;
}

}  // namespace tokenseek::verify
