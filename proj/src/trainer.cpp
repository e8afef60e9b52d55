// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "tokenseek/adapters.hpp"
#include "tokenseek/ditcher.hpp"

namespace tokenseek {

std::string_view mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kFull: return "full";
    case TrainMode::kRandom: return "random";
    case TrainMode::kSeek: return "seek";
  }
  return "?";
}

TrainMode parse_mode(std::string_view name) {
  if (name == "full") return TrainMode::kFull;
  if (name == "random") return TrainMode::kRandom;
  if (name == "seek") return TrainMode::kSeek;
  throw std::invalid_argument("unknown mode '" + std::string(name) + "' (expected full, random or seek)");
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate(std::size_t total) const {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("ratio must lie in (0, 1]");
  if (accum_steps < 1) throw std::invalid_argument("accum_steps must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (lr_max < 0.0) throw std::invalid_argument("lr_max must be >= 0");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (warmup_steps >= total) {
    throw std::invalid_argument("warmup_steps (" + std::to_string(warmup_steps) + ") must be below the total step count (" +
                                std::to_string(total) + ")");
  }
}

std::string TrainConfig::describe() const {
  std::ostringstream os;
  os << "mode=" << mode_name(mode) << "\nratio=" << fmt(ratio) << "\nalpha=" << fmt(alpha) << "\nbeta=" << fmt(beta)
     << "\nlr_max=" << fmt(lr_max) << "\nwarmup_steps=" << warmup_steps << "\nweight_decay=" << fmt(weight_decay)
     << "\naccum_steps=" << accum_steps << "\nepochs=" << epochs << "\nseed=" << seed
     << "\nrescore_interval=" << rescore_interval << "\nmagnitude=" << (magnitude ? 1 : 0)
     << "\nresponse_only=" << (response_only ? 1 : 0) << "\nshuffle=" << (shuffle ? 1 : 0)
     << "\nadapter=" << (adapter ? 1 : 0);
  if (adapter) {
    os << "\nlora_rank=" << lora.rank << "\nlora_alpha=" << fmt(lora.alpha) << "\nlora_dropout=" << fmt(lora.dropout)
       << "\nlora_seed=" << lora.seed << "\nlora_targets=";
    for (std::size_t i = 0; i < lora.targets.size(); ++i) os << (i ? "," : "") << target_name(lora.targets[i]);
  }
  os << "\nadam_beta1=" << fmt(kAdamBeta1) << "\nadam_beta2=" << fmt(kAdamBeta2) << "\nadam_eps=" << fmt(kAdamEps)
     << '\n';
  return os.str();
}

std::size_t total_steps(std::size_t corpus_size, const TrainConfig& c) {
  if (c.accum_steps == 0) throw std::invalid_argument("accum_steps must be >= 1");
  return (corpus_size * c.epochs + c.accum_steps - 1) / c.accum_steps;
}

double cosine_lr(std::size_t step, std::size_t total, const TrainConfig& c) {
  if (step >= total) throw std::invalid_argument("cosine_lr: step beyond schedule");
  if (step < c.warmup_steps) return c.lr_max * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const double progress = static_cast<double>(step - c.warmup_steps) / static_cast<double>(total - c.warmup_steps);
  return c.lr_max * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adam_step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, AdamState& st, double lr,
               double wd) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
  if (st.m.empty()) {
    for (const Matrix* p : params) {
      st.m.emplace_back(p->rows(), p->cols());
      st.v.emplace_back(p->rows(), p->cols());
    }
  }
  if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  ++st.t;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    const Matrix& g = *grads[i];
    if (!p.same_shape(g) || !p.same_shape(st.m[i])) {
      throw std::invalid_argument("adam_step: shape mismatch at tensor " + std::to_string(i));
    }
    auto pd = p.data();
    auto gd = g.data();
    auto md = st.m[i].data();
    auto vd = st.v[i].data();
    for (std::size_t k = 0; k < pd.size(); ++k) {
      pd[k] -= lr * wd * pd[k];
      md[k] = kAdamBeta1 * md[k] + (1.0 - kAdamBeta1) * gd[k];
      vd[k] = kAdamBeta2 * vd[k] + (1.0 - kAdamBeta2) * gd[k] * gd[k];
      pd[k] -= lr * (md[k] / c1) / (std::sqrt(vd[k] / c2) + kAdamEps);
    }
  }
}

namespace {

std::vector<Matrix*> tensors_of(Parameters& p) {
  std::vector<Matrix*> out;
  for (auto& [name, m] : p.named_tensors()) out.push_back(m);
  return out;
}

std::vector<Matrix*> tensors_of(AdapterSet& a) {
  std::vector<Matrix*> out;
  for (auto& ad : a.adapters()) {
    out.push_back(&ad.down);
    out.push_back(&ad.up);
  }
  return out;
}

std::vector<const Matrix*> const_view(const std::vector<Matrix*>& v) { return {v.begin(), v.end()}; }

SelectionMask random_selection(std::size_t n, double ratio, std::uint64_t seed, std::size_t epoch, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index), 0x6d61736bU};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(selection_size(n, ratio));
  return SelectionMask::from_selected(n, std::move(idx));
}

std::vector<SelectionMask> seek_masks(const std::vector<EncodedInstance>& work, const ScoreSet& scores,
                                      const TrainConfig& c) {
  std::vector<SelectionMask> masks;
  std::vector<std::string> missing, mismatched;
  for (const auto& inst : work) {
    const TokenScores* s = scores.find(inst.id);
    if (!s) {
      missing.push_back(inst.id);
      masks.emplace_back();
      continue;
    }
    if (s->n() != inst.tokens.size()) {
      mismatched.push_back(inst.id + " (" + std::to_string(s->n()) + " scores, " + std::to_string(inst.tokens.size()) +
                           " tokens)");
      masks.emplace_back();
      continue;
    }
    masks.push_back(select_tokens(combine_scores(s->i1, s->i2, c.alpha, c.beta), c.ratio));
  }
  if (!missing.empty() || !mismatched.empty()) {
    std::string msg = "score file does not match the corpus:";
    auto list = [&](const char* what, const std::vector<std::string>& ids) {
      if (ids.empty()) return;
      msg += std::string(" ") + what + " [";
      for (std::size_t i = 0; i < ids.size() && i < 10; ++i) msg += (i ? ", " : "") + ids[i];
      if (ids.size() > 10) msg += ", ... " + std::to_string(ids.size() - 10) + " more";
      msg += "]";
    };
    list("missing", missing);
    list("length mismatch", mismatched);
    throw std::invalid_argument(msg);
  }
  return masks;
}

}  // namespace

TrainRun train(Parameters params, const EncodedCorpus& corpus, const ScoreSet* scores, const TrainConfig& c,
               std::optional<AdapterSet> adapters) {
  if (corpus.instances.empty()) throw std::invalid_argument("train: empty corpus");
  const std::size_t N = corpus.instances.size();
  const std::size_t total = total_steps(N, c);
  c.validate(total);
  if (c.mode == TrainMode::kSeek && !scores) {
    throw std::invalid_argument("mode=seek needs a score file (run the score command first)");
  }

  TrainRun run;
  run.config = c;
  const auto max_seq = static_cast<std::size_t>(params.config.max_seq);
  std::vector<EncodedInstance> work;
  for (const auto& inst : corpus.instances) {
    if (inst.tokens.size() > max_seq) run.warnings.push_back("instance " + inst.id + " truncated to max_seq");
    work.push_back(truncate_instance(inst, max_seq));
  }
  std::vector<TokenIds> targets;
  for (const auto& inst : work) targets.push_back(instance_targets(inst, c.response_only));

  if (c.adapter && !adapters) adapters = attach(params.config, c.lora);
  if (!c.adapter) adapters.reset();

  std::vector<SelectionMask> masks;
  if (c.mode == TrainMode::kSeek) masks = seek_masks(work, *scores, c);

  Gradients grad_sum = Parameters::zeros(params.config);
  AdapterSet adapter_sum = adapters ? adapters->zeros_like() : AdapterSet{};
  AdamState state;

  std::vector<std::size_t> order(N);
  std::size_t in_window = 0, step = 0;
  double window_loss = 0.0;
  std::size_t window_peak = 0;
  std::size_t peak_total = 0;
  double sum_total = 0.0, sum_full = 0.0, sum_analytic = 0.0;
  const double est_ratio = c.mode == TrainMode::kFull ? 1.0 : c.ratio;
  std::size_t seen = 0;

  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    if (c.shuffle) {
      std::seed_seq seq{static_cast<std::uint32_t>(c.seed), static_cast<std::uint32_t>(c.seed >> 32),
                        static_cast<std::uint32_t>(epoch), 0x73687566U};
      std::mt19937_64 rng(seq);
      std::shuffle(order.begin(), order.end(), rng);
    }
    for (std::size_t pos = 0; pos < N; ++pos) {
      const std::size_t idx = order[pos];
      const TokenIds& tokens = work[idx].tokens;
      const TokenIds& tg = targets[idx];
      const std::size_t n = tokens.size();
      const std::uint64_t stream = epoch * N + pos;

      double loss = 0.0;
      MemoryReport mem;
      if (adapters) {
        const SelectionMask mask = c.mode == TrainMode::kFull     ? SelectionMask::all(n)
                                   : c.mode == TrainMode::kRandom ? random_selection(n, c.ratio, c.seed, epoch, idx)
                                                                  : masks[idx];
        const AdapterContext ctx{&*adapters, true, stream};
        const auto fwd = forward_split(params, tokens, tg, mask, ctx, SplitOptions{true});
        const auto g = backward_ditched(params, fwd.cache, tokens, tg, mask, ctx);
        auto dst = tensors_of(adapter_sum);
        auto src = tensors_of(const_cast<AdapterSet&>(g.adapters));
        for (std::size_t t = 0; t < dst.size(); ++t) *dst[t] += *src[t];
        loss = fwd.loss;
        mem = count_cache(fwd.cache);
      } else if (c.mode == TrainMode::kFull) {
        const auto fwd = forward_full(params, tokens, tg);
        const Gradients g = backward_full(params, fwd.cache, tokens, tg);
        auto dst = tensors_of(grad_sum);
        auto src = tensors_of(const_cast<Gradients&>(g));
        for (std::size_t t = 0; t < dst.size(); ++t) *dst[t] += *src[t];
        loss = fwd.loss;
        mem = count_cache(fwd.cache);
      } else {
        const SelectionMask mask =
            c.mode == TrainMode::kRandom ? random_selection(n, c.ratio, c.seed, epoch, idx) : masks[idx];
        const auto fwd = forward_split(params, tokens, tg, mask);
        const Gradients g = backward_ditched(params, fwd.cache, tokens, tg, mask);
        auto dst = tensors_of(grad_sum);
        auto src = tensors_of(const_cast<Gradients&>(g));
        for (std::size_t t = 0; t < dst.size(); ++t) *dst[t] += *src[t];
        loss = fwd.loss;
        mem = count_cache(fwd.cache);
      }

      window_loss += loss;
      window_peak = std::max(window_peak, mem.total_scalars);
      if (mem.total_scalars > peak_total || seen == 0) {
        peak_total = mem.total_scalars;
        run.memory.scalars = mem.scalars;
      }
      sum_total += static_cast<double>(mem.total_scalars);
      sum_full += static_cast<double>(estimate_full(params.config, 1, n));
      const std::size_t analytic = adapters ? estimate_adapted(params.config, adapters->config(), 1, n, est_ratio)
                                   : c.mode == TrainMode::kFull ? estimate_full(params.config, 1, n)
                                                                : estimate_ditched(params.config, 1, n, est_ratio);
      run.analytic_peak_scalars = std::max(run.analytic_peak_scalars, analytic);
      sum_analytic += static_cast<double>(analytic);
      ++seen;
      ++in_window;

      const bool last = epoch + 1 == c.epochs && pos + 1 == N;
      if (in_window == c.accum_steps || last) {
        const double lr = cosine_lr(step, total, c);
        const double inv = 1.0 / static_cast<double>(c.accum_steps);
        if (adapters) {
          auto gs = tensors_of(adapter_sum);
          for (Matrix* m : gs) *m *= inv;
          adam_step(tensors_of(*adapters), const_view(gs), state, lr, c.weight_decay);
          for (Matrix* m : gs) m->fill(0.0);
        } else {
          auto gs = tensors_of(grad_sum);
          for (Matrix* m : gs) *m *= inv;
          adam_step(tensors_of(params), const_view(gs), state, lr, c.weight_decay);
          for (Matrix* m : gs) m->fill(0.0);
        }
        run.steps.push_back({step, lr, window_loss / static_cast<double>(in_window), window_peak});
        ++step;
        in_window = 0;
        window_loss = 0.0;
        window_peak = 0;

        if (c.mode == TrainMode::kSeek && c.rescore_interval > 0 && step % c.rescore_interval == 0 && !last) {
          ScoreSet fresh;
          for (std::size_t i = 0; i < N; ++i) {
            fresh.instances.push_back(
                score_instance(params, work[i].id, work[i].tokens, targets[i], c.alpha, c.beta, c.magnitude));
          }
          masks = seek_masks(work, fresh, c);
        }
      }
    }
  }

  run.memory.total_scalars = peak_total;
  run.memory.peak_scalars = peak_total;
  run.memory.average_scalars = sum_total / static_cast<double>(seen);
  run.average_full_scalars = sum_full / static_cast<double>(seen);
  run.memory.ratio_vs_full = run.memory.average_scalars / run.average_full_scalars;
  run.analytic_average_scalars = sum_analytic / static_cast<double>(seen);
  run.params = std::move(params);
  run.adapters = std::move(adapters);
  return run;
}

double eval_loss(const Parameters& params, const EncodedCorpus& corpus, const AdapterSet* adapters,
                 bool response_only) {
  if (corpus.instances.empty()) throw std::invalid_argument("eval_loss: empty evaluation split");
  const auto max_seq = static_cast<std::size_t>(params.config.max_seq);
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& raw : corpus.instances) {
    const EncodedInstance inst = truncate_instance(raw, max_seq);
    const TokenIds tg = instance_targets(inst, response_only);
    const auto r = forward_full(params, inst.tokens, tg, AdapterContext{adapters, false, 0});
    if (r.target_count == 0) continue;
    sum += r.loss;
    ++count;
  }
  if (count == 0) throw std::invalid_argument("eval_loss: no instance has a target");
  return sum / static_cast<double>(count);
}

std::string metrics_text(const TrainRun& run) {
  std::ostringstream os;
  os << "# tokenseek-metrics v1\n";
  std::istringstream cfg(run.config.describe());
  std::string line;
  while (std::getline(cfg, line)) os << "# " << line << '\n';
  for (const auto& w : run.warnings) os << "# warning: " << w << '\n';
  os << "step,lr,loss,cached_scalars\n";
  for (const auto& s : run.steps) os << s.step << ',' << fmt(s.lr) << ',' << fmt(s.loss) << ',' << s.cached_scalars << '\n';
  os << "# summary\n";
  os << "# steps=" << run.steps.size() << '\n';
  os << "# final_step_loss=" << (run.steps.empty() ? std::string("nan") : fmt(run.steps.back().loss)) << '\n';
  os << "# average_full_scalars=" << fmt(run.average_full_scalars) << '\n';
  os << "# analytic_peak_scalars=" << run.analytic_peak_scalars << '\n';
  os << "# analytic_average_scalars=" << fmt(run.analytic_average_scalars) << '\n';
  os << "# memory\n";
  std::istringstream mem(run.memory.to_lines());
  while (std::getline(mem, line)) os << line << '\n';
  return os.str();
}

void write_metrics(const std::filesystem::path& path, const TrainRun& run) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write metrics file " + path.string());
  os << metrics_text(run);
}

std::string StudyResult::rows_csv() const {
  std::ostringstream os;
  os << "mode,r,seed,final_eval_loss\n";
  for (const auto& r : rows) os << mode_name(r.mode) << ',' << short_fmt(r.ratio) << ',' << r.seed << ',' << fmt(r.final_eval_loss) << '\n';
  return os.str();
}

std::string StudyResult::aggregate_csv() const {
  std::ostringstream os;
  os << "mode,r,runs,mean,std,min,max,mean_train_loss,mean_memory_ratio\n";
  for (const auto& a : aggregates) {
    os << mode_name(a.mode) << ',' << short_fmt(a.ratio) << ',' << a.runs << ',' << fmt(a.mean) << ',' << fmt(a.std)
       << ',' << fmt(a.min) << ',' << fmt(a.max) << ',' << fmt(a.mean_train_loss) << ',' << fmt(a.mean_memory_ratio)
       << '\n';
  }
  return os.str();
}

std::string StudyResult::ratio_table() const {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-8s %8s %14s %14s %12s\n", "mode", "ratio", "memory_ratio", "mean_eval", "std_eval");
  os << buf;
  for (const auto& a : aggregates) {
    std::snprintf(buf, sizeof buf, "%-8s %8.2f %14.4f %14.6f %12.6f\n", std::string(mode_name(a.mode)).c_str(),
                  a.ratio, a.mean_memory_ratio, a.mean, a.std);
    os << buf;
  }
  return os.str();
}

const StudyAggregate* StudyResult::find(TrainMode mode, double ratio) const {
  for (const auto& a : aggregates)
    if (a.mode == mode && a.ratio == ratio) return &a;
  return nullptr;
}

StudyResult stability_study(const Parameters& base, const EncodedCorpus& train_corpus, const EncodedCorpus& eval_corpus,
                            const ScoreSet* scores, const TrainConfig& base_config, const std::vector<TrainMode>& modes,
                            const std::vector<double>& ratios, const std::vector<std::uint64_t>& seeds,
                            unsigned threads) {
  if (seeds.size() < 3) throw std::invalid_argument("stability_study: needs at least 3 seeds");
  struct Job {
    TrainMode mode;
    double ratio;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (TrainMode m : modes)
    for (double r : ratios)
      for (std::uint64_t s : seeds) jobs.push_back({m, r, s});

  StudyResult out;
  out.rows.resize(jobs.size());
  auto run_job = [&](std::size_t i) {
    TrainConfig c = base_config;
    c.mode = jobs[i].mode;
    c.ratio = jobs[i].ratio;
    c.seed = jobs[i].seed;
    c.lora.seed = jobs[i].seed;
    const TrainRun run = train(base, train_corpus, scores, c);
    const AdapterSet* ad = run.adapters ? &*run.adapters : nullptr;
    out.rows[i] = {c.mode,
                   c.ratio,
                   c.seed,
                   eval_loss(run.params, eval_corpus, ad, c.response_only),
                   eval_loss(run.params, train_corpus, ad, c.response_only),
                   *run.memory.ratio_vs_full};
  };
  threads = std::max(1u, threads);
  if (threads == 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run_job(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < jobs.size(); i += threads) run_job(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  for (TrainMode m : modes) {
    for (double r : ratios) {
      std::vector<const StudyRow*> group;
      for (const auto& row : out.rows)
        if (row.mode == m && row.ratio == r) group.push_back(&row);
      StudyAggregate a{m, r, group.size(), 0, 0, 0, 0, 0, 0};
      a.min = group.front()->final_eval_loss;
      a.max = a.min;
      for (const auto* g : group) {
        a.mean += g->final_eval_loss;
        a.mean_train_loss += g->final_train_loss;
        a.mean_memory_ratio += g->memory_ratio;
        a.min = std::min(a.min, g->final_eval_loss);
        a.max = std::max(a.max, g->final_eval_loss);
      }
      const double k = static_cast<double>(group.size());
      a.mean /= k;
      a.mean_train_loss /= k;
      a.mean_memory_ratio /= k;
      double ss = 0.0;
      for (const auto* g : group) ss += (g->final_eval_loss - a.mean) * (g->final_eval_loss - a.mean);
      a.std = group.size() > 1 ? std::sqrt(ss / (k - 1.0)) : 0.0;
      out.aggregates.push_back(a);
    }
  }
  return out;
}

}  // namespace tokenseek
