// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/cli.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "tokenseek/adapters.hpp"
#include "tokenseek/data.hpp"
#include "tokenseek/memacct.hpp"
#include "tokenseek/model.hpp"
#include "tokenseek/seeker.hpp"
#include "tokenseek/trainer.hpp"
#include "tokenseek/verify.hpp"

namespace fs = std::filesystem;

namespace tokenseek::cli {
namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvariantError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep)) out.push_back(trim(part));
  return out;
}

std::vector<double> parse_reals(const std::string& list, const std::string& what) {
  std::vector<double> out;
  for (const auto& p : split(list, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(p, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (p.empty() || used != p.size()) throw UsageError(what + ": '" + p + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(what + ": empty list");
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& list) {
  std::vector<std::uint64_t> out;
  for (const auto& p : split(list, ',')) {
    if (p.empty() || p.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--seeds: '" + p + "' is not a non-negative integer");
    }
    out.push_back(std::stoull(p));
  }
  return out;
}

// "L,H,n_h,ff,V,s"
ModelConfig parse_model_config(const std::string& text) {
  const auto parts = split(text, ',');
  if (parts.size() != 6) throw UsageError("--config expects L,H,n_h,ff,V,s (got '" + text + "')");
  int v[6];
  for (int i = 0; i < 6; ++i) {
    if (parts[i].empty() || parts[i].find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--config: '" + parts[i] + "' is not a positive integer");
    }
    v[i] = std::stoi(parts[i]);
  }
  ModelConfig c;
  c.n_layers = v[0];
  c.hidden = v[1];
  c.n_heads = v[2];
  c.ff_dim = v[3];
  c.vocab = v[4];
  c.max_seq = v[5];
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return c;
}

fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* base = std::getenv(kOutDirEnv); base && *base) return fs::path(base) / path;
  return path;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw DataError(what + " not found: " + path);
}

Checkpoint load_model(const std::string& path) {
  require_file(path, "checkpoint");
  try {
    return load_checkpoint(path);
  } catch (const std::exception& e) {
    throw DataError(std::string("cannot load checkpoint ") + path + ": " + e.what());
  }
}

EncodedCorpus load_records(const std::string& path, std::size_t max_seq, std::ostream& err) {
  require_file(path, "corpus");
  EncodedCorpus c;
  try {
    c = load_corpus(path, max_seq);
  } catch (const std::exception& e) {
    throw DataError(std::string("cannot load corpus ") + path + ": " + e.what());
  }
  for (const auto& w : c.warnings) err << "warning: " << path << ": " << w << '\n';
  if (c.instances.empty()) throw DataError("corpus " + path + " holds no usable records");
  return c;
}

ScoreSet load_score_file(const std::string& path) {
  require_file(path, "score file");
  try {
    return read_scores(fs::path(path));
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

// Every option of the subcommand with its effective value, one per line.
std::vector<std::string> effective_options(const CLI::App* app) {
  std::vector<std::string> out;
  for (const CLI::Option* opt : app->get_options()) {
    if (opt->get_name() == "--help" || opt->get_name() == "-h") continue;
    std::string name = opt->get_single_name();
    std::string value;
    if (opt->count() > 0) {
      const auto& res = opt->results();
      for (std::size_t i = 0; i < res.size(); ++i) value += (i ? "," : "") + res[i];
      if (opt->get_expected_max() == 0 && value.empty()) value = "true";
    } else {
      value = opt->get_default_str();
      if (opt->get_expected_max() == 0 && value.empty()) value = "false";
    }
    out.push_back(name + "=" + value);
  }
  return out;
}

std::string header_block(const CLI::App* app) {
  std::string s = "# tokenseek " + app->get_name() + "\n";
  for (const auto& line : effective_options(app)) s += "# " + line + "\n";
  return s;
}

std::string escape_char(int tok) {
  if (tok == kBos) return "<bos>";
  if (tok == kEos) return "<eos>";
  if (tok == kPad) return "<pad>";
  if (tok == '\n') return "\\n";
  if (tok == '\t') return "\\t";
  if (tok < 32 || tok >= 127) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "\\x%02x", static_cast<unsigned>(tok));
    return buf;
  }
  return std::string(1, static_cast<char>(tok));
}

// Positions ordered by fused score, ties toward the lower index.
std::vector<std::size_t> rank_order(const std::vector<double>& fused) {
  std::vector<std::size_t> idx(fused.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return fused[a] > fused[b]; });
  return idx;
}

// ---- shared training flags ----

struct TrainFlags {
  double ratio = 0.1;
  std::optional<double> alpha, beta;
  double lr = 4e-4;
  std::size_t warmup = 100;
  double wd = 0.01;
  std::size_t accum = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t rescore_interval = 0;
  bool response_only = false;
  bool no_shuffle = false;
  bool adapter = false;
  int lora_rank = 8;
  double lora_alpha = 16.0;
  double lora_dropout = 0.05;
  std::string lora_targets = "ff1,ff2";
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
  app->add_option("--alpha", f.alpha, "Context weight for seek masks (default: from the score file)")
      ->default_str("from-scores");
  app->add_option("--beta", f.beta, "Gradient weight for seek masks (default: from the score file)")
      ->default_str("from-scores");
  app->add_option("--lr", f.lr, "Peak learning rate")->capture_default_str();
  app->add_option("--warmup", f.warmup, "Linear warmup steps")->capture_default_str();
  app->add_option("--wd", f.wd, "Decoupled weight decay")->capture_default_str();
  app->add_option("--accum", f.accum, "Instances per optimizer step")->capture_default_str();
  app->add_option("--epochs", f.epochs, "Passes over the corpus")->capture_default_str();
  app->add_option("--rescore-interval", f.rescore_interval, "Optimizer steps between re-scoring (0 = never)")
      ->capture_default_str();
  app->add_flag("--response-only", f.response_only, "Loss on response tokens only");
  app->add_flag("--no-shuffle", f.no_shuffle, "Keep corpus order in every epoch");
  app->add_flag("--adapter", f.adapter, "Train LoRA adapters over a frozen backbone");
  app->add_option("--lora-rank", f.lora_rank, "Adapter rank")->capture_default_str();
  app->add_option("--lora-alpha", f.lora_alpha, "Adapter scaling numerator")->capture_default_str();
  app->add_option("--lora-dropout", f.lora_dropout, "Adapter input dropout")->capture_default_str();
  app->add_option("--lora-targets", f.lora_targets, "Adapted projections (q,k,v,o,ff1,ff2)")->capture_default_str();
}

TrainConfig train_config(const TrainFlags& f, TrainMode mode, const ScoreSet* scores) {
  TrainConfig c;
  c.mode = mode;
  c.ratio = f.ratio;
  c.alpha = f.alpha ? *f.alpha : scores ? scores->alpha : c.alpha;
  c.beta = f.beta ? *f.beta : scores ? scores->beta : c.beta;
  if (scores) c.magnitude = scores->magnitude;
  c.lr_max = f.lr;
  c.warmup_steps = f.warmup;
  c.weight_decay = f.wd;
  c.accum_steps = f.accum;
  c.epochs = f.epochs;
  c.seed = f.seed;
  c.rescore_interval = f.rescore_interval;
  c.response_only = f.response_only;
  c.shuffle = !f.no_shuffle;
  c.adapter = f.adapter;
  c.lora.rank = f.lora_rank;
  c.lora.alpha = f.lora_alpha;
  c.lora.dropout = f.lora_dropout;
  c.lora.seed = f.seed;
  try {
    c.lora.targets = parse_targets(f.lora_targets);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (f.lora_rank < 1) throw UsageError("--lora-rank must be >= 1");
  if (!(f.lora_dropout >= 0.0 && f.lora_dropout < 1.0)) throw UsageError("--lora-dropout must lie in [0, 1)");
  if (mode != TrainMode::kFull && !(f.ratio > 0.0 && f.ratio <= 1.0)) throw UsageError("--ratio must lie in (0, 1]");
  if (c.alpha < 0.0 || c.beta < 0.0 || (c.alpha == 0.0 && c.beta == 0.0)) {
    throw UsageError("--alpha/--beta must be non-negative and not both zero");
  }
  return c;
}

void validate_schedule(const TrainConfig& c, std::size_t corpus_size) {
  try {
    c.validate(total_steps(corpus_size, c));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

// ---- init ----

struct InitOpts {
  std::string config;
  std::uint64_t seed = 0;
  double init_scale = 0.02;
  std::string out = "model.ckpt";
};

void cmd_init(const CLI::App* app, const InitOpts& o, std::ostream& out) {
  ModelConfig c = parse_model_config(o.config);
  c.seed = o.seed;
  if (!(o.init_scale >= 0.0)) throw UsageError("--init-scale must be >= 0");
  const Parameters p = init_params(c, o.init_scale);
  const fs::path path = output_path(o.out);
  ensure_parent(path);
  save_checkpoint(path, p);
  out << header_block(app);
  out << "model " << c.describe() << '\n';
  out << "parameters " << p.parameter_count() << '\n';
  out << "checksum " << hex64(params_checksum(p)) << '\n';
  out << "wrote " << path.string() << '\n';
}

// ---- toy-corpus ----

struct ToyOpts {
  std::string task = "mixed";
  std::size_t count = 100;
  std::uint64_t seed = 0;
  std::string prefix;
  std::string out = "corpus.jsonl";
};

void cmd_toy(const CLI::App* app, const ToyOpts& o, std::ostream& out) {
  std::vector<InstructionRecord> records;
  try {
    records = toy_corpus(o.task, o.count, o.seed, o.prefix);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const fs::path path = output_path(o.out);
  ensure_parent(path);
  write_jsonl(path, records);
  out << header_block(app);
  out << "records " << records.size() << '\n';
  out << "wrote " << path.string() << '\n';
}

// ---- score ----

struct ScoreOpts {
  std::string model, corpus, out = "scores.csv";
  double alpha = 5.0, beta = 5.0;
  bool magnitude = false, signed_scores = false;
  std::uint64_t seed = 0;
  bool response_only = false;
  unsigned threads = 1;
};

void cmd_score(const CLI::App* app, const ScoreOpts& o, std::ostream& out, std::ostream& err) {
  if (o.alpha < 0.0 || o.beta < 0.0) throw UsageError("--alpha and --beta must be non-negative");
  if (o.alpha == 0.0 && o.beta == 0.0) throw UsageError("--alpha and --beta cannot both be zero");
  if (o.magnitude && o.signed_scores) throw UsageError("--magnitude and --signed are exclusive");
  if (o.threads < 1) throw UsageError("--threads must be >= 1");

  const Checkpoint ck = load_model(o.model);
  const EncodedCorpus corpus = load_records(o.corpus, static_cast<std::size_t>(ck.params.config.max_seq), err);
  ScoreSet scores =
      score_corpus(ck.params, corpus, o.alpha, o.beta, !o.signed_scores, o.response_only, o.threads);
  for (const auto& line : effective_options(app)) scores.notes.push_back(line);
  for (const auto& w : scores.warnings) err << "warning: " << w << '\n';

  const fs::path path = output_path(o.out);
  ensure_parent(path);
  write_scores(path, scores);

  out << header_block(app);
  out << "model_checksum " << hex64(scores.model_checksum) << '\n';
  out << "instances " << scores.instances.size() << '\n';
  for (std::size_t i = 0; i < scores.instances.size(); ++i) {
    const TokenScores& s = scores.instances[i];
    const TokenIds& tokens = corpus.instances[i].tokens;
    const auto order = rank_order(s.fused);
    out << s.id << " n=" << s.n();
    for (double r : {0.1, 0.5}) {
      const std::size_t k = selection_size(s.n(), r);
      out << " | r=" << fmt(r, "%.1f") << " k=" << k << " top:";
      for (std::size_t j = 0; j < std::min<std::size_t>(k, 6); ++j) {
        const std::size_t pos = order[j];
        const int tok = pos < tokens.size() ? tokens[pos] : -1;
        out << ' ' << pos << "'" << (tok >= 0 ? escape_char(tok) : "?") << "'";
      }
      if (k > 6) out << " ...";
    }
    out << '\n';
  }
  out << "wrote " << path.string() << '\n';
}

// ---- train ----

struct TrainOpts {
  std::string model, corpus, mode = "full", scores, eval, out = "run";
  TrainFlags flags;
};

std::string run_summary(const TrainRun& run, std::optional<double> eval) {
  std::ostringstream os;
  os << "steps " << run.steps.size() << '\n';
  os << "final_step_loss " << fmt(run.steps.empty() ? 0.0 : run.steps.back().loss, "%.6f") << '\n';
  if (eval) os << "eval_loss " << fmt(*eval, "%.6f") << '\n';
  os << "peak_cached_scalars " << run.memory.peak_scalars << '\n';
  os << "average_cached_scalars " << fmt(run.memory.average_scalars, "%.3f") << '\n';
  os << "ratio_vs_full " << fmt(run.memory.ratio_vs_full.value_or(0.0), "%.6f") << '\n';
  return os.str();
}

void cmd_train(const CLI::App* app, const TrainOpts& o, std::ostream& out, std::ostream& err) {
  TrainMode mode;
  try {
    mode = parse_mode(o.mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (mode == TrainMode::kSeek && o.scores.empty()) {
    throw UsageError("--mode seek needs --scores; run `tokenseek score --model ... --corpus ... --out scores.csv` "
                     "first and pass that file");
  }
  if (mode == TrainMode::kFull && app->get_option("--ratio")->count() > 0) {
    err << "warning: --ratio is ignored in mode=full\n";
  }
  std::optional<ScoreSet> scores;
  if (!o.scores.empty()) scores = load_score_file(o.scores);
  const TrainConfig config = train_config(o.flags, mode, scores ? &*scores : nullptr);

  const Checkpoint ck = load_model(o.model);
  const auto max_seq = static_cast<std::size_t>(ck.params.config.max_seq);
  const EncodedCorpus corpus = load_records(o.corpus, max_seq, err);
  std::optional<EncodedCorpus> eval;
  if (!o.eval.empty()) eval = load_records(o.eval, max_seq, err);
  validate_schedule(config, corpus.instances.size());
  if (scores && scores->model_checksum != params_checksum(ck.params)) {
    err << "warning: score file was computed from a different model (" << hex64(scores->model_checksum) << " vs "
        << hex64(params_checksum(ck.params)) << ")\n";
  }

  TrainRun run;
  try {
    run = train(ck.params, corpus, scores ? &*scores : nullptr, config,
                config.adapter ? ck.adapters : std::optional<AdapterSet>{});
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
  for (const auto& w : run.warnings) err << "warning: " << w << '\n';

  std::optional<double> eval_value;
  if (eval) {
    eval_value = eval_loss(run.params, *eval, run.adapters ? &*run.adapters : nullptr, config.response_only);
  }

  const fs::path dir = output_path(o.out);
  fs::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", run.params, run.adapters ? &*run.adapters : nullptr);
  std::string metrics = header_block(app);
  metrics += "# model " + ck.params.config.describe() + "\n";
  metrics += metrics_text(run);
  if (eval_value) metrics += "# eval_loss=" + fmt(*eval_value) + "\n";
  write_text(dir / "metrics.csv", metrics);

  std::string memory = header_block(app);
  memory += run.memory.to_table();
  memory += "analytic_peak    " + std::to_string(run.analytic_peak_scalars) + "\n";
  memory += "analytic_average " + fmt(run.analytic_average_scalars, "%.3f") + "\n";
  write_text(dir / "memory.txt", memory);

  out << header_block(app);
  out << run_summary(run, eval_value);
  out << "wrote " << (dir / "model.ckpt").string() << ' ' << (dir / "metrics.csv").string() << ' '
      << (dir / "memory.txt").string() << '\n';
}

// ---- ablate ----

struct AblateOpts {
  std::string model, corpus, eval, scores, modes = "random,seek", ratios = "0.1,0.3,0.5", seeds = "1,2,3,4,5",
                                            out = "ablate";
  unsigned threads = 1;
  TrainFlags flags;
};

void cmd_ablate(const CLI::App* app, const AblateOpts& o, std::ostream& out, std::ostream& err) {
  std::vector<TrainMode> modes;
  for (const auto& m : split(o.modes, ',')) {
    try {
      modes.push_back(parse_mode(m));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  const std::vector<double> ratios = parse_reals(o.ratios, "--ratios");
  for (double r : ratios)
    if (!(r > 0.0 && r <= 1.0)) throw UsageError("--ratios: every ratio must lie in (0, 1]");
  const std::vector<std::uint64_t> seeds = parse_seeds(o.seeds);
  if (seeds.size() < 3) throw UsageError("--seeds: a stability study needs at least 3 seeds");
  const bool seek = std::find(modes.begin(), modes.end(), TrainMode::kSeek) != modes.end();
  if (seek && o.scores.empty()) throw UsageError("mode seek needs --scores; run `tokenseek score` first");
  if (o.threads < 1) throw UsageError("--threads must be >= 1");

  std::optional<ScoreSet> scores;
  if (!o.scores.empty()) scores = load_score_file(o.scores);
  TrainFlags flags = o.flags;
  flags.ratio = ratios.front();
  const TrainConfig base = train_config(flags, modes.front(), scores ? &*scores : nullptr);

  const Checkpoint ck = load_model(o.model);
  const auto max_seq = static_cast<std::size_t>(ck.params.config.max_seq);
  const EncodedCorpus corpus = load_records(o.corpus, max_seq, err);
  const EncodedCorpus eval = o.eval.empty() ? corpus : load_records(o.eval, max_seq, err);
  validate_schedule(base, corpus.instances.size());

  StudyResult st;
  try {
    st = stability_study(ck.params, corpus, eval, scores ? &*scores : nullptr, base, modes, ratios, seeds, o.threads);
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }

  const std::string head = header_block(app);
  const fs::path dir = output_path(o.out);
  fs::create_directories(dir);
  write_text(dir / "rows.csv", head + st.rows_csv());
  write_text(dir / "aggregate.csv", head + st.aggregate_csv());
  write_text(dir / "table.txt", head + st.ratio_table());
  out << head << st.ratio_table() << st.aggregate_csv();
  out << "wrote " << (dir / "rows.csv").string() << ' ' << (dir / "aggregate.csv").string() << ' '
      << (dir / "table.txt").string() << '\n';
}

// ---- memreport ----

struct MemOpts {
  std::string config, ratios = "0.1,0.25,0.5,1.0", run;
  std::size_t batch = 1;
};

struct RunMemory {
  std::optional<double> peak, average, analytic_peak, analytic_average;
};

RunMemory read_run_memory(const fs::path& metrics) {
  std::ifstream is(metrics);
  if (!is) throw DataError("cannot read " + metrics.string());
  RunMemory m;
  std::string line;
  auto value = [](const std::string& s) {
    try {
      return std::stod(s);
    } catch (const std::exception&) {
      throw DataError("bad number '" + s + "' in metrics file");
    }
  };
  while (std::getline(is, line)) {
    if (line.rfind("peak,", 0) == 0) m.peak = value(line.substr(5));
    else if (line.rfind("average,", 0) == 0) m.average = value(line.substr(8));
    else if (line.rfind("# analytic_peak_scalars=", 0) == 0) m.analytic_peak = value(line.substr(24));
    else if (line.rfind("# analytic_average_scalars=", 0) == 0) m.analytic_average = value(line.substr(27));
  }
  if (!m.peak || !m.average || !m.analytic_peak || !m.analytic_average) {
    throw DataError(metrics.string() + " lacks the memory summary");
  }
  return m;
}

void cmd_memreport(const CLI::App* app, const MemOpts& o, std::ostream& out) {
  if (o.config.empty() && o.run.empty()) throw UsageError("memreport needs --config and/or --run");
  if (o.batch < 1) throw UsageError("--batch must be >= 1");
  out << header_block(app);
  char buf[256];
  if (!o.config.empty()) {
    const ModelConfig c = parse_model_config(o.config);
    const std::vector<double> ratios = parse_reals(o.ratios, "--ratios");
    for (double r : ratios)
      if (!(r > 0.0 && r <= 1.0)) throw UsageError("--ratios: every ratio must lie in (0, 1]");
    const std::size_t s = static_cast<std::size_t>(c.max_seq);
    const std::size_t B = o.batch;
    const std::size_t full = estimate_full(c, B, s);
    out << "model " << c.describe() << '\n';
    out << "batch " << B << " seq " << s << '\n';
    out << "full_scalars " << full << '\n';
    out << "ratio,k,selected_part,kv_overhead,total,ratio_vs_full,k_over_s\n";
    for (double r : ratios) {
      const auto e = estimate_ditched_breakdown(c, B, s, r);
      std::snprintf(buf, sizeof buf, "%g,%zu,%zu,%zu,%zu,%.6f,%.6f\n", r, e.selected_rows, e.selected_part,
                    e.kv_overhead, e.total(), static_cast<double>(e.total()) / static_cast<double>(full),
                    static_cast<double>(e.selected_rows) / static_cast<double>(s));
      out << buf;
    }
    out << "# leading terms of one layer: B*n_h*k*s + B*k*H against H*H weights\n";
    out << "ratio,k,attention,hidden,total,weights,activation_to_weight\n";
    for (double r : ratios) {
      const std::size_t k = selection_size(s, r);
      const LeadingTerms full_terms = leading_terms(B, static_cast<std::size_t>(c.n_heads), s,
                                                    static_cast<std::size_t>(c.hidden));
      const std::size_t attention = full_terms.attention / s * k;
      const std::size_t hidden = full_terms.hidden / s * k;
      std::snprintf(buf, sizeof buf, "%g,%zu,%zu,%zu,%zu,%zu,%.2f\n", r, k, attention, hidden, attention + hidden,
                    full_terms.weights,
                    static_cast<double>(attention + hidden) / static_cast<double>(full_terms.weights));
      out << buf;
    }
  }
  if (!o.run.empty()) {
    const fs::path metrics = fs::path(o.run) / "metrics.csv";
    require_file(metrics.string(), "run metrics");
    const RunMemory m = read_run_memory(metrics);
    const double peak_ratio = *m.peak / *m.analytic_peak;
    const double avg_ratio = *m.average / *m.analytic_average;
    out << "run " << o.run << '\n';
    out << "measured,analytic,measured_over_analytic\n";
    std::snprintf(buf, sizeof buf, "peak,%.0f,%.0f,%.6f\naverage,%.3f,%.3f,%.6f\n", *m.peak, *m.analytic_peak,
                  peak_ratio, *m.average, *m.analytic_average, avg_ratio);
    out << buf;
    if (*m.peak != *m.analytic_peak || std::abs(avg_ratio - 1.0) > 1e-12) {
      throw InvariantError("measured cache size differs from the analytic estimate");
    }
  }
}

// ---- gradcheck ----

struct GradOpts {
  std::string size = "tiny";
  std::uint64_t seed = 0;
  std::size_t masks = 200;
  std::optional<double> fd_tol;
  double oracle_tol = 1e-10;
};

void cmd_gradcheck(const CLI::App* app, const GradOpts& o, std::ostream& out) {
  ModelConfig c;
  try {
    c = verify::gradcheck_config(o.size);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  // The small model's difference quotients carry about 1e-10 of rounding
  // noise, which the 1e-4 floor of the relative error turns into ~1e-6.
  const double fd_tol = o.fd_tol.value_or(o.size == "tiny" ? 1e-6 : 5e-6);
  const verify::SuiteResult r = verify::gradcheck_suite(c, o.seed, o.masks, fd_tol, o.oracle_tol);
  out << header_block(app);
  out << "model " << c.describe() << '\n';
  out << "check,max_rel_err,max_abs_err,checked,tolerance,status,worst\n";
  char buf[256];
  for (const auto& ch : r.checks) {
    std::snprintf(buf, sizeof buf, "%s,%.3e,%.3e,%zu,%.0e,%s,%s\n", ch.name.c_str(), ch.stats.max_rel_err,
                  ch.stats.max_abs_err, ch.stats.checked, ch.tolerance, ch.pass() ? "ok" : "VIOLATION",
                  ch.stats.worst.c_str());
    out << buf;
  }
  if (!r.pass()) throw InvariantError("gradient check exceeded its tolerance");
}

// ---- inspect ----

struct InspectOpts {
  std::string scores, id, corpus;
  double ratio = 0.5;
  std::optional<double> alpha, beta;
};

void cmd_inspect(const CLI::App* app, const InspectOpts& o, std::ostream& out, std::ostream& err) {
  if (!(o.ratio > 0.0 && o.ratio <= 1.0)) throw UsageError("--ratio must lie in (0, 1]");
  ScoreSet set = load_score_file(o.scores);
  if (o.alpha || o.beta) {
    const double a = o.alpha.value_or(set.alpha), b = o.beta.value_or(set.beta);
    if (a < 0.0 || b < 0.0 || (a == 0.0 && b == 0.0)) {
      throw UsageError("--alpha/--beta must be non-negative and not both zero");
    }
    set.refuse(a, b);
  }
  const TokenScores* s = set.find(o.id);
  if (!s) throw DataError("instance '" + o.id + "' not found in " + o.scores);
  const SelectionMask mask = select_tokens(s->fused, o.ratio);
  std::vector<bool> sel(s->n(), false);
  for (std::size_t j : mask.selected()) sel[j] = true;

  std::optional<TokenIds> tokens;
  if (!o.corpus.empty()) {
    const EncodedCorpus c = load_records(o.corpus, std::numeric_limits<int>::max(), err);
    for (const auto& inst : c.instances) {
      if (inst.id != o.id) continue;
      EncodedInstance fit = truncate_instance(inst, s->n());
      if (fit.tokens.size() != s->n()) throw DataError("instance '" + o.id + "' has a different length in the corpus");
      tokens = fit.tokens;
    }
    if (!tokens) throw DataError("instance '" + o.id + "' not found in " + o.corpus);
  }

  out << header_block(app);
  out << "instance " << s->id << " n=" << s->n() << " k=" << mask.selected().size() << " alpha=" << fmt(set.alpha, "%g")
      << " beta=" << fmt(set.beta, "%g") << '\n';
  out << "# selected tokens are wrapped in [[ ]]\n";
  if (tokens) {
    std::string text;
    for (std::size_t j = 0; j < s->n(); ++j) {
      const bool open = sel[j] && (j == 0 || !sel[j - 1]);
      const bool close = sel[j] && (j + 1 == s->n() || !sel[j + 1]);
      if (open) text += "[[";
      const int t = (*tokens)[j];
      text += t < 256 ? std::string(1, static_cast<char>(t)) : escape_char(t);
      if (close) text += "]]";
    }
    out << text << '\n';
  } else {
    out << "selected";
    for (std::size_t j : mask.selected()) out << ' ' << j;
    out << '\n';
  }
  out << "token_index,token,selected,i1,i2,fused\n";
  for (std::size_t j = 0; j < s->n(); ++j) {
    std::string tok = tokens ? escape_char((*tokens)[j]) : "";
    if (tok == "," || tok == "\"") tok = "\"" + std::string(tok == "\"" ? "\"\"" : ",") + "\"";
    out << j << ',' << tok << ',' << (sel[j] ? 1 : 0) << ',' << fmt(s->i1[j]) << ',' << fmt(s->i2[j]) << ','
        << fmt(s->fused[j]) << '\n';
  }
}

// ---- config file ----

std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("config file not found: " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config file " + path + " line " + std::to_string(lineno) + ": expected key=value");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

// Appends config-file entries the command line did not set, so flags win over
// the file and the file wins over defaults.
std::vector<std::string> apply_config_file(CLI::App& app, std::vector<std::string> args) {
  std::string file;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config-file") {
      if (i + 1 == args.size()) throw UsageError("--config-file needs a path");
      file = args[++i];
    } else if (args[i].rfind("--config-file=", 0) == 0) {
      file = args[i].substr(14);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (file.empty()) return rest;
  const auto entries = read_config_file(file);
  const auto sub_it = std::find_if(rest.begin(), rest.end(), [](const std::string& a) { return a.empty() || a[0] != '-'; });
  if (sub_it == rest.end()) throw UsageError("--config-file needs a command");
  CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(*sub_it);
  } catch (const std::exception&) {
    throw UsageError("unknown command '" + *sub_it + "'");
  }
  for (const auto& [key, value] : entries) {
    const std::string flag = "--" + key;
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (!opt) throw UsageError("config file " + file + ": '" + key + "' is not an option of " + sub->get_name());
    const bool given = std::any_of(rest.begin(), rest.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
    if (given) continue;
    if (opt->get_expected_max() == 0) {
      if (value == "true" || value == "1" || value == "yes") rest.push_back(flag);
      else if (!(value == "false" || value == "0" || value == "no")) {
        throw UsageError("config file " + file + ": '" + key + "' expects true or false");
      }
    } else {
      rest.push_back(flag + "=" + value);
    }
  }
  return rest;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"tokenseek: token scoring and selective backpropagation for transformer fine-tuning", "tokenseek"};
  app.require_subcommand(1);
  std::string config_file;
  app.add_option("--config-file", config_file, "key=value file; command-line flags take precedence");

  InitOpts init;
  auto* c_init = app.add_subcommand("init", "Write a freshly initialized model checkpoint");
  c_init->add_option("--config", init.config, "L,H,n_h,ff,V,s")->required();
  c_init->add_option("--seed", init.seed, "Initialization seed")->capture_default_str();
  c_init->add_option("--init-scale", init.init_scale, "Weight standard deviation")->capture_default_str();
  c_init->add_option("--out", init.out, "Checkpoint path")->capture_default_str();

  ToyOpts toy;
  auto* c_toy = app.add_subcommand("toy-corpus", "Write a toy instruction corpus as JSONL");
  c_toy->add_option("--task", toy.task, "copy, reverse, arith or mixed")->capture_default_str();
  c_toy->add_option("--count", toy.count, "Number of records")->capture_default_str();
  c_toy->add_option("--seed", toy.seed, "Generator seed")->capture_default_str();
  c_toy->add_option("--prefix", toy.prefix, "Record id prefix")->capture_default_str();
  c_toy->add_option("--out", toy.out, "JSONL path")->capture_default_str();

  ScoreOpts score;
  auto* c_score = app.add_subcommand("score", "Score every token of a corpus");
  c_score->add_option("--model", score.model, "Checkpoint")->required();
  c_score->add_option("--corpus", score.corpus, "JSONL corpus")->required();
  c_score->add_option("--out", score.out, "Score file")->capture_default_str();
  c_score->add_option("--alpha", score.alpha, "Context weight")->capture_default_str();
  c_score->add_option("--beta", score.beta, "Gradient weight")->capture_default_str();
  c_score->add_flag("--magnitude", score.magnitude, "Sum |dL/dz| per token (default)");
  c_score->add_flag("--signed", score.signed_scores, "Sum the signed gradient per token");
  c_score->add_option("--seed", score.seed, "Recorded for provenance; scoring draws no random numbers")
      ->capture_default_str();
  c_score->add_flag("--response-only", score.response_only, "Gradient of the response loss only");
  c_score->add_option("--threads", score.threads, "Worker threads")->capture_default_str();

  TrainOpts tr;
  auto* c_train = app.add_subcommand("train", "Fine-tune in full, random or seek mode");
  c_train->add_option("--model", tr.model, "Checkpoint")->required();
  c_train->add_option("--corpus", tr.corpus, "JSONL training corpus")->required();
  c_train->add_option("--mode", tr.mode, "full, random or seek")->capture_default_str();
  c_train->add_option("--ratio", tr.flags.ratio, "Selected fraction of tokens")->capture_default_str();
  c_train->add_option("--scores", tr.scores, "Score file (mode=seek)");
  c_train->add_option("--seed", tr.flags.seed, "Shuffle, mask and adapter seed")->capture_default_str();
  c_train->add_option("--eval", tr.eval, "JSONL evaluation corpus");
  c_train->add_option("--out", tr.out, "Run directory")->capture_default_str();
  add_train_flags(c_train, tr.flags);

  AblateOpts ab;
  auto* c_ablate = app.add_subcommand("ablate", "Multi-seed stability study over modes and ratios");
  c_ablate->add_option("--model", ab.model, "Checkpoint")->required();
  c_ablate->add_option("--corpus", ab.corpus, "JSONL training corpus")->required();
  c_ablate->add_option("--eval", ab.eval, "JSONL evaluation corpus (default: the training corpus)");
  c_ablate->add_option("--scores", ab.scores, "Score file (mode=seek)");
  c_ablate->add_option("--modes", ab.modes, "Comma-separated modes")->capture_default_str();
  c_ablate->add_option("--ratios", ab.ratios, "Comma-separated ratios")->capture_default_str();
  c_ablate->add_option("--seeds", ab.seeds, "Comma-separated seeds")->capture_default_str();
  c_ablate->add_option("--threads", ab.threads, "Worker threads")->capture_default_str();
  c_ablate->add_option("--out", ab.out, "Output directory")->capture_default_str();
  add_train_flags(c_ablate, ab.flags);

  MemOpts mem;
  auto* c_mem = app.add_subcommand("memreport", "Analytic activation memory, or measured vs analytic for a run");
  c_mem->add_option("--config", mem.config, "L,H,n_h,ff,V,s");
  c_mem->add_option("--ratios", mem.ratios, "Comma-separated ratios")->capture_default_str();
  c_mem->add_option("--batch", mem.batch, "Batch size")->capture_default_str();
  c_mem->add_option("--run", mem.run, "Run directory written by train");

  GradOpts grad;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference and stop-gradient oracle checks");
  c_grad->add_option("--size", grad.size, "tiny or small")->capture_default_str();
  c_grad->add_option("--seed", grad.seed, "Model and input seed")->capture_default_str();
  c_grad->add_option("--masks", grad.masks, "Random masks for the oracle comparison")->capture_default_str();
  c_grad->add_option("--fd-tol", grad.fd_tol, "Finite-difference tolerance (tiny 1e-6, small 5e-6)")
      ->default_str("by-size");
  c_grad->add_option("--oracle-tol", grad.oracle_tol, "Oracle tolerance")->capture_default_str();

  InspectOpts ins;
  auto* c_ins = app.add_subcommand("inspect", "Show one instance's scores and selected tokens");
  c_ins->add_option("scores", ins.scores, "Score file")->required();
  c_ins->add_option("id", ins.id, "Instance id")->required();
  c_ins->add_option("--ratio", ins.ratio, "Selected fraction")->capture_default_str();
  c_ins->add_option("--corpus", ins.corpus, "JSONL corpus for rendering the text");
  c_ins->add_option("--alpha", ins.alpha, "Override the file's context weight")->default_str("from-file");
  c_ins->add_option("--beta", ins.beta, "Override the file's gradient weight")->default_str("from-file");

  try {
    std::vector<std::string> expanded = apply_config_file(app, args);
    std::reverse(expanded.begin(), expanded.end());
    try {
      app.parse(expanded);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? kOk : kUsage;
    }
    if (c_init->parsed()) cmd_init(c_init, init, out);
    else if (c_toy->parsed()) cmd_toy(c_toy, toy, out);
    else if (c_score->parsed()) cmd_score(c_score, score, out, err);
    else if (c_train->parsed()) cmd_train(c_train, tr, out, err);
    else if (c_ablate->parsed()) cmd_ablate(c_ablate, ab, out, err);
    else if (c_mem->parsed()) cmd_memreport(c_mem, mem, out);
    else if (c_grad->parsed()) cmd_gradcheck(c_grad, grad, out);
    else if (c_ins->parsed()) cmd_inspect(c_ins, ins, out, err);
    return kOk;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const InvariantError& e) {
    err << "error: " << e.what() << '\n';
    return kInvariant;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, out, err);
}

}  // namespace tokenseek::cli
