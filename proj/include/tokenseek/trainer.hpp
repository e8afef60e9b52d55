// SPDX-License-Identifier: Apache-2.0
//
// Training loop: AdamW with linear warmup and cosine decay, gradient
// accumulation, and the full / random / seek token modes.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tokenseek/data.hpp"
#include "tokenseek/lora.hpp"
#include "tokenseek/memacct.hpp"
#include "tokenseek/model.hpp"
#include "tokenseek/seeker.hpp"

namespace tokenseek {

enum class TrainMode { kFull, kRandom, kSeek };
std::string_view mode_name(TrainMode m);
// "full", "random" or "seek"; throws std::invalid_argument otherwise.
TrainMode parse_mode(std::string_view name);

struct TrainConfig {
  TrainMode mode = TrainMode::kFull;
  double ratio = 0.1;
  double alpha = 5.0;
  double beta = 5.0;
  double lr_max = 4e-4;
  std::size_t warmup_steps = 100;
  double weight_decay = 0.01;
  std::size_t accum_steps = 32;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t rescore_interval = 0;  // optimizer steps between re-scoring; 0 = never
  bool magnitude = true;             // used when re-scoring
  bool response_only = false;        // loss only on response tokens
  bool shuffle = true;
  bool adapter = false;
  LoraConfig lora;

  // Throws std::invalid_argument on inconsistent settings.
  void validate(std::size_t total_steps) const;
  // One `key=value` per line.
  std::string describe() const;
};

std::size_t total_steps(std::size_t corpus_size, const TrainConfig& config);

// Linear warmup from 0 to lr_max, then half-cosine to 0 at `total`.
double cosine_lr(std::size_t step, std::size_t total, const TrainConfig& config);

struct AdamState {
  std::vector<Matrix> m, v;
  std::size_t t = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// AdamW: p -= lr*wd*p, then the bias-corrected moment update. State is
// created on first use.
void adam_step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, AdamState& state,
               double lr, double weight_decay);

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;               // mean reported loss over the window
  std::size_t cached_scalars = 0;  // peak over the window's instances
};

struct TrainRun {
  TrainConfig config;
  std::vector<StepRecord> steps;
  MemoryReport memory;                  // categories of the peak instance, peak and average over the run
  double average_full_scalars = 0.0;    // what full caching would have averaged on the same instances
  std::size_t analytic_peak_scalars = 0;  // closed-form estimate for the same instances
  double analytic_average_scalars = 0.0;
  Parameters params;
  std::optional<AdapterSet> adapters;
  std::vector<std::string> warnings;
};

// Runs the configured schedule. mode=seek needs `scores` covering every
// instance with matching lengths. When config.adapter is set and `adapters`
// is empty, fresh adapters are attached from config.lora.
TrainRun train(Parameters params, const EncodedCorpus& corpus, const ScoreSet* scores, const TrainConfig& config,
               std::optional<AdapterSet> adapters = std::nullopt);

// Mean over instances of the full-forward loss; rejects an empty corpus.
double eval_loss(const Parameters& params, const EncodedCorpus& corpus, const AdapterSet* adapters = nullptr,
                 bool response_only = false);

// Metrics file: '#' header with the config, `step,lr,loss,cached_scalars`
// lines, then a '#' summary and the memory report lines.
void write_metrics(const std::filesystem::path& path, const TrainRun& run);
std::string metrics_text(const TrainRun& run);

struct StudyRow {
  TrainMode mode;
  double ratio;
  std::uint64_t seed;
  double final_eval_loss;
  double final_train_loss;
  double memory_ratio;  // average cached scalars relative to full caching
};

struct StudyAggregate {
  TrainMode mode;
  double ratio;
  std::size_t runs;
  double mean, std, min, max;  // of final_eval_loss; std uses n-1
  double mean_train_loss;
  double mean_memory_ratio;
};

struct StudyResult {
  std::vector<StudyRow> rows;
  std::vector<StudyAggregate> aggregates;
  std::string rows_csv() const;       // mode,r,seed,final_eval_loss
  std::string aggregate_csv() const;  // mode,r,runs,mean,std,min,max,mean_train_loss,mean_memory_ratio
  std::string ratio_table() const;    // ratio x memory ratio x loss, one block per mode
  const StudyAggregate* find(TrainMode mode, double ratio) const;
};

// Trains every (mode, ratio, seed) from `base` and evaluates on `eval`.
// Each seed sets config.seed (shuffle order, random masks, adapter init and
// dropout). Needs at least 3 seeds.
StudyResult stability_study(const Parameters& base, const EncodedCorpus& train_corpus, const EncodedCorpus& eval_corpus,
                            const ScoreSet* scores, const TrainConfig& base_config, const std::vector<TrainMode>& modes,
                            const std::vector<double>& ratios, const std::vector<std::uint64_t>& seeds,
                            unsigned threads = 1);

}  // namespace tokenseek
