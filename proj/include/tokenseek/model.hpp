// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer with learned absolute positions, pre-norm blocks
// (multi-head causal attention, GELU feed-forward) and an LM head. Backward
// passes are written out by hand.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tokenseek/cache.hpp"
#include "tokenseek/lora.hpp"
#include "tokenseek/matrix.hpp"

namespace tokenseek {

using TokenIds = std::vector<int>;

// Target value for positions that do not contribute to the loss.
inline constexpr int kNoTarget = -1;

struct ModelConfig {
  int n_layers = 1;
  int hidden = 16;
  int n_heads = 2;
  int ff_dim = 32;
  int vocab = 259;
  int max_seq = 32;
  std::uint64_t seed = 0;

  int head_dim() const { return hidden / n_heads; }
  // Throws std::invalid_argument on any violated shape constraint.
  void validate() const;
  std::string describe() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerParams {
  Matrix norm1_gain, norm1_shift;
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  Matrix norm2_gain, norm2_shift;
  Matrix w1, b1, w2, b2;
};

struct Parameters {
  ModelConfig config;
  Matrix token_embedding;     // vocab x hidden
  Matrix position_embedding;  // max_seq x hidden
  std::vector<LayerParams> layers;
  Matrix final_gain, final_shift;
  Matrix lm_head;  // hidden x vocab

  // Every tensor with a stable name, in checkpoint declaration order.
  std::vector<std::pair<std::string, Matrix*>> named_tensors();
  std::vector<std::pair<std::string, const Matrix*>> named_tensors() const;

  std::size_t parameter_count() const;
  // All-zero tensors with the shapes implied by `config`.
  static Parameters zeros(const ModelConfig& config);
};

using Gradients = Parameters;

// Seeded Gaussian weights (std `init_scale`), zero biases and shifts, unit gains.
Parameters init_params(const ModelConfig& config, double init_scale);

// Closed-form parameter count for a config.
std::size_t parameter_count(const ModelConfig& config);

// FNV-1a over the config record and the little-endian parameter bytes.
std::uint64_t params_checksum(const Parameters& params);

struct ActivationCache {
  std::size_t n = 0;
  bool adapted = false;
  TensorStash stash;

  std::size_t total_scalars() const { return stash.total_scalars(); }
};

struct ForwardResult {
  double loss = 0.0;
  std::size_t target_count = 0;
  Matrix logits;                  // n x vocab
  ActivationCache cache;
  std::vector<Matrix> final_attn;  // one n x n matrix per head
};

// Next-token targets: targets[i] = tokens[i+1], last position has none.
TokenIds next_token_targets(const TokenIds& tokens);

// Throws std::invalid_argument for out-of-range ids, bad lengths or a target
// vector of the wrong size.
void validate_inputs(const ModelConfig& config, const TokenIds& tokens, const TokenIds& targets);

ForwardResult forward_full(const Parameters& params, const TokenIds& tokens, const TokenIds& targets,
                           const AdapterContext& adapters = {});

// Exact gradients of the mean cross-entropy. When `stream_grads` is given it
// receives dL/d(input of block l) for every block.
Gradients backward_full(const Parameters& params, const ActivationCache& cache, const TokenIds& tokens,
                        const TokenIds& targets, std::vector<Matrix>* stream_grads = nullptr);

struct PenultimateResult {
  Matrix grad;                     // n x hidden, dL/d(input of the final block)
  std::vector<Matrix> final_attn;  // last block's attention per head
  double loss = 0.0;
  std::size_t cached_scalars = 0;  // scalars held for the partial backward
};

// Runs blocks 0..L-2 without caching, then backpropagates only through the
// LM head, final norm and final block.
PenultimateResult partial_backward_penultimate(const Parameters& params, const TokenIds& tokens,
                                               const TokenIds& targets);

// Checkpoint file: magic, version, config record, tensors in declaration
// order as little-endian doubles, then optional tagged sections.
void save_checkpoint(const std::filesystem::path& path, const Parameters& params,
                     const AdapterSet* adapters = nullptr);
struct Checkpoint {
  Parameters params;
  std::optional<AdapterSet> adapters;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tokenseek
