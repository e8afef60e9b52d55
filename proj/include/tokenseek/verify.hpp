// SPDX-License-Identifier: Apache-2.0
//
// Verification oracles. Everything here is an independent, deliberately
// plain re-derivation of the model math in original token order; it shares
// only the matrix kernels with the library and is used by the test suites and
// the gradcheck command.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "tokenseek/ditcher.hpp"
#include "tokenseek/lora.hpp"
#include "tokenseek/model.hpp"

namespace tokenseek::verify {

// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero gradients from
// turning rounding noise of the difference quotient into large ratios.
inline constexpr double kRelErrFloor = 1e-4;
double relative_error(double a, double b, double floor = kRelErrFloor);

struct CheckStats {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst;  // tensor[index] with the largest relative error
  std::size_t checked = 0;
};

// Central differences of `loss` with respect to every parameter scalar.
CheckStats finite_difference_check(const Parameters& params, const Gradients& analytic,
                                   const std::function<double(const Parameters&)>& loss, double step = 1e-5);
CheckStats finite_difference_check(const AdapterSet& adapters, const AdapterGradients& analytic,
                                   const std::function<double(const AdapterSet&)>& loss, double step = 1e-5);

// Element-wise comparison of two gradient sets.
CheckStats compare(const Parameters& a, const Parameters& b);
CheckStats compare(const AdapterSet& a, const AdapterSet& b);

// The ditched loss as a function of the parameters: unselected-token hidden
// states and keys/values are pinned to the values computed from `base`
// (and `base_adapters`), and unselected positions contribute their base loss.
class FrozenDitchedLoss {
 public:
  FrozenDitchedLoss(const Parameters& base, const AdapterSet* base_adapters, TokenIds tokens, TokenIds targets,
                    SelectionMask mask);
  double operator()(const Parameters& params, const AdapterSet* adapters = nullptr) const;

 private:
  struct Pinned {
    std::vector<Matrix> x_in, k, v;
    std::vector<double> row_loss;
  };
  TokenIds tokens_, targets_;
  SelectionMask mask_;
  Pinned pinned_;
};

// Plain full loss in original order (no caches), for cross-checking forward paths.
double reference_loss(const Parameters& params, const AdapterSet* adapters, const TokenIds& tokens,
                      const TokenIds& targets);

struct OracleGradients {
  Gradients backbone;
  AdapterGradients adapters;
};

// Stop-gradient oracle: a straightforward full-graph backward that zeroes the
// upstream gradient of every unselected row at each block boundary and of
// unselected keys/values inside attention. With every token selected it is a
// plain full backward. Dropout is not supported (adapters must use p = 0).
OracleGradients stopgrad_gradients(const Parameters& params, const AdapterSet* adapters, const TokenIds& tokens,
                                   const TokenIds& targets, const SelectionMask& mask);

// The gradient suite behind the gradcheck command: central differences for the
// full, ditched and adapter gradients, then the stop-gradient oracle over
// random masks for the backbone and for adapters.
struct SuiteCheck {
  std::string name;
  CheckStats stats;
  double tolerance = 0.0;  // on max_rel_err
  bool pass() const { return stats.max_rel_err <= tolerance; }
};

struct SuiteResult {
  std::vector<SuiteCheck> checks;
  bool pass() const;
};

// "tiny" or "small"; throws std::invalid_argument otherwise.
ModelConfig gradcheck_config(const std::string& size);

SuiteResult gradcheck_suite(const ModelConfig& config, std::uint64_t seed, std::size_t oracle_masks,
                            double fd_tolerance = 1e-6, double oracle_tolerance = 1e-10);

}  // namespace tokenseek::verify
