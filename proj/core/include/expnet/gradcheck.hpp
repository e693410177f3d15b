#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "expnet/checkpoint.hpp"
#include "expnet/model.hpp"
#include "expnet/tensor.hpp"

namespace expnet {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor of the relative error, so entries whose true
  /// gradient is ~0 are judged on absolute error.
  double floor = 1e-6;
  std::uint64_t seed = 7;
  std::size_t seq_len = 3;    // decoder input length T
  std::size_t n_regions = 2;  // feature rows N
};

struct ParameterCheck {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<ParameterCheck> parameters;
  double max_rel_error = 0.0;
  bool passed = false;
  double seconds = 0.0;
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

/// Compares the autodiff gradient of `loss` with central differences for
/// every entry of every tensor in `params`. `loss` must rebuild its graph on
/// each call.
GradCheckReport check_gradients(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& params,
                                const GradCheckOptions& options);

/// d_model=8, d_ff=16, one encoder and one decoder layer, encoder static
/// N_E=2, decoder N_E=2, vocabulary of 7.
ModelConfig tiny_model_config();

/// Gradient check of xe_loss over every model parameter on random features
/// and a random token sequence.
GradCheckReport check_model_gradients(const ModelConfig& config, const GradCheckOptions& options = {});

}  // namespace expnet
