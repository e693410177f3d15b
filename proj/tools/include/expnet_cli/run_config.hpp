#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "expnet/gradcheck.hpp"
#include "expnet/model.hpp"
#include "expnet/training.hpp"

namespace expnet::cli {

/// Everything a command may read from --config. Every field has a default
/// and unknown keys are rejected at every level.
///
///   {
///     "seed": 42,              model initialization seed
///     "min_freq": 1,           vocabulary threshold used by gen-data
///     "beam": 2,               default beam width for evaluate/caption
///     "model": {...},          ModelConfig keys (vocab_size comes from the data)
///     "xe": {...},             TrainConfig keys for train-xe and ablate
///     "scst": {...},           TrainConfig keys for train-scst
///     "grad_check": {...}      step, tolerance, floor, seed, seq_len, n_regions
///   }
struct RunConfig {
  std::uint64_t seed = 42;
  std::size_t min_freq = 1;
  std::size_t beam = 2;
  ModelConfig model;
  TrainConfig xe;
  TrainConfig scst = TrainConfig::scst_defaults();
  GradCheckOptions grad_check;
};

RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json to_json(const RunConfig& config);

}  // namespace expnet::cli
