#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "expnet/model.hpp"
#include "expnet/training.hpp"

namespace expnet::cli {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitData = 2, kExitCheck = 3 };

/// Runs one command line. Normal output goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// One cell of an ablation grid, written "ENC" or "ENC/DEC" where each side
/// is "base" (multi-head self-attention), "staticN" or "dynamicN". The
/// decoder side defaults to base and cannot be static.
struct AblationCell {
  std::string label;
  LayerKind enc_layer = LayerKind::BaselineAttention;
  ExpansionMode enc_mode;
  LayerKind dec_layer = LayerKind::BaselineAttention;
  std::size_t dec_n_e = 0;

  /// Applies the cell on top of a base model config.
  ModelConfig apply(ModelConfig base) const;
};

std::vector<AblationCell> parse_grid(const std::string& spec);

inline constexpr const char* kAblationHeader = "encoder,decoder,n_e_enc,n_e_dec,cider_d,bleu4";

/// Train/val/test JSON-lines files plus vocab.json in `dir`.
struct DataDir {
  TrainingData data;
  std::vector<SceneSample> test;
};
DataDir load_data_dir(const std::string& dir);

}  // namespace expnet::cli
