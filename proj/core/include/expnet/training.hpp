#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "expnet/checkpoint.hpp"
#include "expnet/data.hpp"
#include "expnet/metrics.hpp"
#include "expnet/model.hpp"
#include "expnet/tensor.hpp"

namespace expnet {

struct TrainConfig {
  std::size_t batch_size = 16;
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 200;
  double anneal_factor = 0.8;
  std::size_t anneal_every_epochs = 2;
  std::size_t epochs = 20;
  std::size_t scst_k = 5;
  double sample_temperature = 1.0;
  std::uint64_t seed = 42;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double opt_eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  /// Stop after this many epochs without a validation improvement; 0 = never.
  std::size_t patience = 0;
  /// Optional trailing phase at a small fixed learning rate.
  bool fine_tune = false;
  std::size_t fine_tune_epochs = 2;
  std::size_t fine_tune_batch = 10;
  double fine_tune_lr = 1e-5;

  void validate() const;

  /// Defaults for the SCST stage: same schedule with a tenth of the XE peak and 10 epochs.
  static TrainConfig scst_defaults();

  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& config);
/// Rejects unknown keys; missing keys keep `base` values.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits),
/// skipping pad targets. All-pad targets are a ContractError.
Tensor xe_loss(const Tensor& logits, std::span<const int> targets);

/// b_i = (1/K) * sum over j != i of rewards[j]. The divisor is K, so the
/// baseline sits below the mean of the other samples by a factor (K-1)/K.
double scst_baseline(std::span<const double> rewards, std::size_t i);

/// -(1/K) * sum_i (r_i - b_i) * sequence_log_probs[i], where each entry is a
/// scalar tensor holding one sample's summed token log-probability.
Tensor scst_loss(const std::vector<Tensor>& sequence_log_probs, std::span<const double> rewards);

/// Warmup is linear in `step` (1-based); afterwards the rate is
/// peak * anneal_factor^floor(epoch / anneal_every_epochs).
double lr_at(std::size_t step, std::size_t epoch, const TrainConfig& config);

class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1, double beta2, double eps);

  /// Applies one update from the params' current grads (missing grads count
  /// as zero).
  void step(double lr);
  std::size_t steps() const { return t_; }

  /// Moments as named tensors, for resumable checkpoints.
  std::vector<NamedTensor> state(const std::vector<std::string>& names) const;
  void load_state(const std::vector<NamedTensor>& state, const std::vector<std::string>& names, std::size_t steps);

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Scales all grads so their joint L2 norm is at most max_norm. Returns the
/// norm before scaling.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

/// Source tokens and targets for teacher forcing on a framed caption
/// [sos, w..., eos]: input drops the last token, target drops the first.
struct TeacherForcing {
  TokenSequence input;
  TokenSequence target;
};
TeacherForcing teacher_forcing(const SceneSample& sample, const Vocabulary& vocab, std::size_t max_len);

struct TrainingData {
  std::vector<SceneSample> train;
  std::vector<SceneSample> val;
  Vocabulary vocab;
};

/// Reference sets of `samples`, normalized and split into words.
std::vector<std::vector<Caption>> reference_words(const std::vector<SceneSample>& samples);

struct Evaluation {
  double loss = 0.0;      // teacher-forced XE on refs[0]
  double accuracy = 0.0;  // teacher-forced next-token accuracy on refs[0]
  double cider_d = 0.0;   // raw scale, decoded captions vs all refs
  double bleu1 = 0.0;
  double bleu4 = 0.0;
};

/// Decodes every sample with `beam` (1 = greedy) and scores against its refs.
/// CIDEr-D uses `idf` when given, else idf built from the samples' own refs.
Evaluation evaluate(const CaptionModel& model, const std::vector<SceneSample>& samples, const Vocabulary& vocab,
                    std::size_t beam = 1, const NGramStats* idf = nullptr);

double teacher_forced_accuracy(const CaptionModel& model, const std::vector<SceneSample>& samples,
                               const Vocabulary& vocab);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;        // teacher-forced XE on the evaluated split
  double train_loss = 0.0;  // mean per-sample training objective of the epoch
  double accuracy = 0.0;
  double cider_d = 0.0;
  double bleu1 = 0.0;
  double bleu4 = 0.0;
  double lr = 0.0;  // rate at the epoch's last step
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

struct TrainHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  /// When set, full trainer state is written here after every epoch.
  std::string state_path;
  /// When set, training starts from this trainer state.
  std::string resume_path;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::vector<double> step_losses;
  std::size_t best_epoch = 0;
  double best_score = 0.0;
  bool stopped_early = false;
};

/// Cross-entropy training with teacher forcing on each sample's first ref.
/// On return the model holds the parameters of the best validation epoch
/// (lowest validation loss).
TrainResult train_xe(CaptionModel& model, const TrainingData& data, const TrainConfig& config,
                     const TrainHooks& hooks = {});

/// Self-critical training with K sampled rollouts per image, CIDEr-D reward
/// against all refs using `idf`. On return the model holds the parameters of
/// the best validation epoch (highest greedy CIDEr-D).
TrainResult train_scst(CaptionModel& model, const TrainingData& data, const TrainConfig& config,
                       const NGramStats* idf, const TrainHooks& hooks = {});

struct TrainerProgress {
  std::string stage;  // "xe" or "scst"
  std::size_t epochs_done = 0;
  std::size_t global_step = 0;
  std::size_t best_epoch = 0;
  double best_score = 0.0;
  std::size_t stale_epochs = 0;
};

/// Writes model parameters, optimizer moments and loop progress to `path`
/// (binary) and `path + ".json"`. train_xe/train_scst resume from this.
void save_trainer_state(const std::string& path, const CaptionModel& model, const Adam& optimizer,
                        const std::vector<NamedTensor>& best_parameters, const TrainerProgress& progress);

}  // namespace expnet
