#include "expnet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <unordered_map>

#include "expnet/errors.hpp"
#include "expnet/ops.hpp"

namespace expnet {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be at least 1");
  if (anneal_every_epochs < 1) throw ConfigError("anneal_every_epochs must be at least 1");
  if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
  if (!(anneal_factor > 0.0) || anneal_factor > 1.0) throw ConfigError("anneal_factor must be in (0, 1]");
  if (scst_k < 2) throw ConfigError("scst_k must be at least 2");
  if (sample_temperature < 0.0) throw ConfigError("sample_temperature must be nonnegative");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(opt_eps > 0.0)) throw ConfigError("opt_eps must be positive");
  if (clip_norm < 0.0) throw ConfigError("clip_norm must be nonnegative");
  if (fine_tune && (fine_tune_batch == 0 || !(fine_tune_lr > 0.0))) {
    throw ConfigError("fine-tune phase needs a positive batch size and learning rate");
  }
}

TrainConfig TrainConfig::scst_defaults() {
  TrainConfig c;
  c.peak_lr /= 10.0;
  c.epochs = 10;
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"peak_lr", c.peak_lr},
          {"warmup_steps", c.warmup_steps},
          {"anneal_factor", c.anneal_factor},
          {"anneal_every_epochs", c.anneal_every_epochs},
          {"epochs", c.epochs},
          {"scst_k", c.scst_k},
          {"sample_temperature", c.sample_temperature},
          {"seed", c.seed},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"opt_eps", c.opt_eps},
          {"clip_norm", c.clip_norm},
          {"patience", c.patience},
          {"fine_tune", c.fine_tune},
          {"fine_tune_epochs", c.fine_tune_epochs},
          {"fine_tune_batch", c.fine_tune_batch},
          {"fine_tune_lr", c.fine_tune_lr}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "peak_lr") c.peak_lr = value.get<double>();
      else if (key == "warmup_steps") c.warmup_steps = value.get<std::size_t>();
      else if (key == "anneal_factor") c.anneal_factor = value.get<double>();
      else if (key == "anneal_every_epochs") c.anneal_every_epochs = value.get<std::size_t>();
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "scst_k") c.scst_k = value.get<std::size_t>();
      else if (key == "sample_temperature") c.sample_temperature = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "opt_eps") c.opt_eps = value.get<double>();
      else if (key == "clip_norm") c.clip_norm = value.get<double>();
      else if (key == "patience") c.patience = value.get<std::size_t>();
      else if (key == "fine_tune") c.fine_tune = value.get<bool>();
      else if (key == "fine_tune_epochs") c.fine_tune_epochs = value.get<std::size_t>();
      else if (key == "fine_tune_batch") c.fine_tune_batch = value.get<std::size_t>();
      else if (key == "fine_tune_lr") c.fine_tune_lr = value.get<double>();
      else throw ConfigError("unknown training config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad training config value: ") + e.what());
  }
  c.validate();
  return c;
}

Tensor xe_loss(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || logits.rows() != targets.size()) {
    throw DimensionError("xe_loss: logits " + shape_to_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  std::vector<std::size_t> rows, columns;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] == kPad) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= logits.cols()) {
      throw DimensionError("xe_loss: target id " + std::to_string(targets[t]) + " outside vocabulary");
    }
    rows.push_back(t);
    columns.push_back(static_cast<std::size_t>(targets[t]));
  }
  if (rows.empty()) throw ContractError("xe_loss: every target is padding");
  Tensor lp = log_softmax_rows(logits);
  if (rows.size() != targets.size()) lp = gather_rows(lp, rows);
  return neg(mean(pick(lp, columns)));
}

double scst_baseline(std::span<const double> rewards, std::size_t i) {
  const std::size_t k = rewards.size();
  if (k < 2) throw ConfigError("scst_baseline needs at least 2 rewards");
  if (i >= k) throw DimensionError("scst_baseline: index out of range");
  double others = 0.0;
  for (std::size_t j = 0; j < k; ++j)
    if (j != i) others += rewards[j];
  return others / static_cast<double>(k);
}

Tensor scst_loss(const std::vector<Tensor>& sequence_log_probs, std::span<const double> rewards) {
  if (sequence_log_probs.size() != rewards.size()) {
    throw DimensionError("scst_loss: " + std::to_string(sequence_log_probs.size()) + " samples vs " +
                         std::to_string(rewards.size()) + " rewards");
  }
  const std::size_t k = rewards.size();
  Tensor total;
  for (std::size_t i = 0; i < k; ++i) {
    const double advantage = rewards[i] - scst_baseline(rewards, i);
    Tensor term = scale(sequence_log_probs[i], -advantage / static_cast<double>(k));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

double lr_at(std::size_t step, std::size_t epoch, const TrainConfig& c) {
  if (step < c.warmup_steps) {
    return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  }
  return c.peak_lr * std::pow(c.anneal_factor, static_cast<double>(epoch / c.anneal_every_epochs));
}

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

std::vector<NamedTensor> Adam::state(const std::vector<std::string>& names) const {
  if (names.size() != params_.size()) throw DimensionError("Adam::state: name count mismatch");
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({"adam.m." + names[i], Tensor(params_[i].shape(), m_[i])});
    out.push_back({"adam.v." + names[i], Tensor(params_[i].shape(), v_[i])});
  }
  return out;
}

void Adam::load_state(const std::vector<NamedTensor>& state, const std::vector<std::string>& names,
                      std::size_t steps) {
  if (names.size() != params_.size()) throw DimensionError("Adam::load_state: name count mismatch");
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& nt : state) by_name[nt.name] = &nt.tensor;
  auto fetch = [&](const std::string& key, std::vector<double>& dest) {
    auto it = by_name.find(key);
    if (it == by_name.end()) throw DataError("optimizer state lacks " + key);
    if (it->second->numel() != dest.size()) throw DataError("optimizer state " + key + " has the wrong size");
    auto d = it->second->data();
    dest.assign(d.begin(), d.end());
  };
  for (std::size_t i = 0; i < params_.size(); ++i) {
    fetch("adam.m." + names[i], m_[i]);
    fetch("adam.v." + names[i], v_[i]);
  }
  t_ = steps;
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto p : params)
      if (p.has_grad())
        for (double& g : p.mutable_grad()) g *= factor;
  }
  return norm;
}

TeacherForcing teacher_forcing(const SceneSample& sample, const Vocabulary& vocab, std::size_t max_len) {
  if (sample.refs.empty()) throw DataError("sample " + std::to_string(sample.id) + " has no reference caption");
  const auto framed = frame_caption(vocab.encode(sample.refs.front()), max_len + 1);
  TeacherForcing tf;
  tf.input.assign(framed.begin(), framed.end() - 1);
  tf.target.assign(framed.begin() + 1, framed.end());
  return tf;
}

std::vector<std::vector<Caption>> reference_words(const std::vector<SceneSample>& samples) {
  std::vector<std::vector<Caption>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    std::vector<Caption> refs;
    for (const auto& r : s.refs) refs.push_back(split_words(normalize_caption(r)));
    out.push_back(std::move(refs));
  }
  return out;
}

namespace {

struct TeacherForcedScore {
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
};

TeacherForcedScore teacher_forced_pass(const CaptionModel& model, const std::vector<SceneSample>& samples,
                                       const Vocabulary& vocab) {
  NoGradGuard no_grad;
  TeacherForcedScore score;
  for (const auto& s : samples) {
    const auto tf = teacher_forcing(s, vocab, model.config().max_seq_len);
    Tensor logits = model.decode_logits(tf.input, model.encode(s.features));
    score.loss += xe_loss(logits, tf.target).item();
    const std::size_t v = logits.cols();
    auto d = logits.data();
    for (std::size_t t = 0; t < tf.target.size(); ++t) {
      if (tf.target[t] == kPad) continue;
      const auto row = d.subspan(t * v, v);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      score.correct += best == tf.target[t] ? 1 : 0;
      ++score.total;
    }
  }
  if (!samples.empty()) score.loss /= static_cast<double>(samples.size());
  return score;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t x = a ^ (b * 0x9e3779b97f4a7c15ULL) ^ (c * 0xc2b2ae3d27d4eb4fULL);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

std::vector<NamedTensor> snapshot(const CaptionModel& model) {
  auto params = model.named_parameters();
  for (auto& p : params) p.tensor = p.tensor.detach();
  return params;
}

std::vector<std::string> parameter_names(const CaptionModel& model) {
  std::vector<std::string> names;
  for (const auto& p : model.named_parameters()) names.push_back(p.name);
  return names;
}

std::vector<NamedTensor> with_prefix(const std::vector<NamedTensor>& src, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& nt : src) out.push_back({prefix + nt.name, nt.tensor});
  return out;
}

std::vector<NamedTensor> strip_prefix(const std::vector<NamedTensor>& src, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& nt : src)
    if (nt.name.rfind(prefix, 0) == 0) out.push_back({nt.name.substr(prefix.size()), nt.tensor});
  return out;
}

struct ResumedState {
  TrainerProgress progress;
  std::vector<NamedTensor> best;
};

ResumedState load_trainer_state(const std::string& path, CaptionModel& model, Adam& optimizer,
                                const std::string& stage) {
  std::ifstream in(path + ".json");
  if (!in) throw DataError("missing trainer state " + path + ".json");
  nlohmann::json doc;
  ResumedState out;
  try {
    doc = nlohmann::json::parse(in);
    const auto& t = doc.at("trainer");
    out.progress.stage = t.at("stage").get<std::string>();
    out.progress.epochs_done = t.at("epochs_done").get<std::size_t>();
    out.progress.global_step = t.at("global_step").get<std::size_t>();
    out.progress.best_epoch = t.at("best_epoch").get<std::size_t>();
    out.progress.best_score = t.at("best_score").get<double>();
    out.progress.stale_epochs = t.at("stale_epochs").get<std::size_t>();
    const auto adam_steps = t.at("adam_steps").get<std::size_t>();
    if (out.progress.stage != stage) {
      throw ConfigError("trainer state at " + path + " belongs to stage '" + out.progress.stage + "', not '" + stage + "'");
    }
    if (model_config_from_json(doc.at("model")) != model.config()) {
      throw ConfigError("trainer state at " + path + " was written for a different model config");
    }
    const auto tensors = load_checkpoint(path);
    model.load_parameters(strip_prefix(tensors, "model."));
    out.best = strip_prefix(tensors, "best.");
    optimizer.load_state(tensors, parameter_names(model), adam_steps);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed trainer state " + path + ".json: " + e.what());
  }
  return out;
}

using SampleObjective = std::function<Tensor(const SceneSample&, std::size_t epoch)>;

// Shared epoch loop of both training stages. `score` maps a validation
// evaluation to a number where higher is better.
TrainResult run_training(CaptionModel& model, const TrainingData& data, const TrainConfig& config,
                         const TrainHooks& hooks, const std::string& stage, const SampleObjective& objective,
                         const std::function<double(const Evaluation&)>& score, const NGramStats* val_idf) {
  config.validate();
  if (data.train.empty()) throw ConfigError("training split is empty");
  if (data.val.empty()) throw ConfigError("validation split is empty");
  if (data.vocab.size() != model.config().vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(data.vocab.size()) + " tokens but the model expects " +
                      std::to_string(model.config().vocab_size));
  }

  const auto params = model.parameters();
  const auto names = parameter_names(model);
  Adam optimizer(params, config.beta1, config.beta2, config.opt_eps);
  TrainerProgress progress;
  progress.stage = stage;
  progress.best_score = -std::numeric_limits<double>::infinity();
  std::vector<NamedTensor> best = snapshot(model);
  if (!hooks.resume_path.empty()) {
    auto resumed = load_trainer_state(hooks.resume_path, model, optimizer, stage);
    progress = resumed.progress;
    best = std::move(resumed.best);
  }

  TrainResult result;
  const std::size_t total_epochs = config.epochs + (config.fine_tune ? config.fine_tune_epochs : 0);
  std::vector<std::size_t> order(data.train.size());
  for (std::size_t epoch = progress.epochs_done; epoch < total_epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const bool fine = epoch >= config.epochs;
    const std::size_t batch = fine ? config.fine_tune_batch : config.batch_size;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(config.seed + epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    double lr = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t end = std::min(order.size(), begin + batch);
      const double inv = 1.0 / static_cast<double>(end - begin);
      model.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        Tensor loss = objective(data.train[order[i]], epoch);
        batch_loss += loss.item();
        backward(scale(loss, inv));
      }
      ++progress.global_step;
      lr = fine ? config.fine_tune_lr : lr_at(progress.global_step, epoch, config);
      if (config.clip_norm > 0.0) clip_grad_norm(params, config.clip_norm);
      optimizer.step(lr);
      result.step_losses.push_back(batch_loss * inv);
      epoch_loss += batch_loss;
    }
    model.zero_grad();

    const auto eval = evaluate(model, data.val, data.vocab, 1, val_idf);
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.split = "val";
    m.loss = eval.loss;
    m.train_loss = epoch_loss / static_cast<double>(order.size());
    m.accuracy = eval.accuracy;
    m.cider_d = eval.cider_d;
    m.bleu1 = eval.bleu1;
    m.bleu4 = eval.bleu4;
    m.lr = lr;
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    const double s = score(eval);
    if (s > progress.best_score) {
      progress.best_score = s;
      progress.best_epoch = m.epoch;
      progress.stale_epochs = 0;
      best = snapshot(model);
    } else {
      ++progress.stale_epochs;
    }
    progress.epochs_done = epoch + 1;
    result.epochs.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m);
    if (!hooks.state_path.empty()) save_trainer_state(hooks.state_path, model, optimizer, best, progress);
    if (config.patience > 0 && progress.stale_epochs >= config.patience) {
      result.stopped_early = true;
      break;
    }
  }
  model.load_parameters(best);
  result.best_epoch = progress.best_epoch;
  result.best_score = progress.best_score;
  return result;
}

}  // namespace

Evaluation evaluate(const CaptionModel& model, const std::vector<SceneSample>& samples, const Vocabulary& vocab,
                    std::size_t beam, const NGramStats* idf) {
  if (beam < 1) throw ConfigError("beam width must be at least 1");
  Evaluation out;
  if (samples.empty()) return out;
  const auto tf = teacher_forced_pass(model, samples, vocab);
  out.loss = tf.loss;
  out.accuracy = tf.total ? static_cast<double>(tf.correct) / static_cast<double>(tf.total) : 0.0;

  const auto refs = reference_words(samples);
  NGramStats own;
  if (!idf) {
    own = build_idf(refs);
    idf = &own;
  }
  std::vector<Caption> candidates;
  double cider = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto tokens = beam == 1 ? model.greedy_decode(samples[i].features)
                                  : model.beam_search(samples[i].features, beam);
    candidates.push_back(split_words(vocab.decode(tokens)));
    cider += cider_d(candidates.back(), refs[i], *idf);
  }
  out.cider_d = cider / static_cast<double>(samples.size());
  out.bleu1 = corpus_bleu(candidates, refs, 1);
  out.bleu4 = corpus_bleu(candidates, refs, 4);
  return out;
}

double teacher_forced_accuracy(const CaptionModel& model, const std::vector<SceneSample>& samples,
                               const Vocabulary& vocab) {
  const auto tf = teacher_forced_pass(model, samples, vocab);
  return tf.total ? static_cast<double>(tf.correct) / static_cast<double>(tf.total) : 0.0;
}

nlohmann::json EpochMetrics::to_json() const {
  return {{"epoch", epoch},   {"split", split},       {"loss", loss},   {"train_loss", train_loss},
          {"accuracy", accuracy}, {"cider_d", cider_d}, {"bleu1", bleu1}, {"bleu4", bleu4},
          {"lr", lr},         {"wall_seconds", wall_seconds}};
}

TrainResult train_xe(CaptionModel& model, const TrainingData& data, const TrainConfig& config,
                     const TrainHooks& hooks) {
  const std::size_t max_len = model.config().max_seq_len;
  std::unordered_map<std::uint64_t, TeacherForcing> prepared;
  for (const auto& s : data.train) prepared.emplace(s.id, teacher_forcing(s, data.vocab, max_len));
  auto objective = [&](const SceneSample& s, std::size_t) {
    const auto& tf = prepared.at(s.id);
    return xe_loss(model.decode_logits(tf.input, model.encode(s.features)), tf.target);
  };
  return run_training(model, data, config, hooks, "xe", objective, [](const Evaluation& e) { return -e.loss; },
                      nullptr);
}

TrainResult train_scst(CaptionModel& model, const TrainingData& data, const TrainConfig& config,
                       const NGramStats* idf, const TrainHooks& hooks) {
  if (!idf || idf->corpus_size == 0) throw ConfigError("SCST needs a CIDEr-D idf table");
  std::unordered_map<std::uint64_t, std::vector<Caption>> refs;
  {
    const auto words = reference_words(data.train);
    for (std::size_t i = 0; i < data.train.size(); ++i) refs.emplace(data.train[i].id, words[i]);
  }
  auto objective = [&](const SceneSample& s, std::size_t epoch) {
    const auto rollouts = model.sample_decode(s.features, config.scst_k, config.sample_temperature,
                                              mix_seed(config.seed, epoch, s.id));
    std::vector<double> rewards;
    for (const auto& r : rollouts) rewards.push_back(cider_d(split_words(data.vocab.decode(r.tokens)), refs.at(s.id), *idf));

    Tensor memory = model.encode(s.features);
    std::vector<Tensor> log_probs;
    for (const auto& r : rollouts) {
      const std::span<const int> tokens(r.tokens);
      Tensor lp = log_softmax_rows(model.decode_logits(tokens.first(tokens.size() - 1), memory));
      std::vector<std::size_t> next(tokens.begin() + 1, tokens.end());
      log_probs.push_back(sum(pick(lp, next)));
    }
    return scst_loss(log_probs, rewards);
  };
  return run_training(model, data, config, hooks, "scst", objective, [](const Evaluation& e) { return e.cider_d; },
                      idf);
}

void save_trainer_state(const std::string& path, const CaptionModel& model, const Adam& optimizer,
                        const std::vector<NamedTensor>& best_parameters, const TrainerProgress& progress) {
  auto tensors = with_prefix(model.named_parameters(), "model.");
  const auto best = with_prefix(best_parameters, "best.");
  tensors.insert(tensors.end(), best.begin(), best.end());
  const auto moments = optimizer.state(parameter_names(model));
  tensors.insert(tensors.end(), moments.begin(), moments.end());
  save_checkpoint(path, tensors);

  nlohmann::json doc;
  doc["model"] = to_json(model.config());
  doc["trainer"] = {{"stage", progress.stage},
                    {"epochs_done", progress.epochs_done},
                    {"global_step", progress.global_step},
                    {"best_epoch", progress.best_epoch},
                    {"best_score", progress.best_score},
                    {"stale_epochs", progress.stale_epochs},
                    {"adam_steps", optimizer.steps()}};
  std::ofstream out(path + ".json", std::ios::trunc);
  if (!out) throw DataError("cannot write " + path + ".json");
  out << doc.dump(2) << '\n';
}

}  // namespace expnet
