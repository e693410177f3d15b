#pragma once

// Small synthetic datasets and model configurations shared by the slower tests.

#include <cstdint>
#include <string>
#include <vector>

#include "expnet/data.hpp"
#include "expnet/model.hpp"
#include "expnet/training.hpp"

namespace fixture {

inline expnet::DatasetSpec small_spec() {
  expnet::DatasetSpec spec;
  spec.d_feature = 12;
  spec.max_objects = 2;
  return spec;
}

inline expnet::TrainingData small_training_data(std::size_t n, std::uint64_t seed) {
  const auto ds = expnet::generate_dataset(n, seed, small_spec());
  expnet::TrainingData out;
  out.train = ds.train;
  out.val = ds.val;
  std::vector<std::string> captions;
  for (const auto& s : ds.train) captions.insert(captions.end(), s.refs.begin(), s.refs.end());
  out.vocab = expnet::Vocabulary::build(captions, 1);
  return out;
}

inline expnet::ModelConfig small_model_config(const expnet::TrainingData& data) {
  expnet::ModelConfig c;
  c.d_model = 16;
  c.d_ff = 32;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.enc_mode = {expnet::ExpansionKind::Static, 4};
  c.dec_n_e = 2;
  c.n_heads = 2;
  c.vocab_size = data.vocab.size();
  c.max_seq_len = 14;
  c.d_feature = data.train.front().features.cols();
  return c;
}

inline expnet::TrainConfig quick_train_config(std::size_t epochs) {
  expnet::TrainConfig c;
  c.batch_size = 8;
  c.warmup_steps = 10;
  c.epochs = epochs;
  c.peak_lr = 3e-3;
  c.seed = 5;
  return c;
}

}  // namespace fixture
