#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "expnet/attention.hpp"
#include "expnet/checkpoint.hpp"
#include "expnet/decoding.hpp"
#include "expnet/expansion.hpp"
#include "expnet/tensor.hpp"
#include "expnet/tokens.hpp"

namespace expnet {

/// Sub-layer used by a stack: the expansion layer, or plain multi-head
/// self-attention for the baseline rows of an ablation.
enum class LayerKind { Expansion, BaselineAttention };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t n_enc_layers = 3;
  std::size_t n_dec_layers = 3;
  ExpansionMode enc_mode{ExpansionKind::Static, 16};
  std::size_t dec_n_e = 4;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 32;
  std::size_t max_seq_len = 20;
  std::size_t d_feature = 32;
  LayerKind enc_layer_kind = LayerKind::Expansion;
  LayerKind dec_layer_kind = LayerKind::Expansion;

  /// Decoder expansion is always dynamic-causal.
  ExpansionMode dec_mode() const { return {ExpansionKind::DynamicCausal, dec_n_e}; }
  void validate() const;

  /// Full-size configuration (512/2048, N=6, encoder static N_E=64, decoder N_E=16).
  static ModelConfig full_scale(std::size_t vocab_size, std::size_t d_feature);

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
/// Rejects unknown keys; missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out

  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams init(std::size_t d);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct FeedForward {
  Linear inner;
  Linear outer;

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct EncoderLayer {
  LayerKind kind = LayerKind::Expansion;
  LayerNormParams norm1, norm2;
  ExpansionParams expansion;       // kind == Expansion
  AttentionParams self_attention;  // kind == BaselineAttention
  FeedForward ff;
};

struct DecoderLayer {
  LayerKind kind = LayerKind::Expansion;
  LayerNormParams norm1, norm2, norm3;
  ExpansionParams expansion;
  AttentionParams self_attention;
  AttentionParams cross_attention;
  FeedForward ff;
};

class CaptionModel;

/// Incremental decoding state: the prefix fed so far plus every per-layer
/// activation later positions need. Exclusive to one hypothesis; copies are
/// independent except for the shared read-only encoder side.
struct DecodeState {
  struct LayerCache {
    // Expansion layers.
    Tensor keys, values1, values2;
    Tensor queries, forward1, forward2;
    // Baseline attention layers.
    Tensor self_keys, self_values;
  };
  struct MemoryCache {
    Tensor memory;
    std::vector<Tensor> cross_keys, cross_values;  // per decoder layer, projected
  };

  TokenSequence tokens;
  std::vector<LayerCache> layers;
  std::shared_ptr<const MemoryCache> encoder;
  std::vector<double> logits;  // next-token logits after the last fed token
  double log_prob = 0.0;       // cumulative log-probability of tokens[1..]
};

class CaptionModel {
 public:
  CaptionModel(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  /// Copies values into the model's parameters. Names and shapes must match
  /// exactly, otherwise ConfigError.
  void load_parameters(const std::vector<NamedTensor>& tensors);
  void zero_grad();

  /// features: N x d_feature -> memory: N x d_model.
  Tensor encode(const Tensor& features) const;
  /// tokens (starting with sos) -> T x vocab logits; row t sees tokens <= t.
  Tensor decode_logits(std::span<const int> tokens, const Tensor& memory) const;

  DecodeState start_decode(const Tensor& memory) const;
  /// Feeds `token` and refreshes state.logits. Runs without graph recording.
  void advance(DecodeState& state, int token) const;

  TokenSequence greedy_decode(const Tensor& features) const;
  TokenSequence beam_search(const Tensor& features, std::size_t width) const;
  std::vector<SampledRollout> sample_decode(const Tensor& features, std::size_t k,
                                             double temperature, std::uint64_t seed) const;

  // Direct access for tests and tools that rig specific weights.
  Linear& output_projection() { return out_proj_; }

 private:
  Tensor decoder_layer(const DecoderLayer& layer, const Tensor& y, const Tensor& memory) const;

  ModelConfig config_;
  Linear input_proj_;
  std::vector<EncoderLayer> enc_layers_;
  Tensor token_embedding_;     // vocab x d
  Tensor position_embedding_;  // max_seq_len x d
  std::vector<DecoderLayer> dec_layers_;
  LayerNormParams final_norm_;
  Linear out_proj_;
};

/// Adapts a model plus encoded memory to the generic decoders in decoding.hpp.
class ModelScorer {
 public:
  using State = DecodeState;

  ModelScorer(const CaptionModel& model, const Tensor& memory) : model_(model), memory_(memory) {}

  State start() const { return model_.start_decode(memory_); }
  std::vector<double> log_probs(const State& state) const;
  State advance(const State& state, int token) const;
  std::size_t max_length() const { return model_.config().max_seq_len; }
  std::size_t vocab_size() const { return model_.config().vocab_size; }
  int sos() const { return kSos; }
  int eos() const { return kEos; }

 private:
  const CaptionModel& model_;
  Tensor memory_;
};

/// Saves parameters to `path` and the config plus `extra` metadata to
/// `path + ".json"`.
void save_model(const std::string& path, const CaptionModel& model,
                const nlohmann::json& extra = nlohmann::json::object());
CaptionModel load_model(const std::string& path, nlohmann::json* extra = nullptr);

}  // namespace expnet
