#include "expnet/model.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "expnet/errors.hpp"
#include "expnet/ops.hpp"
#include "init.hpp"

namespace expnet {

std::string to_string(LayerKind kind) {
  return kind == LayerKind::Expansion ? "expansion" : "attention";
}

LayerKind layer_kind_from_string(const std::string& name) {
  if (name == "expansion") return LayerKind::Expansion;
  if (name == "attention" || name == "base") return LayerKind::BaselineAttention;
  throw ConfigError("unknown layer kind '" + name + "'");
}

void ModelConfig::validate() const {
  if (d_model == 0 || d_ff == 0 || d_feature == 0) throw ConfigError("model widths must be positive");
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("n_heads=" + std::to_string(n_heads) + " must divide d_model=" + std::to_string(d_model));
  }
  if (max_seq_len < 2) throw ConfigError("max_seq_len must leave room for sos and eos");
  if (vocab_size <= static_cast<std::size_t>(kEos)) throw ConfigError("vocabulary must contain the special tokens");
  if (enc_layer_kind == LayerKind::Expansion) check_placement(enc_mode, Placement::Bidirectional);
  if (dec_layer_kind == LayerKind::Expansion) check_placement(dec_mode(), Placement::Autoregressive);
}

ModelConfig ModelConfig::full_scale(std::size_t vocab_size, std::size_t d_feature) {
  ModelConfig c;
  c.d_model = 512;
  c.d_ff = 2048;
  c.n_enc_layers = 6;
  c.n_dec_layers = 6;
  c.enc_mode = {ExpansionKind::Static, 64};
  c.dec_n_e = 16;
  c.n_heads = 8;
  c.vocab_size = vocab_size;
  c.d_feature = d_feature;
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"d_ff", c.d_ff},
          {"n_enc_layers", c.n_enc_layers},
          {"n_dec_layers", c.n_dec_layers},
          {"enc_kind", to_string(c.enc_mode.kind)},
          {"enc_n_e", c.enc_mode.n_e},
          {"dec_kind", to_string(ExpansionKind::DynamicCausal)},
          {"dec_n_e", c.dec_n_e},
          {"n_heads", c.n_heads},
          {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len},
          {"d_feature", c.d_feature},
          {"enc_layer", to_string(c.enc_layer_kind)},
          {"dec_layer", to_string(c.dec_layer_kind)}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "d_model") c.d_model = value.get<std::size_t>();
      else if (key == "d_ff") c.d_ff = value.get<std::size_t>();
      else if (key == "n_enc_layers") c.n_enc_layers = value.get<std::size_t>();
      else if (key == "n_dec_layers") c.n_dec_layers = value.get<std::size_t>();
      else if (key == "enc_kind") c.enc_mode.kind = expansion_kind_from_string(value.get<std::string>());
      else if (key == "enc_n_e") c.enc_mode.n_e = value.get<std::size_t>();
      else if (key == "dec_kind") {
        const auto kind = expansion_kind_from_string(value.get<std::string>());
        check_placement({kind, 1}, Placement::Autoregressive);
      } else if (key == "dec_n_e") c.dec_n_e = value.get<std::size_t>();
      else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
      else if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
      else if (key == "max_seq_len") c.max_seq_len = value.get<std::size_t>();
      else if (key == "d_feature") c.d_feature = value.get<std::size_t>();
      else if (key == "enc_layer") c.enc_layer_kind = layer_kind_from_string(value.get<std::string>());
      else if (key == "dec_layer") c.dec_layer_kind = layer_kind_from_string(value.get<std::string>());
      else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("model config key '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

Linear Linear::init(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return {detail::fan_in_param(in, out, rng), detail::fan_in_bias(in, out, rng)};
}

Tensor Linear::operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }

void Linear::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + "weight", weight});
  out.push_back({prefix + "bias", bias});
}

LayerNormParams LayerNormParams::init(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

Tensor LayerNormParams::operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

void LayerNormParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + "gain", gain});
  out.push_back({prefix + "bias", bias});
}

Tensor FeedForward::operator()(const Tensor& x) const { return outer(relu(inner(x))); }

void FeedForward::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  inner.collect(prefix + "inner.", out);
  outer.collect(prefix + "outer.", out);
}

CaptionModel::CaptionModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model;

  input_proj_ = Linear::init(config_.d_feature, d, rng);
  for (std::size_t i = 0; i < config_.n_enc_layers; ++i) {
    EncoderLayer layer;
    layer.kind = config_.enc_layer_kind;
    layer.norm1 = LayerNormParams::init(d);
    layer.norm2 = LayerNormParams::init(d);
    if (layer.kind == LayerKind::Expansion) layer.expansion = ExpansionParams::init(d, config_.enc_mode, rng);
    else layer.self_attention = AttentionParams::init(d, config_.n_heads, rng);
    layer.ff = {Linear::init(d, config_.d_ff, rng), Linear::init(config_.d_ff, d, rng)};
    enc_layers_.push_back(std::move(layer));
  }

  token_embedding_ = detail::normal_param({config_.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  position_embedding_ = detail::normal_param({config_.max_seq_len, d}, 0.02, rng);
  for (std::size_t i = 0; i < config_.n_dec_layers; ++i) {
    DecoderLayer layer;
    layer.kind = config_.dec_layer_kind;
    layer.norm1 = LayerNormParams::init(d);
    layer.norm2 = LayerNormParams::init(d);
    layer.norm3 = LayerNormParams::init(d);
    if (layer.kind == LayerKind::Expansion) layer.expansion = ExpansionParams::init(d, config_.dec_mode(), rng);
    else layer.self_attention = AttentionParams::init(d, config_.n_heads, rng);
    layer.cross_attention = AttentionParams::init(d, config_.n_heads, rng);
    layer.ff = {Linear::init(d, config_.d_ff, rng), Linear::init(config_.d_ff, d, rng)};
    dec_layers_.push_back(std::move(layer));
  }
  final_norm_ = LayerNormParams::init(d);
  out_proj_ = Linear::init(d, config_.vocab_size, rng);
}

std::vector<NamedTensor> CaptionModel::named_parameters() const {
  std::vector<NamedTensor> out;
  input_proj_.collect("encoder.input.", out);
  for (std::size_t i = 0; i < enc_layers_.size(); ++i) {
    const auto& layer = enc_layers_[i];
    const std::string p = "encoder.layer" + std::to_string(i) + ".";
    layer.norm1.collect(p + "norm1.", out);
    if (layer.kind == LayerKind::Expansion) layer.expansion.collect(p + "expansion.", out);
    else layer.self_attention.collect(p + "self_attention.", out);
    layer.norm2.collect(p + "norm2.", out);
    layer.ff.collect(p + "ff.", out);
  }
  out.push_back({"decoder.token_embedding", token_embedding_});
  out.push_back({"decoder.position_embedding", position_embedding_});
  for (std::size_t i = 0; i < dec_layers_.size(); ++i) {
    const auto& layer = dec_layers_[i];
    const std::string p = "decoder.layer" + std::to_string(i) + ".";
    layer.norm1.collect(p + "norm1.", out);
    if (layer.kind == LayerKind::Expansion) layer.expansion.collect(p + "expansion.", out);
    else layer.self_attention.collect(p + "self_attention.", out);
    layer.norm2.collect(p + "norm2.", out);
    layer.cross_attention.collect(p + "cross_attention.", out);
    layer.norm3.collect(p + "norm3.", out);
    layer.ff.collect(p + "ff.", out);
  }
  final_norm_.collect("decoder.final_norm.", out);
  out_proj_.collect("decoder.output.", out);
  return out;
}

std::vector<Tensor> CaptionModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named_parameters()) out.push_back(nt.tensor);
  return out;
}

std::size_t CaptionModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

void CaptionModel::load_parameters(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : tensors) {
    if (!by_name.emplace(nt.name, &nt.tensor).second) throw ConfigError("duplicate tensor '" + nt.name + "'");
  }
  auto params = named_parameters();
  if (params.size() != by_name.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(by_name.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (auto& [name, param] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError("checkpoint lacks tensor '" + name + "'");
    if (it->second->shape() != param.shape()) {
      throw ConfigError("tensor '" + name + "' has shape " + shape_to_string(it->second->shape()) +
                        ", model expects " + shape_to_string(param.shape()));
    }
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), param.mutable_data().begin());
  }
}

void CaptionModel::zero_grad() {
  for (auto& p : parameters()) p.zero_grad();
}

Tensor CaptionModel::encode(const Tensor& features) const {
  if (features.rank() != 2 || features.cols() != config_.d_feature) {
    throw DimensionError("features " + shape_to_string(features.shape()) + " vs d_feature " +
                         std::to_string(config_.d_feature));
  }
  if (features.rows() == 0) throw DimensionError("encode needs at least one feature vector");
  Tensor x = relu(input_proj_(features));
  for (const auto& layer : enc_layers_) {
    Tensor normed = layer.norm1(x);
    Tensor mixed = layer.kind == LayerKind::Expansion
                       ? expansion_layer(normed, layer.expansion)
                       : multi_head_attention(normed, normed, layer.self_attention, nullptr);
    x = add(x, mixed);
    x = add(x, layer.ff(layer.norm2(x)));
  }
  return x;
}

Tensor CaptionModel::decoder_layer(const DecoderLayer& layer, const Tensor& y, const Tensor& memory) const {
  Tensor normed = layer.norm1(y);
  Tensor mixed;
  if (layer.kind == LayerKind::Expansion) {
    mixed = expansion_layer(normed, layer.expansion);
  } else {
    const Mask causal = Mask::causal(y.rows());
    mixed = multi_head_attention(normed, normed, layer.self_attention, &causal);
  }
  Tensor z = add(y, mixed);
  Tensor w = add(z, multi_head_attention(layer.norm2(z), memory, layer.cross_attention, nullptr));
  return add(w, layer.ff(layer.norm3(w)));
}

Tensor CaptionModel::decode_logits(std::span<const int> tokens, const Tensor& memory) const {
  if (tokens.empty()) throw ContractError("decode_logits needs at least the sos token");
  if (tokens.size() > config_.max_seq_len) {
    throw LengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  }
  if (memory.rank() != 2 || memory.cols() != config_.d_model) {
    throw DimensionError("memory " + shape_to_string(memory.shape()) + " vs d_model " +
                         std::to_string(config_.d_model));
  }
  std::vector<std::size_t> ids(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= config_.vocab_size) {
      throw DimensionError("token id " + std::to_string(tokens[i]) + " outside vocabulary");
    }
    ids[i] = static_cast<std::size_t>(tokens[i]);
  }
  Tensor y = add(gather_rows(token_embedding_, ids), slice_rows(position_embedding_, 0, tokens.size()));
  for (const auto& layer : dec_layers_) y = decoder_layer(layer, y, memory);
  return out_proj_(final_norm_(y));
}

namespace {

Tensor append_rows(const Tensor& cache, const Tensor& rows) {
  return cache.defined() ? concat_rows({cache, rows}) : rows;
}

// Position t of a dynamic-causal expansion layer given every earlier
// position's cached keys, values and forward vectors.
Tensor expansion_step(const ExpansionParams& p, DecodeState::LayerCache& cache, const Tensor& x) {
  const std::size_t n_e = p.mode.n_e;
  Tensor conditioning = matmul(x, p.w_c);
  Tensor key = matmul(x, p.w_k);
  cache.keys = append_rows(cache.keys, key);
  cache.values1 = append_rows(cache.values1, matmul(x, p.w_v1));
  cache.values2 = append_rows(cache.values2, matmul(x, p.w_v2));
  Tensor selector = matmul(x, p.w_s);

  // New expanded rows see every key up to and including this position.
  std::vector<std::size_t> same(n_e, 0), bank(n_e);
  for (std::size_t j = 0; j < n_e; ++j) bank[j] = j;
  Tensor repeated = gather_rows(conditioning, same);
  Tensor queries = add(repeated, gather_rows(p.q_bank, bank));
  Tensor biases = add(repeated, gather_rows(p.b_bank, bank));
  auto forward = forward_expansion(queries, cache.keys, cache.values1, cache.values2, biases, nullptr, p.epsilon);
  cache.queries = append_rows(cache.queries, queries);
  cache.forward1 = append_rows(cache.forward1, forward.f1);
  cache.forward2 = append_rows(cache.forward2, forward.f2);

  // This position gathers from every expanded row whose origin is <= it.
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(key.cols()));
  Tensor z_row = scale(matmul(key, transpose(cache.queries)), inv_sqrt_d);
  Tensor r1 = row_normalize(relu(z_row), p.epsilon);
  Tensor r2 = row_normalize(relu(neg(z_row)), p.epsilon);
  return select(selector, matmul(r1, cache.forward1), matmul(r2, cache.forward2));
}

Tensor attend_heads(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionParams& p) {
  if (p.n_heads == 1) return matmul(scaled_dot_attention(q, k, v, nullptr), p.w_out);
  const std::size_t dh = q.cols() / p.n_heads;
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < p.n_heads; ++h) {
    const std::size_t lo = h * dh, hi = lo + dh;
    heads.push_back(scaled_dot_attention(slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi), nullptr));
  }
  return matmul(concat_cols(heads), p.w_out);
}

}  // namespace

DecodeState CaptionModel::start_decode(const Tensor& memory) const {
  NoGradGuard no_grad;
  if (memory.rank() != 2 || memory.cols() != config_.d_model) {
    throw DimensionError("memory " + shape_to_string(memory.shape()) + " vs d_model " +
                         std::to_string(config_.d_model));
  }
  auto enc = std::make_shared<DecodeState::MemoryCache>();
  enc->memory = memory.detach();
  for (const auto& layer : dec_layers_) {
    enc->cross_keys.push_back(matmul(enc->memory, layer.cross_attention.w_k));
    enc->cross_values.push_back(matmul(enc->memory, layer.cross_attention.w_v));
  }
  DecodeState state;
  state.encoder = std::move(enc);
  state.layers.resize(dec_layers_.size());
  advance(state, kSos);
  return state;
}

void CaptionModel::advance(DecodeState& state, int token) const {
  NoGradGuard no_grad;
  const std::size_t position = state.tokens.size();
  if (position >= config_.max_seq_len) {
    throw LengthError("decode state already holds max_seq_len=" + std::to_string(config_.max_seq_len) + " tokens");
  }
  if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab_size) {
    throw DimensionError("token id " + std::to_string(token) + " outside vocabulary");
  }
  if (!state.logits.empty()) {
    Tensor lp = log_softmax_rows(Tensor({1, state.logits.size()}, state.logits));
    state.log_prob += lp.at(static_cast<std::size_t>(token));
  }
  state.tokens.push_back(token);

  const std::size_t id[1] = {static_cast<std::size_t>(token)};
  Tensor y = add(gather_rows(token_embedding_, id), slice_rows(position_embedding_, position, position + 1));
  for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
    const auto& layer = dec_layers_[l];
    auto& cache = state.layers[l];
    Tensor normed = layer.norm1(y);
    Tensor mixed;
    if (layer.kind == LayerKind::Expansion) {
      mixed = expansion_step(layer.expansion, cache, normed);
    } else {
      const auto& p = layer.self_attention;
      cache.self_keys = append_rows(cache.self_keys, matmul(normed, p.w_k));
      cache.self_values = append_rows(cache.self_values, matmul(normed, p.w_v));
      mixed = attend_heads(matmul(normed, p.w_q), cache.self_keys, cache.self_values, p);
    }
    Tensor z = add(y, mixed);
    Tensor q = matmul(layer.norm2(z), layer.cross_attention.w_q);
    Tensor w = add(z, attend_heads(q, state.encoder->cross_keys[l], state.encoder->cross_values[l],
                                   layer.cross_attention));
    y = add(w, layer.ff(layer.norm3(w)));
  }
  Tensor logits = out_proj_(final_norm_(y));
  state.logits.assign(logits.data().begin(), logits.data().end());
}

TokenSequence CaptionModel::greedy_decode(const Tensor& features) const {
  NoGradGuard no_grad;
  return expnet::greedy_decode(ModelScorer(*this, encode(features))).tokens;
}

TokenSequence CaptionModel::beam_search(const Tensor& features, std::size_t width) const {
  NoGradGuard no_grad;
  return expnet::beam_search(ModelScorer(*this, encode(features)), width).tokens;
}

std::vector<SampledRollout> CaptionModel::sample_decode(const Tensor& features, std::size_t k,
                                                        double temperature, std::uint64_t seed) const {
  NoGradGuard no_grad;
  return sample_rollouts(ModelScorer(*this, encode(features)), k, temperature, seed);
}

std::vector<double> ModelScorer::log_probs(const State& state) const {
  Tensor lp = log_softmax_rows(Tensor({1, state.logits.size()}, state.logits));
  return {lp.data().begin(), lp.data().end()};
}

ModelScorer::State ModelScorer::advance(const State& state, int token) const {
  State next = state;
  model_.advance(next, token);
  return next;
}

void save_model(const std::string& path, const CaptionModel& model, const nlohmann::json& extra) {
  save_checkpoint(path, model.named_parameters());
  nlohmann::json doc = extra;
  doc["model"] = to_json(model.config());
  std::ofstream out(path + ".json");
  if (!out) throw DataError("cannot write " + path + ".json");
  out << doc.dump(2) << '\n';
}

CaptionModel load_model(const std::string& path, nlohmann::json* extra) {
  std::ifstream in(path + ".json");
  if (!in) throw DataError("missing checkpoint config " + path + ".json");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cannot parse " + path + ".json: " + e.what());
  }
  if (!doc.contains("model")) throw DataError(path + ".json has no model section");
  CaptionModel model(model_config_from_json(doc["model"]), 0);
  model.load_parameters(load_checkpoint(path));
  if (extra) {
    doc.erase("model");
    *extra = std::move(doc);
  }
  return model;
}

}  // namespace expnet
