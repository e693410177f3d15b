#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "expnet/tensor.hpp"
#include "expnet/tokens.hpp"

namespace expnet {

/// One synthetic "image": an unordered set of region feature rows plus its
/// reference captions.
struct SceneSample {
  std::uint64_t id = 0;
  Tensor features;  // N x d_feature, row order carries no meaning
  std::vector<std::string> refs;
};

struct SceneObject {
  std::size_t size = 0;
  std::size_t color = 0;
  std::size_t shape = 0;

  auto operator<=>(const SceneObject&) const = default;
};

struct DatasetSpec {
  std::vector<std::string> colors{"red", "green", "blue", "yellow", "purple", "orange", "black", "white"};
  std::vector<std::string> shapes{"circle", "square", "triangle", "star", "cross", "ring", "heart", "diamond"};
  std::vector<std::string> sizes{"small", "medium", "large"};
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  double noise = 0.3;
  /// Chance that a detected object shows up as a second, independently
  /// noised feature row.
  double duplicate_prob = 0.25;
  std::size_t d_feature = 32;
  std::size_t refs_per_scene = 5;  // 1..5
  double train_fraction = 0.8;
  double val_fraction = 0.1;

  void validate() const;
};

/// Fixed per-attribute embedding vectors; an object's clean feature is the
/// concatenation [color | shape | size].
struct AttributeEmbeddings {
  std::vector<std::vector<double>> color, shape, size;

  std::vector<double> feature(const SceneObject& object) const;
};

AttributeEmbeddings make_attribute_embeddings(const DatasetSpec& spec, std::uint64_t seed);

struct Dataset {
  std::vector<SceneSample> train, val, test;
  /// Distinct objects of each scene keyed by id, for grammar checks.
  std::unordered_map<std::uint64_t, std::vector<SceneObject>> objects;
};

/// Deterministic in (n_samples, seed, spec). Ids 0..n-1; splits are
/// contiguous id ranges.
Dataset generate_dataset(std::size_t n_samples, std::uint64_t seed, const DatasetSpec& spec);

/// Reference templates, in the order they are assigned to refs:
///   0 "a small red circle and a large blue square"   (canonical order)
///   1 "there is a small red circle and a ..."
///   2 "a red circle and a blue square"                (no sizes)
///   3 canonical objects in reverse order
///   4 objects joined by "with"
std::string render_caption(const std::vector<SceneObject>& objects, std::size_t template_index,
                           const DatasetSpec& spec);

/// Objects sorted into caption order (shape, color, size).
std::vector<SceneObject> canonical_order(std::vector<SceneObject> objects);

/// A parsed object; size is absent for the size-free template.
struct ParsedObject {
  std::optional<std::size_t> size;
  std::size_t color = 0;
  std::size_t shape = 0;
};

/// Inverse of render_caption. Returns nullopt when the text is not in the
/// template grammar.
std::optional<std::vector<ParsedObject>> parse_caption(std::string_view caption, const DatasetSpec& spec);

/// Lowercases and drops punctuation, collapsing whitespace.
std::string normalize_caption(std::string_view text);

class Vocabulary {
 public:
  /// Tokens seen at least min_freq times get ids from 4 upward ordered by
  /// (frequency desc, token asc); ids 0..3 are pad/sos/eos/unk.
  static Vocabulary build(const std::vector<std::string>& captions, std::size_t min_freq);

  std::size_t size() const { return tokens_.size(); }
  std::size_t min_freq() const { return min_freq_; }
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Caption words to ids (no sos/eos).
  TokenSequence encode(std::string_view caption) const;
  /// Drops sos/pad, stops at eos.
  std::string decode(const TokenSequence& ids) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::size_t min_freq_ = 1;

  void index();
};

/// [sos, caption..., eos] truncated so the result fits max_len.
TokenSequence frame_caption(const TokenSequence& words, std::size_t max_len);

// Feature container:
//   "EXPF" | version u32 | image count u64 |
//   per image: id u64 | N u32 | d u32 | N*d f32, all little-endian.
inline constexpr char kFeatureMagic[4] = {'E', 'X', 'P', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

std::string encode_features(const std::vector<SceneSample>& samples);
std::vector<SceneSample> decode_features(std::string_view bytes);
void write_features(const std::string& path, const std::vector<SceneSample>& samples);
std::vector<SceneSample> load_features(const std::string& path);

/// JSON-lines dataset file: {"id", "features": [[...]], "refs": [...]} per line.
void write_jsonl(const std::string& path, const std::vector<SceneSample>& samples);
std::vector<SceneSample> read_jsonl(const std::string& path);

}  // namespace expnet
