#include "expnet/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "binary_io.hpp"
#include "expnet/errors.hpp"
#include "expnet/metrics.hpp"

namespace expnet {

void DatasetSpec::validate() const {
  if (colors.empty() || shapes.empty() || sizes.empty()) throw ConfigError("attribute sets must be non-empty");
  if (min_objects == 0 || min_objects > max_objects) throw ConfigError("objects range must satisfy 1 <= min <= max");
  if (max_objects > colors.size() * shapes.size()) throw ConfigError("more objects per scene than distinct color/shape pairs");
  if (d_feature < 3) throw ConfigError("d_feature must be at least 3");
  if (refs_per_scene < 1 || refs_per_scene > 5) throw ConfigError("refs_per_scene must be in 1..5");
  if (noise < 0.0 || duplicate_prob < 0.0 || duplicate_prob > 1.0) throw ConfigError("invalid noise settings");
  if (train_fraction < 0.0 || val_fraction < 0.0 || train_fraction + val_fraction > 1.0) {
    throw ConfigError("split fractions must be nonnegative and sum to at most 1");
  }
}

std::vector<double> AttributeEmbeddings::feature(const SceneObject& object) const {
  std::vector<double> out = color.at(object.color);
  const auto& s = shape.at(object.shape);
  const auto& z = size.at(object.size);
  out.insert(out.end(), s.begin(), s.end());
  out.insert(out.end(), z.begin(), z.end());
  return out;
}

AttributeEmbeddings make_attribute_embeddings(const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t shape_dim = spec.d_feature / 3;
  const std::size_t size_dim = spec.d_feature / 3;
  const std::size_t color_dim = spec.d_feature - shape_dim - size_dim;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto table = [&](std::size_t count, std::size_t dim) {
    std::vector<std::vector<double>> t(count, std::vector<double>(dim));
    for (auto& row : t)
      for (auto& v : row) v = normal(rng);
    return t;
  };
  AttributeEmbeddings emb;
  emb.color = table(spec.colors.size(), color_dim);
  emb.shape = table(spec.shapes.size(), shape_dim);
  emb.size = table(spec.sizes.size(), size_dim);
  return emb;
}

std::vector<SceneObject> canonical_order(std::vector<SceneObject> objects) {
  std::sort(objects.begin(), objects.end(), [](const SceneObject& a, const SceneObject& b) {
    return std::tie(a.shape, a.color, a.size) < std::tie(b.shape, b.color, b.size);
  });
  return objects;
}

std::string render_caption(const std::vector<SceneObject>& objects, std::size_t template_index,
                           const DatasetSpec& spec) {
  auto ordered = canonical_order(objects);
  if (template_index == 3) std::reverse(ordered.begin(), ordered.end());
  const bool with_size = template_index != 2;
  const std::string joiner = template_index == 4 ? " with " : " and ";
  std::string out = template_index == 1 ? "there is " : "";
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    if (i) out += joiner;
    out += "a ";
    if (with_size) out += spec.sizes.at(ordered[i].size) + ' ';
    out += spec.colors.at(ordered[i].color) + ' ' + spec.shapes.at(ordered[i].shape);
  }
  return out;
}

std::optional<std::vector<ParsedObject>> parse_caption(std::string_view caption, const DatasetSpec& spec) {
  const auto words = split_words(caption);
  auto index_of = [](const std::vector<std::string>& set, const std::string& w) -> std::optional<std::size_t> {
    auto it = std::find(set.begin(), set.end(), w);
    if (it == set.end()) return std::nullopt;
    return static_cast<std::size_t>(it - set.begin());
  };
  std::size_t i = 0;
  if (words.size() >= 2 && words[0] == "there" && words[1] == "is") i = 2;
  std::vector<ParsedObject> out;
  while (true) {
    if (i >= words.size() || words[i] != "a") return std::nullopt;
    ++i;
    ParsedObject obj;
    if (i < words.size()) {
      if (auto s = index_of(spec.sizes, words[i])) {
        obj.size = *s;
        ++i;
      }
    }
    auto color = i < words.size() ? index_of(spec.colors, words[i]) : std::nullopt;
    auto shape = i + 1 < words.size() ? index_of(spec.shapes, words[i + 1]) : std::nullopt;
    if (!color || !shape) return std::nullopt;
    obj.color = *color;
    obj.shape = *shape;
    out.push_back(obj);
    i += 2;
    if (i == words.size()) return out;
    if (words[i] != "and" && words[i] != "with") return std::nullopt;
    ++i;
  }
}

Dataset generate_dataset(std::size_t n_samples, std::uint64_t seed, const DatasetSpec& spec) {
  spec.validate();
  const auto embeddings = make_attribute_embeddings(spec, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<SceneSample> all;
  Dataset out;
  all.reserve(n_samples);
  for (std::size_t n = 0; n < n_samples; ++n) {
    const std::size_t k = std::uniform_int_distribution<std::size_t>(spec.min_objects, spec.max_objects)(rng);
    std::set<std::pair<std::size_t, std::size_t>> used;
    std::vector<SceneObject> objects;
    while (objects.size() < k) {
      SceneObject o;
      o.color = std::uniform_int_distribution<std::size_t>(0, spec.colors.size() - 1)(rng);
      o.shape = std::uniform_int_distribution<std::size_t>(0, spec.shapes.size() - 1)(rng);
      o.size = std::uniform_int_distribution<std::size_t>(0, spec.sizes.size() - 1)(rng);
      if (used.insert({o.color, o.shape}).second) objects.push_back(o);
    }

    std::vector<std::vector<double>> rows;
    for (const auto& o : objects) {
      const std::size_t copies = unit(rng) < spec.duplicate_prob ? 2 : 1;
      for (std::size_t c = 0; c < copies; ++c) {
        auto row = embeddings.feature(o);
        if (spec.noise > 0.0)
          for (auto& v : row) v += spec.noise * noise(rng);
        rows.push_back(std::move(row));
      }
    }
    std::shuffle(rows.begin(), rows.end(), rng);
    std::vector<double> flat;
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());

    SceneSample sample;
    sample.id = n;
    sample.features = Tensor({rows.size(), spec.d_feature}, std::move(flat));
    for (std::size_t t = 0; t < spec.refs_per_scene; ++t) sample.refs.push_back(render_caption(objects, t, spec));
    out.objects.emplace(sample.id, canonical_order(objects));
    all.push_back(std::move(sample));
  }

  const auto n_train = static_cast<std::size_t>(static_cast<double>(n_samples) * spec.train_fraction + 0.5);
  const auto n_val = std::min(n_samples - n_train,
                              static_cast<std::size_t>(static_cast<double>(n_samples) * spec.val_fraction + 0.5));
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& dest = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    dest.push_back(std::move(all[i]));
  }
  return out;
}

std::string normalize_caption(std::string_view text) {
  std::string out;
  bool space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '<' || ch == '>') {
      if (space && !out.empty()) out += ' ';
      space = false;
      out += static_cast<char>(std::tolower(c));
    } else if (std::isspace(c)) {
      space = true;
    }
    // other punctuation is dropped
  }
  return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& captions, std::size_t min_freq) {
  if (captions.empty()) throw ContractError("cannot build a vocabulary from an empty corpus");
  std::map<std::string, std::size_t> freq;
  for (const auto& c : captions)
    for (const auto& w : split_words(normalize_caption(c))) ++freq[w];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [w, f] : freq)
    if (f >= min_freq) kept.emplace_back(w, f);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  v.min_freq_ = min_freq;
  v.tokens_ = {"<pad>", "<sos>", "<eos>", "<unk>"};
  for (const auto& [w, f] : kept) v.tokens_.push_back(w);
  v.index();
  return v;
}

void Vocabulary::index() {
  ids_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) throw ConfigError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw DimensionError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

TokenSequence Vocabulary::encode(std::string_view caption) const {
  TokenSequence out;
  for (const auto& w : split_words(normalize_caption(caption))) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(const TokenSequence& ids) const {
  Caption words;
  for (int t : ids) {
    if (t == kEos) break;
    if (t == kSos || t == kPad) continue;
    words.push_back(token(t));
  }
  return join_words(words);
}

nlohmann::json Vocabulary::to_json() const { return {{"min_freq", min_freq_}, {"tokens", tokens_}}; }

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v;
  try {
    v.min_freq_ = j.at("min_freq").get<std::size_t>();
    v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed vocabulary: ") + e.what());
  }
  const std::vector<std::string> reserved{"<pad>", "<sos>", "<eos>", "<unk>"};
  if (v.tokens_.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), v.tokens_.begin())) {
    throw DataError("vocabulary must start with the reserved tokens <pad> <sos> <eos> <unk>");
  }
  try {
    v.index();
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed vocabulary: ") + e.what());
  }
  return v;
}

TokenSequence frame_caption(const TokenSequence& words, std::size_t max_len) {
  if (max_len < 2) throw ConfigError("max_len must leave room for sos and eos");
  TokenSequence out{kSos};
  const std::size_t room = max_len - 2;
  out.insert(out.end(), words.begin(), words.begin() + static_cast<std::ptrdiff_t>(std::min(room, words.size())));
  out.push_back(kEos);
  return out;
}

std::string encode_features(const std::vector<SceneSample>& samples) {
  detail::ByteWriter w;
  w.bytes(std::string_view(kFeatureMagic, 4));
  w.u32(kFeatureVersion);
  w.u64(samples.size());
  for (const auto& s : samples) {
    w.u64(s.id);
    w.u32(static_cast<std::uint32_t>(s.features.rows()));
    w.u32(static_cast<std::uint32_t>(s.features.cols()));
    for (double v : s.features.data()) w.f32(static_cast<float>(v));
  }
  return w.buffer();
}

std::vector<SceneSample> decode_features(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4, "magic") != std::string_view(kFeatureMagic, 4)) throw FormatError("bad feature container magic", 0);
  const auto version_offset = r.offset();
  if (auto v = r.u32("version"); v != kFeatureVersion) {
    throw FormatError("unsupported feature container version " + std::to_string(v), version_offset);
  }
  const auto count = r.u64("image count");
  std::vector<SceneSample> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    SceneSample s;
    s.id = r.u64("image id");
    const std::size_t n = r.u32("region count");
    const std::size_t d = r.u32("feature width");
    if (n * d > r.remaining() / 4) r.fail("feature block of image " + std::to_string(s.id) + " exceeds file size");
    std::vector<double> data(n * d);
    for (auto& v : data) v = static_cast<double>(r.f32("feature value"));
    s.features = Tensor({n, d}, std::move(data));
    out.push_back(std::move(s));
  }
  if (!r.at_end()) r.fail("trailing bytes after last image");
  return out;
}

void write_features(const std::string& path, const std::vector<SceneSample>& samples) {
  detail::write_file_bytes(path, encode_features(samples));
}

std::vector<SceneSample> load_features(const std::string& path) {
  return decode_features(detail::read_file_bytes(path));
}

void write_jsonl(const std::string& path, const std::vector<SceneSample>& samples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& s : samples) {
    nlohmann::json rows = nlohmann::json::array();
    const std::size_t d = s.features.cols();
    auto data = s.features.data();
    for (std::size_t i = 0; i < s.features.rows(); ++i)
      rows.push_back(std::vector<double>(data.begin() + static_cast<std::ptrdiff_t>(i * d),
                                         data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d)));
    out << nlohmann::json{{"id", s.id}, {"features", rows}, {"refs", s.refs}}.dump() << '\n';
  }
}

std::vector<SceneSample> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<SceneSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SceneSample s;
      s.id = j.at("id").get<std::uint64_t>();
      const auto rows = j.at("features").get<std::vector<std::vector<double>>>();
      if (rows.empty()) throw DataError("sample without feature rows");
      std::vector<double> flat;
      for (const auto& r : rows) {
        if (r.size() != rows.front().size()) throw DataError("ragged feature matrix");
        flat.insert(flat.end(), r.begin(), r.end());
      }
      s.features = Tensor({rows.size(), rows.front().size()}, std::move(flat));
      s.refs = j.at("refs").get<std::vector<std::string>>();
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace expnet
