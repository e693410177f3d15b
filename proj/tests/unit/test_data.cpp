#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "expnet/data.hpp"
#include "expnet/errors.hpp"
#include "expnet/metrics.hpp"

using namespace expnet;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("expnet_data_" + name)).string();
}

std::vector<SceneSample> all_samples(const Dataset& ds) {
  std::vector<SceneSample> out = ds.train;
  out.insert(out.end(), ds.val.begin(), ds.val.end());
  out.insert(out.end(), ds.test.begin(), ds.test.end());
  return out;
}

std::string hex_bytes(std::initializer_list<int> bytes) {
  std::string s;
  for (int b : bytes) s.push_back(static_cast<char>(b));
  return s;
}

}  // namespace

TEST(Dataset, NoiselessSingleObjectFeaturesEqualEmbedding) {
  DatasetSpec spec;
  spec.noise = 0.0;
  spec.duplicate_prob = 0.0;
  spec.max_objects = 1;
  const auto ds = generate_dataset(40, 11, spec);
  const auto emb = make_attribute_embeddings(spec, 11);
  for (const auto& s : all_samples(ds)) {
    const auto& objects = ds.objects.at(s.id);
    ASSERT_EQ(objects.size(), 1u);
    ASSERT_EQ(s.features.rows(), 1u);
    const auto expected = emb.feature(objects[0]);
    ASSERT_EQ(s.features.cols(), expected.size());
    for (std::size_t f = 0; f < expected.size(); ++f) EXPECT_EQ(s.features.at(0, f), expected[f]);
  }
}

TEST(Dataset, EmbeddingWidthsSplitFeatureVector) {
  DatasetSpec spec;
  spec.d_feature = 10;
  const auto emb = make_attribute_embeddings(spec, 1);
  EXPECT_EQ(emb.color[0].size(), 4u);
  EXPECT_EQ(emb.shape[0].size(), 3u);
  EXPECT_EQ(emb.size[0].size(), 3u);
  EXPECT_EQ(emb.feature({0, 1, 2}).size(), 10u);
}

TEST(Dataset, SameSeedIsIdenticalAndOtherSeedDiffers) {
  const auto a = generate_dataset(30, 5, DatasetSpec{});
  const auto b = generate_dataset(30, 5, DatasetSpec{});
  const auto c = generate_dataset(30, 6, DatasetSpec{});
  const auto sa = all_samples(a), sb = all_samples(b), sc = all_samples(c);
  bool differs = false;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].refs, sb[i].refs);
    EXPECT_TRUE(std::equal(sa[i].features.data().begin(), sa[i].features.data().end(),
                           sb[i].features.data().begin(), sb[i].features.data().end()));
    differs = differs || sa[i].refs != sc[i].refs;
  }
  EXPECT_TRUE(differs);
}

TEST(Dataset, EveryReferenceParsesBackToTheSceneObjects) {
  const DatasetSpec spec;
  const auto ds = generate_dataset(200, 3, spec);
  for (const auto& s : all_samples(ds)) {
    const auto& objects = ds.objects.at(s.id);
    ASSERT_EQ(s.refs.size(), spec.refs_per_scene);
    for (std::size_t t = 0; t < s.refs.size(); ++t) {
      const auto parsed = parse_caption(s.refs[t], spec);
      ASSERT_TRUE(parsed.has_value()) << s.refs[t];
      ASSERT_EQ(parsed->size(), objects.size());
      std::multiset<std::pair<std::size_t, std::size_t>> got, want;
      for (const auto& p : *parsed) {
        got.insert({p.color, p.shape});
        EXPECT_EQ(p.size.has_value(), t != 2) << s.refs[t];
      }
      for (const auto& o : objects) want.insert({o.color, o.shape});
      EXPECT_EQ(got, want) << s.refs[t];
    }
    EXPECT_EQ(s.refs[0], render_caption(objects, 0, spec));
  }
}

TEST(Dataset, CaptionTemplates) {
  const DatasetSpec spec;
  const std::vector<SceneObject> objects{{2, 0, 3}, {0, 1, 0}};  // large red star, small green circle
  EXPECT_EQ(render_caption(objects, 0, spec), "a small green circle and a large red star");
  EXPECT_EQ(render_caption(objects, 1, spec), "there is a small green circle and a large red star");
  EXPECT_EQ(render_caption(objects, 2, spec), "a green circle and a red star");
  EXPECT_EQ(render_caption(objects, 3, spec), "a large red star and a small green circle");
  EXPECT_EQ(render_caption(objects, 4, spec), "a small green circle with a large red star");
  EXPECT_FALSE(parse_caption("a red", spec).has_value());
  EXPECT_FALSE(parse_caption("a red circle or a blue star", spec).has_value());
  EXPECT_FALSE(parse_caption("", spec).has_value());
}

TEST(Dataset, SplitsAreDisjointAndSized) {
  const auto ds = generate_dataset(100, 2, DatasetSpec{});
  EXPECT_EQ(ds.train.size(), 80u);
  EXPECT_EQ(ds.val.size(), 10u);
  EXPECT_EQ(ds.test.size(), 10u);
  std::set<std::uint64_t> ids;
  for (const auto& s : all_samples(ds)) EXPECT_TRUE(ids.insert(s.id).second);
  EXPECT_EQ(ids.size(), 100u);
}

TEST(Dataset, DuplicateRowsRepeatAnObject) {
  DatasetSpec spec;
  spec.noise = 0.0;
  spec.duplicate_prob = 1.0;
  const auto ds = generate_dataset(20, 4, spec);
  for (const auto& s : all_samples(ds)) {
    EXPECT_EQ(s.features.rows(), 2 * ds.objects.at(s.id).size());
    std::multiset<std::vector<double>> rows;
    for (std::size_t r = 0; r < s.features.rows(); ++r) {
      auto d = s.features.data().subspan(r * s.features.cols(), s.features.cols());
      rows.insert(std::vector<double>(d.begin(), d.end()));
    }
    for (const auto& row : rows) EXPECT_EQ(rows.count(row), 2u);
  }
}

TEST(Dataset, SpecValidation) {
  DatasetSpec spec;
  spec.min_objects = 0;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = {};
  spec.refs_per_scene = 6;
  EXPECT_THROW(generate_dataset(10, 1, spec), ConfigError);
  spec = {};
  spec.train_fraction = 0.95;
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(Vocabulary, NormalizeCaption) {
  EXPECT_EQ(normalize_caption("  A Red, circle!  and <unk> "), "a red circle and <unk>");
  EXPECT_EQ(normalize_caption("..."), "");
}

TEST(Vocabulary, HandBuiltTable) {
  const std::vector<std::string> corpus{"a red circle", "a blue circle", "A red, square!",
                                        "a red star",   "there is a red circle", "a big red circle"};
  const auto v = Vocabulary::build(corpus, 1);
  const std::vector<std::string> expected{"<pad>", "<sos>", "<eos>", "<unk>", "a",     "red",   "circle",
                                          "big",   "blue",  "is",    "square", "star", "there"};
  EXPECT_EQ(v.tokens(), expected);
  EXPECT_EQ(v.id("red"), 5);
  EXPECT_EQ(v.id("purple"), kUnk);
  EXPECT_EQ(v.encode("A big, blue star"), (TokenSequence{4, 7, 8, 11}));
  EXPECT_EQ(v.decode({kSos, 4, 5, 6, kEos, 9}), "a red circle");
  EXPECT_THROW(v.token(13), DimensionError);

  const auto pruned = Vocabulary::build(corpus, 2);
  EXPECT_EQ(pruned.size(), 7u);
  EXPECT_EQ(pruned.id("blue"), kUnk);
  EXPECT_EQ(pruned.encode("a blue circle"), (TokenSequence{4, kUnk, 6}));
  EXPECT_THROW(Vocabulary::build({}, 1), ContractError);
}

TEST(Vocabulary, JsonRoundTripAndErrors) {
  const auto v = Vocabulary::build({"a red circle", "a blue star"}, 1);
  EXPECT_EQ(Vocabulary::from_json(v.to_json()), v);
  EXPECT_THROW(Vocabulary::from_json({{"tokens", {"<pad>"}}}), DataError);
  EXPECT_THROW(Vocabulary::from_json({{"min_freq", 1}, {"tokens", {"<sos>", "<pad>", "<eos>", "<unk>"}}}), DataError);
  EXPECT_THROW(Vocabulary::from_json({{"min_freq", 1}, {"tokens", {"<pad>", "<sos>", "<eos>", "<unk>", "a", "a"}}}),
               DataError);
}

TEST(Vocabulary, FrameCaption) {
  EXPECT_EQ(frame_caption({5, 6, 7}, 10), (TokenSequence{kSos, 5, 6, 7, kEos}));
  EXPECT_EQ(frame_caption({5, 6, 7}, 4), (TokenSequence{kSos, 5, 6, kEos}));
  EXPECT_EQ(frame_caption({}, 2), (TokenSequence{kSos, kEos}));
  EXPECT_THROW(frame_caption({5}, 1), ConfigError);
}

TEST(FeatureContainer, KnownBytes) {
  SceneSample s;
  s.id = 258;
  s.features = Tensor({1, 3}, {1.0, -2.0, 0.5});
  const std::string expected = hex_bytes({'E', 'X', 'P', 'F', 1, 0, 0, 0,                 // magic, version
                                          1, 0, 0, 0, 0, 0, 0, 0,                         // image count
                                          2, 1, 0, 0, 0, 0, 0, 0,                         // id
                                          1, 0, 0, 0, 3, 0, 0, 0,                         // regions, width
                                          0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0, 0, 0, 0, 0x3f});  // values
  EXPECT_EQ(encode_features({s}), expected);
  const auto back = decode_features(expected);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].id, 258u);
  EXPECT_EQ(back[0].features.shape(), (Shape{1, 3}));
  EXPECT_EQ(back[0].features.at(0, 1), -2.0);
}

TEST(FeatureContainer, EmptyContainer) {
  const auto bytes = encode_features({});
  EXPECT_EQ(bytes.size(), 16u);
  EXPECT_TRUE(decode_features(bytes).empty());
}

TEST(FeatureContainer, FileRoundTripAtSinglePrecision) {
  const auto ds = generate_dataset(20, 8, DatasetSpec{});
  const auto path = temp_path("round.features");
  write_features(path, ds.train);
  const auto back = load_features(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.size(), ds.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].id, ds.train[i].id);
    ASSERT_EQ(back[i].features.shape(), ds.train[i].features.shape());
    auto a = back[i].features.data();
    auto b = ds.train[i].features.data();
    for (std::size_t j = 0; j < a.size(); ++j) EXPECT_EQ(a[j], static_cast<double>(static_cast<float>(b[j])));
  }
  EXPECT_EQ(encode_features(back), encode_features(ds.train));
}

TEST(FeatureContainer, MalformedInputsReportOffsets) {
  SceneSample s;
  s.id = 1;
  s.features = Tensor({1, 3}, {1.0, 2.0, 3.0});
  const auto good = encode_features({s});

  auto bad_magic = good;
  bad_magic[0] = 'X';
  try {
    decode_features(bad_magic);
    FAIL() << "bad magic accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }

  auto bad_version = good;
  bad_version[4] = 9;
  try {
    decode_features(bad_version);
    FAIL() << "bad version accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }

  try {
    decode_features(std::string_view(good).substr(0, good.size() - 1));
    FAIL() << "truncated input accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 32u);
  }

  try {
    decode_features(std::string_view(good).substr(0, 10));
    FAIL() << "truncated header accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }

  EXPECT_THROW(decode_features(good + "x"), FormatError);
  EXPECT_THROW(load_features(temp_path("does_not_exist.features")), DataError);
}

TEST(Jsonl, RoundTripIsExact) {
  const auto ds = generate_dataset(15, 9, DatasetSpec{});
  const auto path = temp_path("round.jsonl");
  write_jsonl(path, ds.train);
  const auto back = read_jsonl(path);
  ASSERT_EQ(back.size(), ds.train.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].id, ds.train[i].id);
    EXPECT_EQ(back[i].refs, ds.train[i].refs);
    EXPECT_TRUE(std::equal(back[i].features.data().begin(), back[i].features.data().end(),
                           ds.train[i].features.data().begin(), ds.train[i].features.data().end()));
  }
  std::ofstream(path, std::ios::app) << "{\"id\": 1}\n";
  try {
    read_jsonl(path);
    FAIL() << "malformed line accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":13:"), std::string::npos) << e.what();
  }
  std::filesystem::remove(path);
}
