#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <limits>
#include <random>

#include "expnet/checkpoint.hpp"
#include "expnet/errors.hpp"
#include "oracles.hpp"

using namespace expnet;

namespace {

std::string bytes_of(std::initializer_list<int> bytes) {
  std::string s;
  for (int b : bytes) s.push_back(static_cast<char>(b));
  return s;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto x = a.data();
  auto y = b.data();
  return std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

}  // namespace

TEST(Checkpoint, KnownBytes) {
  const std::vector<NamedTensor> tensors{{"w", Tensor::vector({1.0, -0.5})}};
  const std::string expected = bytes_of({'E', 'X', 'P', 'N', 1, 0, 0, 0, 1, 0, 0, 0,  // magic, version, count
                                         1, 0, 0, 0, 'w',                             // name
                                         1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0,          // rank, dims
                                         0, 0, 0, 0, 0, 0, 0xf0, 0x3f, 0, 0, 0, 0, 0, 0, 0xe0, 0xbf});
  EXPECT_EQ(encode_checkpoint(tensors), expected);
  const auto back = decode_checkpoint(expected);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].name, "w");
  EXPECT_TRUE(same_bits(back[0].tensor, tensors[0].tensor));
}

TEST(Checkpoint, FileRoundTripIsBitExact) {
  std::mt19937_64 rng(3);
  std::vector<NamedTensor> tensors{{"a.weight", oracle::random_tensor(7, 5, rng)},
                                   {"a.bias", Tensor::vector({0.1, -0.0, 1e-300})},
                                   {"scalar", Tensor::scalar(std::numeric_limits<double>::denorm_min())},
                                   {"special", Tensor::vector({std::numeric_limits<double>::infinity(),
                                                               std::numeric_limits<double>::quiet_NaN()})},
                                   {"empty", Tensor::zeros({0, 4})}};
  const auto path = (std::filesystem::temp_directory_path() / "expnet_ckpt_roundtrip.bin").string();
  save_checkpoint(path, tensors);
  const auto back = load_checkpoint(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.size(), tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    EXPECT_EQ(back[i].name, tensors[i].name);
    EXPECT_TRUE(same_bits(back[i].tensor, tensors[i].tensor)) << tensors[i].name;
  }
}

TEST(Checkpoint, MalformedInputsReportOffsets) {
  const std::vector<NamedTensor> tensors{{"w", Tensor::vector({1.0, -0.5})}};
  const auto good = encode_checkpoint(tensors);

  auto expect_offset = [](std::string_view bytes, std::uint64_t offset) {
    try {
      decode_checkpoint(bytes);
      ADD_FAILURE() << "malformed checkpoint accepted";
    } catch (const FormatError& e) {
      EXPECT_EQ(e.offset(), offset) << e.what();
    }
  };
  auto bad_magic = good;
  bad_magic[3] = 'X';
  expect_offset(bad_magic, 0);
  auto bad_version = good;
  bad_version[4] = 2;
  expect_offset(bad_version, 4);
  expect_offset(std::string_view(good).substr(0, good.size() - 3), 29);
  expect_offset(std::string_view(good).substr(0, 14), 12);
  expect_offset(good + "zz", good.size());
  auto huge = good;
  huge[21] = 0x7f;
  EXPECT_THROW(decode_checkpoint(huge), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/expnet.bin"), DataError);
}
