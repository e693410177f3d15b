#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "expnet/tensor.hpp"

namespace expnet {

inline constexpr char kCheckpointMagic[4] = {'E', 'X', 'P', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Binary parameter container:
///   "EXPN" | version u32 | count u32 |
///   per tensor: name_len u32 | name bytes | rank u32 | dims u64 x rank | f64 x numel
/// All integers and floats little-endian.
std::string encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

}  // namespace expnet
