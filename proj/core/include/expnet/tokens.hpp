#pragma once

#include <vector>

namespace expnet {

/// Token ids. A decoded sequence starts with kSos and, when finished before
/// the length bound, ends with kEos.
using TokenSequence = std::vector<int>;

inline constexpr int kPad = 0;
inline constexpr int kSos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumSpecialTokens = 4;

}  // namespace expnet
