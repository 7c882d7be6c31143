#pragma once

#include <cstdint>
#include <vector>

#include "archon/vocab.hpp"

namespace archon {

/// Placement of one packed instance inside a training window. Offsets are
/// absolute window positions; the target span is half-open.
struct WindowSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t prefix_len = 0;  // absolute index of the first output token
  std::size_t target_begin = 0;
  std::size_t target_end = 0;
};

/// A fixed-budget training window: one or more serialized instances packed
/// front to back, the remainder padded with pad_id.
struct PackedWindow {
  std::vector<TokenId> tokens;     // always exactly `budget` long
  std::vector<WindowSpan> spans;   // non-overlapping, ordered
  std::size_t budget = 8192;
  std::size_t used = 0;            // tokens before padding
};

}  // namespace archon
