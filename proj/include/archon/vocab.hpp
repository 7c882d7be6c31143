#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "archon/error.hpp"

#include "json.hpp"

namespace archon {

using TokenId = std::uint32_t;

enum class ModalityKind : std::uint8_t {
  description = 0,
  script = 1,
  speech = 2,
  shape = 3,
  expression = 4,
  pose = 5,
  semantic = 6,
  image = 7,
  video = 8,
};

inline constexpr int kNumModalityKinds = 9;

const char* kind_name(ModalityKind kind);
ModalityKind kind_from_name(const std::string& name);

/// video is produced by rendering, never by token prediction, so it is the
/// one kind that never owns a vocabulary range.
inline bool kind_has_vocabulary(ModalityKind kind) {
  return kind != ModalityKind::video;
}

/// One contiguous block of global ids for a (kind, RVQ level) pair.
struct RangeSpec {
  ModalityKind kind;
  std::uint32_t level = 0;  // 0 for non-RVQ modalities
  TokenId start = 0;
  std::uint32_t size = 0;
};

/// Input row for building a layout: (kind, level, local vocabulary size).
struct LayoutEntry {
  ModalityKind kind;
  std::uint32_t level = 0;
  std::uint32_t size = 0;
};

struct Localized {
  ModalityKind kind;
  std::uint32_t level;
  std::uint32_t local_id;
};

/// The unified vocabulary: three reserved specials at the lowest ids, then
/// one half-open [start, start+size) range per (kind, level), packed
/// contiguously in build order. Immutable after construction.
class VocabularyLayout {
 public:
  static constexpr std::uint32_t kNumSpecials = 3;

  static VocabularyLayout build(const std::vector<LayoutEntry>& specs);

  TokenId pad_id() const { return 0; }
  TokenId bos_id() const { return 1; }
  TokenId eos_field_id() const { return 2; }

  TokenId total_size() const { return total_; }
  const std::vector<RangeSpec>& ranges() const { return ranges_; }

  bool is_special(TokenId id) const { return id < kNumSpecials; }

  bool has_range(ModalityKind kind, std::uint32_t level) const;
  const RangeSpec& range(ModalityKind kind, std::uint32_t level) const;

  /// Number of levels a kind owns in this layout (0 if absent).
  std::uint32_t level_count(ModalityKind kind) const;

  TokenId globalize(ModalityKind kind, std::uint32_t level,
                    std::uint32_t local_id) const;
  Localized localize(TokenId global_id) const;

  bool belongs_to_kind(TokenId global_id, ModalityKind kind) const;

  /// FNV-1a over the packed layout description; token files carry this to
  /// reject decoding against a mismatched layout.
  std::uint64_t hash() const;

  nlohmann::json to_json() const;
  static VocabularyLayout from_json(const nlohmann::json& j);

 private:
  VocabularyLayout() = default;

  std::vector<RangeSpec> ranges_;  // sorted by start, by construction
  TokenId total_ = kNumSpecials;
};

}  // namespace archon
