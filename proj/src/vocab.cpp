#include "archon/vocab.hpp"

#include <algorithm>
#include <limits>

namespace archon {

namespace {

const char* const kKindNames[kNumModalityKinds] = {
    "description", "script", "speech", "shape", "expression",
    "pose",        "semantic", "image", "video",
};

}  // namespace

const char* kind_name(ModalityKind kind) {
  return kKindNames[static_cast<std::uint8_t>(kind)];
}

ModalityKind kind_from_name(const std::string& name) {
  for (int i = 0; i < kNumModalityKinds; ++i) {
    if (name == kKindNames[i]) return static_cast<ModalityKind>(i);
  }
  fail(ErrorCode::InvalidInput, "unknown modality kind '" + name + "'");
}

VocabularyLayout VocabularyLayout::build(const std::vector<LayoutEntry>& specs) {
  VocabularyLayout layout;
  TokenId next = kNumSpecials;
  for (const LayoutEntry& entry : specs) {
    if (!kind_has_vocabulary(entry.kind)) {
      fail(ErrorCode::InvalidSize, "video never receives a vocabulary range");
    }
    if (entry.size == 0) {
      fail(ErrorCode::InvalidSize,
           std::string("zero-size range for ") + kind_name(entry.kind));
    }
    for (const RangeSpec& existing : layout.ranges_) {
      if (existing.kind == entry.kind && existing.level == entry.level) {
        fail(ErrorCode::DuplicateRange,
             std::string(kind_name(entry.kind)) + " level " +
                 std::to_string(entry.level) + " listed twice");
      }
    }
    const std::uint64_t end =
        static_cast<std::uint64_t>(next) + static_cast<std::uint64_t>(entry.size);
    if (end > std::numeric_limits<TokenId>::max()) {
      fail(ErrorCode::InvalidSize, "layout overflows the token id space");
    }
    layout.ranges_.push_back(RangeSpec{entry.kind, entry.level, next, entry.size});
    next = static_cast<TokenId>(end);
  }
  layout.total_ = next;
  return layout;
}

bool VocabularyLayout::has_range(ModalityKind kind, std::uint32_t level) const {
  for (const RangeSpec& r : ranges_) {
    if (r.kind == kind && r.level == level) return true;
  }
  return false;
}

const RangeSpec& VocabularyLayout::range(ModalityKind kind,
                                         std::uint32_t level) const {
  for (const RangeSpec& r : ranges_) {
    if (r.kind == kind && r.level == level) return r;
  }
  fail(ErrorCode::NoSuchRange, std::string("no range for ") + kind_name(kind) +
                                   " level " + std::to_string(level));
}

std::uint32_t VocabularyLayout::level_count(ModalityKind kind) const {
  std::uint32_t n = 0;
  for (const RangeSpec& r : ranges_) {
    if (r.kind == kind) ++n;
  }
  return n;
}

TokenId VocabularyLayout::globalize(ModalityKind kind, std::uint32_t level,
                                    std::uint32_t local_id) const {
  const RangeSpec& r = range(kind, level);
  if (local_id >= r.size) {
    fail(ErrorCode::LocalIdOutOfRange,
         "local id " + std::to_string(local_id) + " >= size " +
             std::to_string(r.size) + " for " + kind_name(kind));
  }
  return r.start + local_id;
}

Localized VocabularyLayout::localize(TokenId global_id) const {
  if (is_special(global_id) || global_id >= total_) {
    fail(ErrorCode::NotAModalityToken,
         "id " + std::to_string(global_id) + " is not a modality token");
  }
  // Ranges are sorted by start; find the last range with start <= id.
  auto it = std::upper_bound(
      ranges_.begin(), ranges_.end(), global_id,
      [](TokenId id, const RangeSpec& r) { return id < r.start; });
  if (it == ranges_.begin()) {
    fail(ErrorCode::NotAModalityToken,
         "id " + std::to_string(global_id) + " precedes all ranges");
  }
  const RangeSpec& r = *(it - 1);
  return Localized{r.kind, r.level, global_id - r.start};
}

bool VocabularyLayout::belongs_to_kind(TokenId global_id,
                                       ModalityKind kind) const {
  if (is_special(global_id) || global_id >= total_) return false;
  auto it = std::upper_bound(
      ranges_.begin(), ranges_.end(), global_id,
      [](TokenId id, const RangeSpec& r) { return id < r.start; });
  if (it == ranges_.begin()) return false;
  return (it - 1)->kind == kind;
}

std::uint64_t VocabularyLayout::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 1099511628211ULL;
    }
  };
  mix(kNumSpecials);
  for (const RangeSpec& r : ranges_) {
    mix(static_cast<std::uint64_t>(r.kind));
    mix(r.level);
    mix(r.start);
    mix(r.size);
  }
  return h;
}

nlohmann::json VocabularyLayout::to_json() const {
  nlohmann::json ranges = nlohmann::json::array();
  for (const RangeSpec& r : ranges_) {
    ranges.push_back({{"kind", kind_name(r.kind)},
                      {"level", r.level},
                      {"start", r.start},
                      {"size", r.size}});
  }
  return {{"specials", kNumSpecials},
          {"total_size", total_},
          {"ranges", ranges}};
}

VocabularyLayout VocabularyLayout::from_json(const nlohmann::json& j) {
  std::vector<LayoutEntry> entries;
  for (const auto& r : j.at("ranges")) {
    entries.push_back(LayoutEntry{kind_from_name(r.at("kind").get<std::string>()),
                                  r.at("level").get<std::uint32_t>(),
                                  r.at("size").get<std::uint32_t>()});
  }
  VocabularyLayout layout = build(entries);
  if (j.contains("total_size") &&
      j.at("total_size").get<TokenId>() != layout.total_size()) {
    fail(ErrorCode::InvalidConfig, "layout total_size does not match ranges");
  }
  return layout;
}

}  // namespace archon
