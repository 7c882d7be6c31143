#include "archon/vocab.hpp"

#include "archon/rng.hpp"
#include "doctest.h"

using namespace archon;

namespace {

VocabularyLayout three_range_layout() {
  return VocabularyLayout::build({
      {ModalityKind::script, 0, 256},
      {ModalityKind::speech, 0, 1024},
      {ModalityKind::speech, 1, 1024},
  });
}

}  // namespace

TEST_CASE("single range packs right after the specials") {
  auto layout = VocabularyLayout::build({{ModalityKind::script, 0, 256}});
  const RangeSpec& r = layout.range(ModalityKind::script, 0);
  CHECK(r.start == 3);
  CHECK(r.size == 256);
  CHECK(layout.total_size() == 259);
}

TEST_CASE("four speech levels get four disjoint 1024 ranges") {
  auto layout = VocabularyLayout::build({
      {ModalityKind::speech, 0, 1024},
      {ModalityKind::speech, 1, 1024},
      {ModalityKind::speech, 2, 1024},
      {ModalityKind::speech, 3, 1024},
  });
  CHECK(layout.level_count(ModalityKind::speech) == 4);
  CHECK(layout.total_size() == 3 + 4096);
  for (std::uint32_t l = 0; l < 4; ++l) {
    const RangeSpec& r = layout.range(ModalityKind::speech, l);
    CHECK(r.size == 1024);
    CHECK(r.start == 3 + l * 1024);
  }
}

TEST_CASE("an 18-bit image range occupies exactly 262144 consecutive ids") {
  auto layout = VocabularyLayout::build({{ModalityKind::image, 0, 1u << 18}});
  const RangeSpec& r = layout.range(ModalityKind::image, 0);
  CHECK(r.size == 262144);
  CHECK(layout.localize(r.start).kind == ModalityKind::image);
  CHECK(layout.localize(r.start + r.size - 1).local_id == 262143);
}

TEST_CASE("build rejects duplicates, zero sizes, and video ranges") {
  CHECK_THROWS_WITH_AS(VocabularyLayout::build({{ModalityKind::script, 0, 16},
                                                {ModalityKind::script, 0, 16}}),
                       doctest::Contains("DuplicateRange"), Error);
  CHECK_THROWS_WITH_AS(VocabularyLayout::build({{ModalityKind::script, 0, 0}}),
                       doctest::Contains("InvalidSize"), Error);
  CHECK_THROWS_AS(VocabularyLayout::build({{ModalityKind::video, 0, 8}}), Error);
}

TEST_CASE("globalize is start plus local id") {
  auto layout = three_range_layout();
  const RangeSpec& speech0 = layout.range(ModalityKind::speech, 0);
  CHECK(layout.globalize(ModalityKind::speech, 0, 5) == speech0.start + 5);
  for (const RangeSpec& r : layout.ranges()) {
    CHECK(layout.globalize(r.kind, r.level, 0) == r.start);
  }
  CHECK_THROWS_AS(layout.globalize(ModalityKind::speech, 0, 1024), Error);
  CHECK_THROWS_AS(layout.globalize(ModalityKind::pose, 0, 0), Error);
}

TEST_CASE("localize inverts globalize on random draws") {
  auto layout = three_range_layout();
  Rng rng(2024);
  const auto& ranges = layout.ranges();
  for (int i = 0; i < 10000; ++i) {
    const RangeSpec& r = ranges[rng.below(ranges.size())];
    const std::uint32_t local = static_cast<std::uint32_t>(rng.below(r.size));
    const TokenId g = layout.globalize(r.kind, r.level, local);
    const Localized back = layout.localize(g);
    CHECK(back.kind == r.kind);
    CHECK(back.level == r.level);
    CHECK(back.local_id == local);
  }
}

TEST_CASE("localize covers every id exhaustively and rejects specials") {
  auto layout = three_range_layout();
  for (TokenId id = VocabularyLayout::kNumSpecials; id < layout.total_size();
       ++id) {
    const Localized loc = layout.localize(id);
    CHECK(layout.globalize(loc.kind, loc.level, loc.local_id) == id);
  }
  CHECK_THROWS_WITH_AS(layout.localize(layout.pad_id()),
                       doctest::Contains("NotAModalityToken"), Error);
  CHECK_THROWS_AS(layout.localize(layout.total_size()), Error);

  // Last id of the last range maps to (last kind, last level, size-1).
  const RangeSpec& last = layout.ranges().back();
  const Localized loc = layout.localize(layout.total_size() - 1);
  CHECK(loc.kind == last.kind);
  CHECK(loc.level == last.level);
  CHECK(loc.local_id == last.size - 1);
}

TEST_CASE("ranges are pairwise disjoint under an exhaustive scan") {
  auto layout = three_range_layout();
  std::vector<int> owner(layout.total_size(), -1);
  for (std::size_t i = 0; i < layout.ranges().size(); ++i) {
    const RangeSpec& r = layout.ranges()[i];
    for (TokenId id = r.start; id < r.start + r.size; ++id) {
      CHECK(owner[id] == -1);
      owner[id] = static_cast<int>(i);
    }
  }
  for (TokenId id = VocabularyLayout::kNumSpecials; id < layout.total_size();
       ++id) {
    CHECK(owner[id] != -1);
  }
}

TEST_CASE("build is deterministic and json roundtrips preserve the hash") {
  auto a = three_range_layout();
  auto b = three_range_layout();
  CHECK(a.hash() == b.hash());
  auto c = VocabularyLayout::from_json(a.to_json());
  CHECK(c.hash() == a.hash());
  CHECK(c.total_size() == a.total_size());

  auto different = VocabularyLayout::build({{ModalityKind::script, 0, 255}});
  CHECK(different.hash() != a.hash());
}
