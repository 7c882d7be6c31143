#include "archon/tasks.hpp"

#include "archon/rng.hpp"
#include "doctest.h"

using namespace archon;

namespace {

constexpr ModalityRef kSpeechC{ModalityKind::speech, ModalityState::current};
constexpr ModalityRef kSpeechP{ModalityKind::speech, ModalityState::past};
constexpr ModalityRef kImageT{ModalityKind::image, ModalityState::invariant};
constexpr ModalityRef kShapeT{ModalityKind::shape, ModalityState::invariant};
constexpr ModalityRef kExprC{ModalityKind::expression, ModalityState::current};
constexpr ModalityRef kSemC{ModalityKind::semantic, ModalityState::current};
constexpr ModalityRef kDescT{ModalityKind::description, ModalityState::invariant};
constexpr ModalityRef kScriptC{ModalityKind::script, ModalityState::current};
constexpr ModalityRef kVideoC{ModalityKind::video, ModalityState::current};

}  // namespace

TEST_CASE("the default registry holds exactly 72 unique specs") {
  const Registry reg = Registry::default_table();
  CHECK(reg.size() == kRegistrySize);
  CHECK(reg.size() == 72);

  // Idempotent and order-stable.
  const Registry again = Registry::default_table();
  for (std::size_t i = 0; i < reg.size(); ++i) {
    CHECK(reg.specs()[i] == again.specs()[i]);
  }
}

TEST_CASE("per-output task counts match the table") {
  const Registry reg = Registry::default_table();
  CHECK(reg.count_by_output_kind(ModalityKind::script) == 5);
  CHECK(reg.count_by_output_kind(ModalityKind::speech) == 11);
  CHECK(reg.count_by_output_kind(ModalityKind::image) == 5);
  CHECK(reg.count_by_output_kind(ModalityKind::shape) == 4);
  CHECK(reg.count_by_output_kind(ModalityKind::expression) == 10);
  CHECK(reg.count_by_output_kind(ModalityKind::pose) == 9);
  CHECK(reg.count_by_output_kind(ModalityKind::semantic) == 22);
  CHECK(reg.count_by_output_kind(ModalityKind::description) == 6);
  CHECK(reg.count_by_output_kind(ModalityKind::video) == 0);
}

TEST_CASE("the speech continuation row is present") {
  const Registry reg = Registry::default_table();
  const TaskSpec expect{{kSpeechP}, kSpeechC};
  bool found = false;
  for (const TaskSpec& spec : reg.specs()) found = found || spec == expect;
  CHECK(found);
}

TEST_CASE("the full modality set has 13 members with the right states") {
  const auto refs = full_modality_set();
  CHECK(refs.size() == 13);
  int image_count = 0, script_past = 0, script_current = 0;
  for (const ModalityRef& r : refs) {
    if (r.kind == ModalityKind::image) {
      ++image_count;
      CHECK(r.state == ModalityState::invariant);
    }
    if (r.kind == ModalityKind::script) {
      script_past += r.state == ModalityState::past;
      script_current += r.state == ModalityState::current;
    }
    CHECK(r.kind != ModalityKind::video);
  }
  CHECK(image_count == 1);
  CHECK(script_past == 1);
  CHECK(script_current == 1);
}

TEST_CASE("executable uses subset matching") {
  const Registry reg = Registry::default_table();
  CHECK(executable(reg, {kSpeechC, kImageT}, kSemC));
  CHECK_FALSE(executable(reg, {}, kSemC));
  for (const ModalityRef& ref : full_modality_set()) {
    CHECK_FALSE(executable(reg, {}, ref));
  }

  // A superset of any registered input set stays executable.
  const auto all = full_modality_set();
  std::set<ModalityRef> everything(all.begin(), all.end());
  everything.erase(kSemC);
  CHECK(executable(reg, everything, kSemC));
}

TEST_CASE("subset monotonicity holds on random available sets") {
  const Registry reg = Registry::default_table();
  const auto all = full_modality_set();
  Rng rng(17);
  for (int trial = 0; trial < 2000; ++trial) {
    std::set<ModalityRef> small, big;
    for (const ModalityRef& r : all) {
      const bool in_small = rng.below(3) == 0;
      const bool in_big = in_small || rng.below(2) == 0;
      if (in_small) small.insert(r);
      if (in_big) big.insert(r);
    }
    const ModalityRef target = all[rng.below(all.size())];
    if (executable(reg, small, target)) {
      CHECK(executable(reg, big, target));
    }
  }
}

TEST_CASE("decompose accumulates the available set step by step") {
  const Registry reg = Registry::default_table();
  const auto steps =
      decompose(reg, {kSpeechC, kImageT}, {kShapeT, kExprC});
  REQUIRE(steps.size() == 2);
  CHECK(steps[0].available == std::set<ModalityRef>{kSpeechC, kImageT});
  CHECK(steps[0].target == kShapeT);
  CHECK(steps[1].available ==
        std::set<ModalityRef>{kSpeechC, kImageT, kShapeT});
  CHECK(steps[1].target == kExprC);

  // Single target is plain direct generation.
  const auto one = decompose(reg, {kSpeechC}, {kShapeT});
  CHECK(one.size() == 1);

  CHECK_THROWS_WITH_AS(
      decompose(reg, {kDescT}, {{ModalityKind::semantic, ModalityState::past}}),
      doctest::Contains("UnreachableModality"), Error);
}

TEST_CASE("the reference chain from speech and image validates step by step") {
  const Registry reg = Registry::default_table();
  const auto steps = decompose(reg, {kSpeechC, kImageT},
                               {kShapeT, kExprC, kSemC, kDescT});
  CHECK(steps.size() == 4);
  for (const auto& step : steps) {
    CHECK(executable(reg, step.available, step.target));
  }
}

TEST_CASE("canonical plan to semantic omits post-final intermediates") {
  const Registry reg = Registry::default_table();
  const ChainPlan plan =
      plan_chain(reg, {kSpeechC, kImageT}, kSemC, ChainStrategy::canonical);
  CHECK(plan.steps == std::vector<ModalityRef>{kShapeT, kExprC, kSemC});
  CHECK_FALSE(plan.needs_render);
}

TEST_CASE("canonical plan to video runs the full chain plus render") {
  const Registry reg = Registry::default_table();
  const ChainPlan plan =
      plan_chain(reg, {kSpeechC, kImageT}, kVideoC, ChainStrategy::canonical);
  CHECK(plan.steps ==
        std::vector<ModalityRef>{kShapeT, kExprC, kSemC, kDescT});
  CHECK(plan.needs_render);
  CHECK(plan.final == kVideoC);
}

TEST_CASE("conditions already containing intermediates are skipped") {
  const Registry reg = Registry::default_table();
  const ChainPlan plan = plan_chain(reg, {kSpeechC, kImageT, kShapeT, kExprC},
                                    kSemC, ChainStrategy::canonical);
  CHECK(plan.steps == std::vector<ModalityRef>{kSemC});
}

TEST_CASE("direct strategy reduces to single-step decompose") {
  const Registry reg = Registry::default_table();
  const ChainPlan plan =
      plan_chain(reg, {kSpeechC, kImageT}, kSemC, ChainStrategy::direct);
  CHECK(plan.steps == std::vector<ModalityRef>{kSemC});
  const auto steps = decompose(reg, plan.conditions, plan.steps);
  CHECK(steps.size() == 1);

  const ChainPlan video =
      plan_chain(reg, {kSpeechC, kImageT}, kVideoC, ChainStrategy::direct);
  CHECK(video.steps == std::vector<ModalityRef>{kSemC});
  CHECK(video.needs_render);
}

TEST_CASE("plans fail with NoPlan when nothing is reachable") {
  const Registry reg = Registry::default_table();
  CHECK_THROWS_WITH_AS(plan_chain(reg, {}, kSemC, ChainStrategy::direct),
                       doctest::Contains("NoPlan"), Error);
  CHECK_THROWS_AS(
      plan_chain(reg, {kSemC}, kSemC, ChainStrategy::direct), Error);
}

TEST_CASE("every canonical plan replays through decompose cleanly") {
  const Registry reg = Registry::default_table();
  const auto all = full_modality_set();
  Rng rng(23);
  int planned = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::set<ModalityRef> conditions;
    for (const ModalityRef& r : all) {
      if (rng.below(3) == 0) conditions.insert(r);
    }
    ModalityRef target = all[rng.below(all.size())];
    if (conditions.count(target)) continue;
    try {
      const ChainPlan plan =
          plan_chain(reg, conditions, target, ChainStrategy::canonical);
      ++planned;
      CHECK_NOTHROW(decompose(reg, plan.conditions, plan.steps));
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NoPlan);
    }
  }
  CHECK(planned > 1000);  // the sweep must actually exercise planning
}

TEST_CASE("registry json export round-trips") {
  const Registry reg = Registry::default_table();
  const auto j = reg.to_json();
  CHECK(j.at("tasks").size() == 72);
  const Registry back = Registry::from_json(j);
  REQUIRE(back.size() == reg.size());
  for (std::size_t i = 0; i < reg.size(); ++i) {
    CHECK(back.specs()[i] == reg.specs()[i]);
  }
}
