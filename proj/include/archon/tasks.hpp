#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <vector>

#include "archon/prompt.hpp"

#include "json.hpp"

namespace archon {

/// One registered task: a set of input modality refs mapped to one output.
struct TaskSpec {
  std::vector<ModalityRef> inputs;  // sorted, unique
  ModalityRef output;

  bool operator==(const TaskSpec&) const = default;
};

inline constexpr std::size_t kRegistrySize = 72;

/// The default multimodal task table. Identity rows use the shape kind
/// (static 3DMM component); input sets are kept verbatim, including the
/// two image rows that tag expression/pose as time-invariant.
class Registry {
 public:
  static Registry default_table();

  const std::vector<TaskSpec>& specs() const { return specs_; }
  std::size_t size() const { return specs_.size(); }

  /// Number of tasks whose output modality kind is `kind` (the N_{m(i)}
  /// denominator of the sampling weights).
  std::size_t count_by_output_kind(ModalityKind kind) const;

  /// Spec indices with the given output kind.
  const std::vector<std::size_t>& by_output_kind(ModalityKind kind) const;

  nlohmann::json to_json() const;
  static Registry from_json(const nlohmann::json& j);

 private:
  explicit Registry(std::vector<TaskSpec> specs);

  std::vector<TaskSpec> specs_;
  std::map<ModalityKind, std::vector<std::size_t>> by_output_;
};

/// The thirteen-element modality set: the five time-dependent kinds in both
/// past and current states plus the three time-invariant kinds.
std::vector<ModalityRef> full_modality_set();

/// True iff some registered spec with this output has inputs contained in
/// `available` (generation itself then conditions on everything available).
bool executable(const Registry& registry, const std::set<ModalityRef>& available,
                const ModalityRef& output);

struct DecompositionStep {
  std::set<ModalityRef> available;
  ModalityRef target;
};

/// Recurrent decomposition: step j sees conditions plus all previously
/// generated targets. Throws UnreachableModality when a step has no
/// matching spec.
std::vector<DecompositionStep> decompose(const Registry& registry,
                                         const std::set<ModalityRef>& conditions,
                                         const std::vector<ModalityRef>& targets);

enum class ChainStrategy { canonical, direct };

struct ChainPlan {
  std::set<ModalityRef> conditions;
  std::vector<ModalityRef> steps;  // token-generation steps, in order
  ModalityRef final;               // overall target (may be video)
  bool needs_render = false;       // true iff final is video
};

/// Canonical strategy inserts, in order, each of shape / expression /
/// semantic / description that is absent from the conditions and executable
/// at its step, then the final target; direct goes straight to the target.
/// A video final maps to semantic generation plus a render step.
ChainPlan plan_chain(const Registry& registry,
                     const std::set<ModalityRef>& conditions,
                     const ModalityRef& final_target, ChainStrategy strategy);

}  // namespace archon
