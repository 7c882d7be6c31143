#include "archon/tasks.hpp"

#include <algorithm>
#include <sstream>

namespace archon {

namespace {

/// Compact row notation for the default table: "kind.s" with s one of
/// c/p/t. desc, id and expr abbreviate description, shape and expression.
ModalityRef parse_ref(const std::string& item) {
  const auto dot = item.find('.');
  if (dot == std::string::npos) {
    fail(ErrorCode::InvalidInput, "bad ref literal '" + item + "'");
  }
  std::string kind = item.substr(0, dot);
  const std::string state = item.substr(dot + 1);
  if (kind == "desc") kind = "description";
  if (kind == "id") kind = "shape";
  if (kind == "expr") kind = "expression";
  if (kind == "sem") kind = "semantic";
  ModalityRef ref;
  ref.kind = kind_from_name(kind);
  if (state == "c") {
    ref.state = ModalityState::current;
  } else if (state == "p") {
    ref.state = ModalityState::past;
  } else if (state == "t") {
    ref.state = ModalityState::invariant;
  } else {
    fail(ErrorCode::InvalidInput, "bad state literal '" + state + "'");
  }
  return ref;
}

std::vector<ModalityRef> parse_refs(const std::string& list) {
  std::vector<ModalityRef> refs;
  std::istringstream ss(list);
  std::string item;
  while (ss >> item) refs.push_back(parse_ref(item));
  return refs;
}

struct RowLiteral {
  const char* output;
  const char* inputs;
};

// The default 72-task table: output modality on the left, one input
// combination per row. States: c = current, p = past, t = time-invariant.
constexpr RowLiteral kDefaultRows[] = {
    // script
    {"script.c", "desc.t"},
    {"script.c", "script.p"},
    {"script.c", "speech.c"},
    {"script.c", "expr.c"},
    {"script.c", "sem.c"},
    // speech
    {"speech.c", "desc.t"},
    {"speech.c", "desc.t script.c"},
    {"speech.c", "script.c"},
    {"speech.c", "script.c speech.p"},
    {"speech.c", "speech.p"},
    {"speech.c", "script.c image.t"},
    {"speech.c", "script.c sem.c"},
    {"speech.c", "script.c speech.p sem.c"},
    {"speech.c", "id.t expr.c"},
    {"speech.c", "sem.c"},
    {"speech.c", "script.c id.t"},
    // image
    {"image.t", "desc.t"},
    {"image.t", "speech.c"},
    {"image.t", "id.t"},
    {"image.t", "id.t expr.t pose.t"},
    {"image.t", "desc.t id.t expr.t pose.t"},
    // identity (shape)
    {"id.t", "desc.t"},
    {"id.t", "desc.t script.c speech.c"},
    {"id.t", "speech.c"},
    {"id.t", "image.t"},
    // expression
    {"expr.c", "desc.t"},
    {"expr.c", "desc.t script.c speech.c image.t id.t"},
    {"expr.c", "script.c"},
    {"expr.c", "script.c speech.c id.t"},
    {"expr.c", "speech.c"},
    {"expr.c", "speech.c id.t"},
    {"expr.c", "speech.c id.t image.t"},
    {"expr.c", "speech.c image.t"},
    {"expr.c", "sem.c"},
    {"expr.c", "expr.p speech.c"},
    // pose
    {"pose.c", "desc.t"},
    {"pose.c", "speech.c"},
    {"pose.c", "speech.c id.t expr.c"},
    {"pose.c", "speech.c expr.c image.t"},
    {"pose.c", "speech.c id.t expr.c image.t"},
    {"pose.c", "image.t id.t expr.c"},
    {"pose.c", "image.t expr.c"},
    {"pose.c", "id.t expr.c"},
    {"pose.c", "sem.c"},
    // semantic
    {"sem.c", "desc.t"},
    {"sem.c", "desc.t script.c"},
    {"sem.c", "desc.t script.c speech.c"},
    {"sem.c", "desc.t script.c speech.c id.t expr.c pose.c"},
    {"sem.c", "desc.t image.t"},
    {"sem.c", "desc.t script.c speech.c id.t expr.c pose.c image.t"},
    {"sem.c", "script.c"},
    {"sem.c", "script.c image.t"},
    {"sem.c", "script.c speech.c id.t expr.c pose.c image.t"},
    {"sem.c", "speech.c"},
    {"sem.c", "speech.c id.t expr.c pose.c"},
    {"sem.c", "speech.c id.t expr.c pose.c image.t"},
    {"sem.c", "speech.c image.t"},
    {"sem.c", "speech.c expr.c pose.c image.t"},
    {"sem.c", "image.t"},
    {"sem.c", "image.t id.t expr.c pose.c"},
    {"sem.c", "image.t expr.c pose.c"},
    {"sem.c", "image.t expr.c"},
    {"sem.c", "id.t expr.c pose.c"},
    {"sem.c", "sem.p"},
    {"sem.c", "sem.p speech.c"},
    {"sem.c", "sem.p expr.c pose.c"},
    // description
    {"desc.t", "speech.c"},
    {"desc.t", "image.t sem.c speech.c"},
    {"desc.t", "image.t sem.c speech.c script.c"},
    {"desc.t", "image.t"},
    {"desc.t", "image.t sem.c"},
    {"desc.t", "id.t expr.c pose.c"},
};

nlohmann::json ref_to_json(const ModalityRef& ref) {
  return {{"kind", kind_name(ref.kind)}, {"state", state_name(ref.state)}};
}

ModalityRef ref_from_json(const nlohmann::json& j) {
  return ModalityRef{kind_from_name(j.at("kind").get<std::string>()),
                     state_from_name(j.at("state").get<std::string>())};
}

}  // namespace

Registry::Registry(std::vector<TaskSpec> specs) : specs_(std::move(specs)) {
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    TaskSpec& spec = specs_[i];
    if (spec.inputs.empty()) {
      fail(ErrorCode::InvalidInput, "task specs need at least one input");
    }
    std::sort(spec.inputs.begin(), spec.inputs.end());
    if (std::adjacent_find(spec.inputs.begin(), spec.inputs.end()) !=
        spec.inputs.end()) {
      fail(ErrorCode::InvalidInput, "duplicate input ref in a task spec");
    }
    for (const ModalityRef& in : spec.inputs) {
      if (in == spec.output) {
        fail(ErrorCode::InvalidInput, "task output repeats one of its inputs");
      }
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (specs_[j] == spec) {
        fail(ErrorCode::InvalidInput, "duplicate task spec");
      }
    }
    by_output_[spec.output.kind].push_back(i);
  }
}

Registry Registry::default_table() {
  std::vector<TaskSpec> specs;
  specs.reserve(kRegistrySize);
  for (const RowLiteral& row : kDefaultRows) {
    specs.push_back(TaskSpec{parse_refs(row.inputs), parse_ref(row.output)});
  }
  return Registry(std::move(specs));
}

std::size_t Registry::count_by_output_kind(ModalityKind kind) const {
  const auto it = by_output_.find(kind);
  return it == by_output_.end() ? 0 : it->second.size();
}

const std::vector<std::size_t>& Registry::by_output_kind(
    ModalityKind kind) const {
  static const std::vector<std::size_t> kEmpty;
  const auto it = by_output_.find(kind);
  return it == by_output_.end() ? kEmpty : it->second;
}

nlohmann::json Registry::to_json() const {
  nlohmann::json specs = nlohmann::json::array();
  for (const TaskSpec& spec : specs_) {
    nlohmann::json inputs = nlohmann::json::array();
    for (const ModalityRef& in : spec.inputs) inputs.push_back(ref_to_json(in));
    specs.push_back({{"output", ref_to_json(spec.output)}, {"inputs", inputs}});
  }
  return {{"tasks", specs}};
}

Registry Registry::from_json(const nlohmann::json& j) {
  std::vector<TaskSpec> specs;
  for (const auto& row : j.at("tasks")) {
    TaskSpec spec;
    spec.output = ref_from_json(row.at("output"));
    for (const auto& in : row.at("inputs")) {
      spec.inputs.push_back(ref_from_json(in));
    }
    specs.push_back(std::move(spec));
  }
  return Registry(std::move(specs));
}

std::vector<ModalityRef> full_modality_set() {
  std::vector<ModalityRef> refs;
  for (ModalityKind kind : {ModalityKind::script, ModalityKind::speech,
                            ModalityKind::expression, ModalityKind::pose,
                            ModalityKind::semantic}) {
    refs.push_back({kind, ModalityState::past});
    refs.push_back({kind, ModalityState::current});
  }
  for (ModalityKind kind : {ModalityKind::image, ModalityKind::description,
                            ModalityKind::shape}) {
    refs.push_back({kind, ModalityState::invariant});
  }
  return refs;
}

bool executable(const Registry& registry, const std::set<ModalityRef>& available,
                const ModalityRef& output) {
  for (const std::size_t i : registry.by_output_kind(output.kind)) {
    const TaskSpec& spec = registry.specs()[i];
    if (spec.output != output) continue;
    const bool subset =
        std::all_of(spec.inputs.begin(), spec.inputs.end(),
                    [&](const ModalityRef& in) { return available.count(in); });
    if (subset) return true;
  }
  return false;
}

std::vector<DecompositionStep> decompose(
    const Registry& registry, const std::set<ModalityRef>& conditions,
    const std::vector<ModalityRef>& targets) {
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (conditions.count(targets[i])) {
      fail(ErrorCode::InvalidInput,
           ref_name(targets[i]) + " is already a condition");
    }
    for (std::size_t j = i + 1; j < targets.size(); ++j) {
      if (targets[i] == targets[j]) {
        fail(ErrorCode::InvalidInput, "duplicate target " + ref_name(targets[i]));
      }
    }
  }
  std::vector<DecompositionStep> steps;
  std::set<ModalityRef> available = conditions;
  for (const ModalityRef& target : targets) {
    if (!executable(registry, available, target)) {
      fail(ErrorCode::UnreachableModality,
           ref_name(target) + " has no spec whose inputs are available");
    }
    steps.push_back(DecompositionStep{available, target});
    available.insert(target);
  }
  return steps;
}

ChainPlan plan_chain(const Registry& registry,
                     const std::set<ModalityRef>& conditions,
                     const ModalityRef& final_target, ChainStrategy strategy) {
  if (conditions.count(final_target)) {
    fail(ErrorCode::InvalidInput, "final target is already a condition");
  }
  ChainPlan plan;
  plan.conditions = conditions;
  plan.final = final_target;
  plan.needs_render = final_target.kind == ModalityKind::video;
  // Video is produced by rendering a generated semantic video; the token
  // chain runs through semantic (and, canonically, description) first.
  const ModalityRef semantic_ref{ModalityKind::semantic, ModalityState::current};
  const ModalityRef token_final = plan.needs_render ? semantic_ref : final_target;

  std::set<ModalityRef> available = conditions;
  if (strategy == ChainStrategy::canonical) {
    const std::vector<ModalityRef> canon = {
        {ModalityKind::shape, ModalityState::invariant},
        {ModalityKind::expression, ModalityState::current},
        semantic_ref,
        {ModalityKind::description, ModalityState::invariant},
    };
    for (const ModalityRef& step : canon) {
      // For a non-video final, anything past the final's own slot in the
      // canonical order is omitted; a video final keeps the whole chain.
      if (!plan.needs_render && step == token_final) break;
      if (available.count(step)) continue;
      if (!executable(registry, available, step)) continue;
      plan.steps.push_back(step);
      available.insert(step);
    }
  }
  if (plan.needs_render) {
    if (strategy == ChainStrategy::direct && !available.count(semantic_ref)) {
      if (!executable(registry, available, semantic_ref)) {
        fail(ErrorCode::NoPlan, "no executable route to " + ref_name(semantic_ref));
      }
      plan.steps.push_back(semantic_ref);
      available.insert(semantic_ref);
    }
    if (!available.count(semantic_ref)) {
      fail(ErrorCode::NoPlan, "no executable route to " + ref_name(semantic_ref));
    }
  } else {
    if (!executable(registry, available, token_final)) {
      fail(ErrorCode::NoPlan, "no executable route to " + ref_name(token_final));
    }
    plan.steps.push_back(token_final);
  }

  // By construction this cannot throw; keep it as a cheap structural check.
  decompose(registry, plan.conditions, plan.steps);
  return plan;
}

}  // namespace archon
