#pragma once

#include <compare>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "archon/modality_codecs.hpp"
#include "archon/vocab.hpp"

namespace archon {

enum class ModalityState : std::uint8_t { past = 0, current = 1, invariant = 2 };

const char* state_name(ModalityState state);
ModalityState state_from_name(const std::string& name);

/// A modality together with its temporal role in a task.
struct ModalityRef {
  ModalityKind kind;
  ModalityState state;

  auto operator<=>(const ModalityRef&) const = default;
};

std::string ref_name(const ModalityRef& ref);

/// The prompt grammar only admits invariant state for image, description
/// and shape, and past/current for the time-dependent kinds; video never
/// appears in a prompt.
bool state_allowed_in_prompt(const ModalityRef& ref);

/// One condition field: globalized payload tokens plus the shape metadata
/// the decoder needs.
struct Segment {
  ModalityRef ref;
  std::vector<std::uint32_t> dims;  // kind-specific, see token_count
  std::vector<TokenId> payload;
};

struct TaskInstance {
  std::vector<Segment> conditions;
  ModalityRef output_ref;
  std::vector<std::uint32_t> output_dims;
  std::vector<TokenId> output_payload;  // empty at inference time
  std::uint64_t expected_output_len = 0;
};

struct SerializedInstance {
  std::vector<TokenId> tokens;
  std::size_t prefix_len = 0;  // index of the first output-payload token
};

/// Canonical line grammar (docs/prompt-grammar.md): BOS, then per condition
/// a header "input <kind> <state> <dims...>:" in description-range byte
/// tokens followed by the payload and an end-of-field token, then the
/// output header "output <kind> <state> <dims...>:" followed by the output
/// payload (absent at inference).
SerializedInstance serialize(const TaskInstance& instance,
                             const VocabularyLayout& layout);

TaskInstance parse(std::span<const TokenId> tokens,
                   const VocabularyLayout& layout);

/// Half-open token range of the output payload; equals (prefix_len, len)
/// for a well-formed sequence and (len, len) for an inference prompt.
std::pair<std::size_t, std::size_t> target_span(std::span<const TokenId> tokens,
                                                std::size_t prefix_len,
                                                const VocabularyLayout& layout);

}  // namespace archon
