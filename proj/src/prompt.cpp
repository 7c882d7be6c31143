#include "archon/prompt.hpp"

#include <algorithm>
#include <sstream>

namespace archon {

namespace {

const char* const kStateNames[3] = {"past", "current", "invariant"};

std::string header_text(bool is_output, const ModalityRef& ref,
                        std::span<const std::uint32_t> dims) {
  std::string s = is_output ? "output " : "input ";
  s += kind_name(ref.kind);
  s += ' ';
  s += state_name(ref.state);
  for (std::uint32_t d : dims) {
    s += ' ';
    s += std::to_string(d);
  }
  s += ':';
  return s;
}

/// Headers ride in the description byte range: raw bytes, no sentinel.
void emit_header(std::vector<TokenId>& out, const std::string& text,
                 const VocabularyLayout& layout) {
  for (unsigned char c : text) {
    out.push_back(layout.globalize(ModalityKind::description, 0, c));
  }
}

void check_payload_ranges(const Segment& seg, const VocabularyLayout& layout,
                          ErrorCode code) {
  for (TokenId t : seg.payload) {
    if (!layout.belongs_to_kind(t, seg.ref.kind)) {
      fail(code, "token " + std::to_string(t) + " does not belong to " +
                     std::string(kind_name(seg.ref.kind)));
    }
  }
}

struct HeaderInfo {
  bool is_output = false;
  ModalityRef ref{ModalityKind::description, ModalityState::invariant};
  std::vector<std::uint32_t> dims;
  std::size_t end = 0;  // index just past the ':' token
};

/// Reads one header starting at `pos`: description-range byte tokens up to
/// and including ':'.
HeaderInfo read_header(std::span<const TokenId> tokens, std::size_t pos,
                       const VocabularyLayout& layout) {
  const RangeSpec& desc = layout.range(ModalityKind::description, 0);
  std::string text;
  std::size_t i = pos;
  for (;; ++i) {
    if (i >= tokens.size()) {
      fail(ErrorCode::ParseError, "truncated header at token " +
                                      std::to_string(tokens.size()));
    }
    const TokenId t = tokens[i];
    if (t < desc.start || t >= desc.start + desc.size) {
      fail(ErrorCode::ParseError,
           "non-text token inside header at position " + std::to_string(i));
    }
    const std::uint32_t byte = t - desc.start;
    if (byte > 255) {
      fail(ErrorCode::ParseError,
           "sentinel inside header at position " + std::to_string(i));
    }
    if (byte == ':') break;
    text.push_back(static_cast<char>(byte));
  }

  std::istringstream ss(text);
  std::string role, kind, state;
  ss >> role >> kind >> state;
  HeaderInfo info;
  if (role == "input") {
    info.is_output = false;
  } else if (role == "output") {
    info.is_output = true;
  } else {
    fail(ErrorCode::ParseError,
         "bad header keyword at position " + std::to_string(pos));
  }
  try {
    info.ref.kind = kind_from_name(kind);
    info.ref.state = state_from_name(state);
  } catch (const Error&) {
    fail(ErrorCode::ParseError,
         "bad header fields at position " + std::to_string(pos));
  }
  long long d;
  while (ss >> d) {
    if (d < 0) {
      fail(ErrorCode::ParseError,
           "negative dim at position " + std::to_string(pos));
    }
    info.dims.push_back(static_cast<std::uint32_t>(d));
  }
  if (!ss.eof()) {
    fail(ErrorCode::ParseError,
         "malformed dims at position " + std::to_string(pos));
  }
  info.end = i + 1;
  return info;
}

std::uint64_t expected_len(const ModalityRef& ref,
                           std::span<const std::uint32_t> dims,
                           const VocabularyLayout& layout) {
  try {
    return token_count(ref.kind, dims, LevelConfig::from_layout(layout));
  } catch (const Error&) {
    fail(ErrorCode::ParseError, std::string("dims invalid for ") +
                                    kind_name(ref.kind));
  }
}

}  // namespace

const char* state_name(ModalityState state) {
  return kStateNames[static_cast<std::uint8_t>(state)];
}

ModalityState state_from_name(const std::string& name) {
  for (int i = 0; i < 3; ++i) {
    if (name == kStateNames[i]) return static_cast<ModalityState>(i);
  }
  fail(ErrorCode::InvalidInput, "unknown modality state '" + name + "'");
}

std::string ref_name(const ModalityRef& ref) {
  return std::string(kind_name(ref.kind)) + "(" + state_name(ref.state) + ")";
}

bool state_allowed_in_prompt(const ModalityRef& ref) {
  switch (ref.kind) {
    case ModalityKind::image:
    case ModalityKind::description:
    case ModalityKind::shape:
      return ref.state == ModalityState::invariant;
    case ModalityKind::script:
    case ModalityKind::speech:
    case ModalityKind::expression:
    case ModalityKind::pose:
    case ModalityKind::semantic:
      return ref.state != ModalityState::invariant;
    case ModalityKind::video:
      return false;
  }
  return false;
}

SerializedInstance serialize(const TaskInstance& instance,
                             const VocabularyLayout& layout) {
  for (const Segment& seg : instance.conditions) {
    if (!state_allowed_in_prompt(seg.ref)) {
      fail(ErrorCode::InvalidInstance, "state not allowed for " +
                                           ref_name(seg.ref));
    }
    if (seg.ref == instance.output_ref) {
      fail(ErrorCode::InvalidInstance,
           "output " + ref_name(seg.ref) + " also appears as a condition");
    }
    if (seg.payload.size() != expected_len(seg.ref, seg.dims, layout)) {
      fail(ErrorCode::InvalidInstance,
           "payload length does not match dims for " + ref_name(seg.ref));
    }
    check_payload_ranges(seg, layout, ErrorCode::InvalidInstance);
  }
  if (!state_allowed_in_prompt(instance.output_ref)) {
    fail(ErrorCode::InvalidInstance,
         "state not allowed for output " + ref_name(instance.output_ref));
  }
  const std::uint64_t out_len =
      expected_len(instance.output_ref, instance.output_dims, layout);
  if (instance.expected_output_len != 0 &&
      instance.expected_output_len != out_len) {
    fail(ErrorCode::InvalidInstance, "expected_output_len disagrees with dims");
  }
  if (!instance.output_payload.empty() &&
      instance.output_payload.size() != out_len) {
    fail(ErrorCode::InvalidInstance, "output payload length does not match dims");
  }

  SerializedInstance out;
  out.tokens.push_back(layout.bos_id());
  for (const Segment& seg : instance.conditions) {
    emit_header(out.tokens, header_text(false, seg.ref, seg.dims), layout);
    out.tokens.insert(out.tokens.end(), seg.payload.begin(), seg.payload.end());
    out.tokens.push_back(layout.eos_field_id());
  }
  emit_header(out.tokens,
              header_text(true, instance.output_ref, instance.output_dims),
              layout);
  out.prefix_len = out.tokens.size();
  if (!instance.output_payload.empty()) {
    Segment check{instance.output_ref, instance.output_dims,
                  instance.output_payload};
    check_payload_ranges(check, layout, ErrorCode::InvalidInstance);
    out.tokens.insert(out.tokens.end(), instance.output_payload.begin(),
                      instance.output_payload.end());
  }
  return out;
}

TaskInstance parse(std::span<const TokenId> tokens,
                   const VocabularyLayout& layout) {
  if (tokens.empty() || tokens[0] != layout.bos_id()) {
    fail(ErrorCode::ParseError, "sequence must start with bos at position 0");
  }
  TaskInstance instance;
  std::size_t pos = 1;
  while (true) {
    if (pos >= tokens.size()) {
      fail(ErrorCode::ParseError,
           "missing output section at position " + std::to_string(pos));
    }
    const HeaderInfo header = read_header(tokens, pos, layout);
    if (!state_allowed_in_prompt(header.ref)) {
      fail(ErrorCode::ParseError,
           "state not allowed at position " + std::to_string(pos));
    }
    const std::uint64_t len = expected_len(header.ref, header.dims, layout);
    pos = header.end;
    if (!header.is_output) {
      if (pos + len > tokens.size()) {
        fail(ErrorCode::ParseError,
             "truncated payload at position " + std::to_string(tokens.size()));
      }
      Segment seg;
      seg.ref = header.ref;
      seg.dims = header.dims;
      seg.payload.assign(tokens.begin() + pos, tokens.begin() + pos + len);
      check_payload_ranges(seg, layout, ErrorCode::RangeViolation);
      pos += len;
      if (pos >= tokens.size() || tokens[pos] != layout.eos_field_id()) {
        fail(ErrorCode::ParseError,
             "missing field separator at position " + std::to_string(pos));
      }
      ++pos;
      instance.conditions.push_back(std::move(seg));
      continue;
    }

    instance.output_ref = header.ref;
    instance.output_dims = header.dims;
    instance.expected_output_len = len;
    const std::size_t remaining = tokens.size() - pos;
    if (remaining == 0) return instance;  // inference prompt
    if (remaining != len) {
      fail(ErrorCode::ParseError,
           "output payload length mismatch at position " + std::to_string(pos));
    }
    instance.output_payload.assign(tokens.begin() + pos, tokens.end());
    Segment check{instance.output_ref, instance.output_dims,
                  instance.output_payload};
    check_payload_ranges(check, layout, ErrorCode::RangeViolation);
    for (const Segment& seg : instance.conditions) {
      if (seg.ref == instance.output_ref) {
        fail(ErrorCode::ParseError, "output repeats a condition ref");
      }
    }
    return instance;
  }
}

std::pair<std::size_t, std::size_t> target_span(std::span<const TokenId> tokens,
                                                std::size_t prefix_len,
                                                const VocabularyLayout& layout) {
  if (tokens.empty() || tokens[0] != layout.bos_id()) {
    fail(ErrorCode::NoOutputSection, "not a serialized instance");
  }
  // Scan the field structure to find the output header.
  std::size_t pos = 1;
  while (pos < tokens.size()) {
    HeaderInfo header;
    try {
      header = read_header(tokens, pos, layout);
    } catch (const Error&) {
      fail(ErrorCode::NoOutputSection,
           "no output header at position " + std::to_string(pos));
    }
    const std::uint64_t len = expected_len(header.ref, header.dims, layout);
    if (header.is_output) {
      if (header.end != prefix_len) {
        fail(ErrorCode::NoOutputSection,
             "prefix_len does not match the output header boundary");
      }
      return {prefix_len, tokens.size()};
    }
    pos = header.end + len + 1;  // payload plus field separator
  }
  fail(ErrorCode::NoOutputSection, "sequence has no output section");
}

}  // namespace archon
