#pragma once

#include <stdexcept>
#include <string>

namespace archon {

enum class ErrorCode {
  // vocab
  DuplicateRange,
  InvalidSize,
  LocalIdOutOfRange,
  NoSuchRange,
  NotAModalityToken,
  // quantizers
  TooFewVectors,
  InvalidInput,
  DimMismatch,
  CodeOutOfRange,
  // modality codecs
  BadTemporalLength,
  TokenCountMismatch,
  EmptyInput,
  LabelOutOfRange,
  ShapeMismatch,
  InvalidWeight,
  InvalidDims,
  // prompt
  InvalidInstance,
  ParseError,
  RangeViolation,
  NoOutputSection,
  // tasks
  UnreachableModality,
  NoPlan,
  // sampler
  InvalidPerplexity,
  InstanceTooLarge,
  NoTargetTokens,
  // model
  InvalidPrefix,
  TokenOutOfVocab,
  DivergedTraining,
  ContextOverflow,
  // synthdata
  WorldTooSmall,
  // cli
  InvalidConfig,
  IoError,
};

const char* error_code_name(ErrorCode code);

/// Single exception type carrying a machine-checkable code plus a message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace archon
