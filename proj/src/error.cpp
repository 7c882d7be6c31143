#include "archon/error.hpp"

namespace archon {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::DuplicateRange: return "DuplicateRange";
    case ErrorCode::InvalidSize: return "InvalidSize";
    case ErrorCode::LocalIdOutOfRange: return "LocalIdOutOfRange";
    case ErrorCode::NoSuchRange: return "NoSuchRange";
    case ErrorCode::NotAModalityToken: return "NotAModalityToken";
    case ErrorCode::TooFewVectors: return "TooFewVectors";
    case ErrorCode::InvalidInput: return "InvalidInput";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::CodeOutOfRange: return "CodeOutOfRange";
    case ErrorCode::BadTemporalLength: return "BadTemporalLength";
    case ErrorCode::TokenCountMismatch: return "TokenCountMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidWeight: return "InvalidWeight";
    case ErrorCode::InvalidDims: return "InvalidDims";
    case ErrorCode::InvalidInstance: return "InvalidInstance";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::RangeViolation: return "RangeViolation";
    case ErrorCode::NoOutputSection: return "NoOutputSection";
    case ErrorCode::UnreachableModality: return "UnreachableModality";
    case ErrorCode::NoPlan: return "NoPlan";
    case ErrorCode::InvalidPerplexity: return "InvalidPerplexity";
    case ErrorCode::InstanceTooLarge: return "InstanceTooLarge";
    case ErrorCode::NoTargetTokens: return "NoTargetTokens";
    case ErrorCode::InvalidPrefix: return "InvalidPrefix";
    case ErrorCode::TokenOutOfVocab: return "TokenOutOfVocab";
    case ErrorCode::DivergedTraining: return "DivergedTraining";
    case ErrorCode::ContextOverflow: return "ContextOverflow";
    case ErrorCode::WorldTooSmall: return "WorldTooSmall";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

}  // namespace archon
