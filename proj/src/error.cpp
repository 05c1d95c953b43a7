#include "dynpatch/error.hpp"

namespace dynpatch {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
  case ErrorKind::ShortBuffer: return "ShortBuffer";
  case ErrorKind::BadMagic: return "BadMagic";
  case ErrorKind::UnsupportedDatatype: return "UnsupportedDatatype";
  case ErrorKind::BadDims: return "BadDims";
  case ErrorKind::NonFiniteData: return "NonFiniteData";
  case ErrorKind::SizeMismatch: return "SizeMismatch";
  case ErrorKind::IoError: return "IoError";
  case ErrorKind::DegenerateVolume: return "DegenerateVolume";
  case ErrorKind::TooFewFrames: return "TooFewFrames";
  case ErrorKind::NotDivisible: return "NotDivisible";
  case ErrorKind::GridMismatch: return "GridMismatch";
  case ErrorKind::OutOfBounds: return "OutOfBounds";
  case ErrorKind::BadDim: return "BadDim";
  case ErrorKind::LengthMismatch: return "LengthMismatch";
  case ErrorKind::EmptyInput: return "EmptyInput";
  case ErrorKind::CountMismatch: return "CountMismatch";
  case ErrorKind::ShapeMismatch: return "ShapeMismatch";
  case ErrorKind::BadSpec: return "BadSpec";
  case ErrorKind::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

} // namespace dynpatch
