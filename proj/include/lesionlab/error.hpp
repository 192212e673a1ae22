#pragma once

#include <stdexcept>
#include <string>

namespace lesionlab {

enum class Err {
  // manifest / ingestion
  MissingImage,
  AmbiguousLabel,
  DuplicateSample,
  ClassTooSmall,
  CountOutOfRange,
  EmptyClass,
  LabelOutOfRange,
  // models / checkpoints
  UnknownBackbone,
  CheckpointShapeMismatch,
  CheckpointUnreadable,
  MissingMasks,
  DivergedTraining,
  ImageTooSmall,
  // metrics
  DimensionMismatch,
  LengthMismatch,
  NoSamples,
  EmptyInput,
  // crop / pipeline
  MissingPredictedMask,
  IoFailure,
  MissingUpstreamArtifact,
  ConfigHashMismatch,
  SampleSetMismatch,
  InvalidConfig,
};

const char* err_name(Err code);

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& message)
      : std::runtime_error(std::string(err_name(code)) + ": " + message), code_(code) {}

  Err code() const noexcept { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void raise(Err code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, Err code, const std::string& message) {
  if (!condition) raise(code, message);
}

}  // namespace lesionlab
