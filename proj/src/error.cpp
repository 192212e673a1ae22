#include "lesionlab/error.hpp"

namespace lesionlab {

const char* err_name(Err code) {
  switch (code) {
    case Err::MissingImage: return "MissingImage";
    case Err::AmbiguousLabel: return "AmbiguousLabel";
    case Err::DuplicateSample: return "DuplicateSample";
    case Err::ClassTooSmall: return "ClassTooSmall";
    case Err::CountOutOfRange: return "CountOutOfRange";
    case Err::EmptyClass: return "EmptyClass";
    case Err::LabelOutOfRange: return "LabelOutOfRange";
    case Err::UnknownBackbone: return "UnknownBackbone";
    case Err::CheckpointShapeMismatch: return "CheckpointShapeMismatch";
    case Err::CheckpointUnreadable: return "CheckpointUnreadable";
    case Err::MissingMasks: return "MissingMasks";
    case Err::DivergedTraining: return "DivergedTraining";
    case Err::ImageTooSmall: return "ImageTooSmall";
    case Err::DimensionMismatch: return "DimensionMismatch";
    case Err::LengthMismatch: return "LengthMismatch";
    case Err::NoSamples: return "NoSamples";
    case Err::EmptyInput: return "EmptyInput";
    case Err::MissingPredictedMask: return "MissingPredictedMask";
    case Err::IoFailure: return "IoFailure";
    case Err::MissingUpstreamArtifact: return "MissingUpstreamArtifact";
    case Err::ConfigHashMismatch: return "ConfigHashMismatch";
    case Err::SampleSetMismatch: return "SampleSetMismatch";
    case Err::InvalidConfig: return "InvalidConfig";
  }
  return "UnknownError";
}

}  // namespace lesionlab
