#pragma once

#include <cstdint>
#include <filesystem>
#include <map>

#include "lesionlab/image.hpp"
#include "lesionlab/manifest.hpp"

namespace lesionlab {

enum class Difficulty { separable, noisy };

struct SynthSpec {
  int height = 64;
  int width = 64;
  std::map<int, int64_t> class_counts;
  uint64_t seed = 0;
  Difficulty difficulty = Difficulty::separable;
};

struct RenderedLesion {
  Image image;
  Mask mask;
};

// One connected class-conditional lesion blob on a skin-toned background.
// Deterministic in (label, seed); mask is the exact rasterized blob.
RenderedLesion render_lesion(int label, uint64_t seed, int height, int width,
                             Difficulty difficulty = Difficulty::separable);

// Writes images/, masks/ and labels.csv under out_root in the manifest
// module's external formats, then ingests and returns the manifest.
DatasetManifest generate_synthetic_corpus(const SynthSpec& spec,
                                          const std::filesystem::path& out_root);

void validate_spec(const SynthSpec& spec);

}  // namespace lesionlab
