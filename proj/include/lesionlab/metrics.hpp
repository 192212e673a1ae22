#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lesionlab/image.hpp"
#include "lesionlab/labels.hpp"

namespace lesionlab {

// |pred ∩ truth| / |pred ∪ truth|. Both empty -> 1.0, exactly one empty -> 0.0.
double jaccard(const Mask& pred, const Mask& truth);

struct JaccardSummary {
  std::vector<double> per_pair;
  double mean = 0.0;
  double thresholded_0_65 = 0.0;  // scores below 0.65 count as 0
};

JaccardSummary mean_jaccard(const std::vector<std::pair<Mask, Mask>>& pairs);
JaccardSummary summarize_jaccard(const std::vector<double>& scores);

struct ConfusionMatrix {
  std::array<std::array<int64_t, kNumClasses>, kNumClasses> counts{};  // [true][pred]

  int64_t total() const;
  int64_t trace() const;
  int64_t row_total(int label) const;
};

ConfusionMatrix confusion_matrix(const std::vector<int>& true_labels,
                                 const std::vector<int>& pred_labels);

// Recall per class; classes without true samples map to nullopt.
std::array<std::optional<double>, kNumClasses> per_class_recall(const ConfusionMatrix& cm);

// Mean recall over classes with at least one true sample (balanced accuracy).
double normalized_multiclass_accuracy(const ConfusionMatrix& cm);

struct SegmentationReport {
  std::vector<std::string> sample_ids;  // aligned with per_image_jaccard
  std::vector<double> per_image_jaccard;
  double mean_jaccard = 0.0;
  double thresholded_jaccard_0_65 = 0.0;
};

struct ClassificationReport {
  std::vector<std::string> sample_ids;
  ConfusionMatrix confusion;
  std::array<std::optional<double>, kNumClasses> per_class_recall{};
  double normalized_accuracy = 0.0;
};

struct MetricsReport {
  std::string model_id;
  std::string corpus_id;
  std::string timestamp;
  std::optional<SegmentationReport> segmentation;
  std::optional<ClassificationReport> classification;
};

// Writes report.json plus, when the matching section is present,
// confusion_heatmap.png and jaccard_hist.png.
void render_report(const MetricsReport& report, const std::filesystem::path& out_dir);
void save_report_json(const MetricsReport& report, const std::filesystem::path& json_path);
MetricsReport load_report(const std::filesystem::path& json_path);

// 5x7 bitmap glyph rasterizer used for image annotations.
void draw_text(Image& image, int row, int col, const std::string& text,
               uint8_t r, uint8_t g, uint8_t b, int scale = 1);
Image render_confusion_heatmap(const ConfusionMatrix& cm);
Image render_jaccard_histogram(const std::vector<double>& scores);

}  // namespace lesionlab
