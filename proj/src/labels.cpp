#include "lesionlab/labels.hpp"

#include "lesionlab/error.hpp"

namespace lesionlab {

const std::array<ClassLabel, kNumClasses>& class_table() {
  static const std::array<ClassLabel, kNumClasses> table = {{
      {0, "MEL", "Melanoma"},
      {1, "NV", "Melanocytic nevus"},
      {2, "BCC", "Basal cell carcinoma"},
      {3, "AKIEC", "Actinic keratosis / intraepithelial carcinoma"},
      {4, "BKL", "Benign keratosis"},
      {5, "DF", "Dermatofibroma"},
      {6, "VASC", "Vascular lesion"},
  }};
  return table;
}

int label_from_code(std::string_view code) {
  for (const auto& entry : class_table()) {
    if (entry.code == code) return entry.id;
  }
  raise(Err::LabelOutOfRange, "unknown class code '" + std::string(code) + "'");
}

std::string_view code_from_label(int id) {
  if (!is_valid_label(id)) {
    raise(Err::LabelOutOfRange, "class id " + std::to_string(id) + " outside [0,6]");
  }
  return class_table()[static_cast<size_t>(id)].code;
}

bool is_valid_label(int id) { return id >= 0 && id < kNumClasses; }

}  // namespace lesionlab
