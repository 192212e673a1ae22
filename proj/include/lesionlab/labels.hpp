#pragma once

#include <array>
#include <string>
#include <string_view>

namespace lesionlab {

inline constexpr int kNumClasses = 7;

struct ClassLabel {
  int id;
  std::string_view code;
  std::string_view display_name;
};

// Fixed diagnosis taxonomy, ids 0..6.
const std::array<ClassLabel, kNumClasses>& class_table();

// Throws LabelOutOfRange for an unknown code / id.
int label_from_code(std::string_view code);
std::string_view code_from_label(int id);

bool is_valid_label(int id);

}  // namespace lesionlab
