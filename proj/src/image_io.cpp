#include "lesionlab/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstdint>
#include <fstream>

namespace lesionlab {

namespace {

Image from_mat(const cv::Mat& mat) {
  Image out(mat.rows, mat.cols, mat.channels());
  if (mat.channels() == 3) {
    cv::Mat rgb;
    cv::cvtColor(mat, rgb, cv::COLOR_BGR2RGB);
    std::memcpy(out.data.data(), rgb.data, out.data.size());
  } else {
    std::memcpy(out.data.data(), mat.data, out.data.size());
  }
  return out;
}

cv::Mat to_mat(const Image& image) {
  const int type = image.channels == 3 ? CV_8UC3 : CV_8UC1;
  cv::Mat mat(image.height, image.width, type);
  std::memcpy(mat.data, image.data.data(), image.data.size());
  if (image.channels == 3) cv::cvtColor(mat, mat, cv::COLOR_RGB2BGR);
  return mat;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) raise(Err::IoFailure, "cannot read image " + path.string());
  if (mat.channels() == 4) cv::cvtColor(mat, mat, cv::COLOR_BGRA2BGR);
  if (mat.depth() != CV_8U) mat.convertTo(mat, CV_8U);
  return from_mat(mat);
}

void write_image(const std::filesystem::path& path, const Image& image) {
  if (!cv::imwrite(path.string(), to_mat(image))) {
    raise(Err::IoFailure, "cannot write image " + path.string());
  }
}

Mask read_mask(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (mat.empty()) raise(Err::IoFailure, "cannot read mask " + path.string());
  Mask mask(mat.rows, mat.cols);
  for (int r = 0; r < mat.rows; ++r) {
    const uint8_t* row = mat.ptr<uint8_t>(r);
    for (int c = 0; c < mat.cols; ++c) mask.at(r, c) = row[c] >= 128 ? 1 : 0;
  }
  return mask;
}

void write_mask(const std::filesystem::path& path, const Mask& mask) {
  cv::Mat mat(mask.height, mask.width, CV_8UC1);
  for (int r = 0; r < mask.height; ++r) {
    uint8_t* row = mat.ptr<uint8_t>(r);
    for (int c = 0; c < mask.width; ++c) row[c] = mask.at(r, c) ? 255 : 0;
  }
  if (!cv::imwrite(path.string(), mat)) {
    raise(Err::IoFailure, "cannot write mask " + path.string());
  }
}

Image resize_image(const Image& image, int out_height, int out_width, ResizeFilter filter) {
  if (image.height == out_height && image.width == out_width) return image;
  int interp = cv::INTER_LINEAR;
  if (filter == ResizeFilter::nearest) interp = cv::INTER_NEAREST;
  if (filter == ResizeFilter::area) interp = cv::INTER_AREA;
  cv::Mat src = to_mat(image);
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(out_width, out_height), 0, 0, interp);
  return from_mat(dst);
}

std::pair<int, int> png_dimensions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  uint8_t header[24];
  if (!in.read(reinterpret_cast<char*>(header), sizeof(header))) {
    raise(Err::IoFailure, "cannot read PNG header of " + path.string());
  }
  static const uint8_t magic[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (!std::equal(magic, magic + 8, header)) {
    raise(Err::IoFailure, "not a PNG file: " + path.string());
  }
  auto be32 = [&](int offset) {
    return (static_cast<int>(header[offset]) << 24) | (header[offset + 1] << 16) |
           (header[offset + 2] << 8) | header[offset + 3];
  };
  return {be32(20), be32(16)};  // IHDR stores width then height
}

}  // namespace lesionlab
