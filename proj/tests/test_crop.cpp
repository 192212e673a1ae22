#include <doctest.h>

#include "lesionlab/crop.hpp"
#include "lesionlab/image_io.hpp"
#include "lesionlab/metrics.hpp"
#include "test_util.hpp"

using namespace lesionlab;
using testutil::TempDir;
namespace fs = std::filesystem;

TEST_SUITE("crop") {

TEST_CASE("mask_to_bbox") {
  SUBCASE("tight box over scattered foreground") {
    Mask mask(10, 10);
    mask.at(2, 3) = 1;
    mask.at(5, 7) = 1;
    const auto bbox = mask_to_bbox(mask);
    REQUIRE(bbox.has_value());
    CHECK(*bbox == BBox{2, 3, 5, 7});
  }
  SUBCASE("empty mask gives no box") {
    CHECK_FALSE(mask_to_bbox(Mask(8, 8)).has_value());
  }
  SUBCASE("full-frame mask spans the image") {
    const auto bbox = mask_to_bbox(Mask::full_frame(64, 64));
    REQUIRE(bbox.has_value());
    CHECK(*bbox == BBox{0, 0, 63, 63});
  }
}

TEST_CASE("expand_bbox") {
  SUBCASE("10% margin on a 20x20 box adds 2px per side") {
    CHECK(expand_bbox({10, 10, 29, 29}, 0.1, 100, 100, 8) == BBox{8, 8, 31, 31});
  }
  SUBCASE("zero margin is the identity") {
    CHECK(expand_bbox({10, 10, 29, 29}, 0.0, 100, 100, 8) == BBox{10, 10, 29, 29});
  }
  SUBCASE("expansion clamps at the image border") {
    const BBox out = expand_bbox({0, 0, 19, 19}, 0.5, 100, 100, 8);
    CHECK(out.row_min == 0);
    CHECK(out.col_min == 0);
    CHECK(out.row_max == 29);
    CHECK(out.col_max == 29);
  }
  SUBCASE("small boxes are grown to min_crop_size") {
    const BBox out = expand_bbox({30, 30, 33, 33}, 0.0, 100, 100, 16);
    CHECK(out.height() >= 16);
    CHECK(out.width() >= 16);
    CHECK(out.row_min >= 0);
    CHECK(out.row_max < 100);
  }
  SUBCASE("min size growth respects image bounds near a corner") {
    const BBox out = expand_bbox({0, 0, 2, 2}, 0.0, 100, 100, 16);
    CHECK(out.height() == 16);
    CHECK(out.row_min == 0);
  }
}

TEST_CASE("crop policy validation") {
  CropPolicy policy;
  policy.margin_fraction = 1.2;
  CHECK_THROWS_AS(validate_policy(policy), Error);
  policy = CropPolicy{};
  policy.min_crop_size = 4;
  CHECK_THROWS_AS(validate_policy(policy), Error);
}

TEST_CASE("crop_corpus derives a label- and split-preserving corpus") {
  TempDir tmp("crop_corpus");
  const auto manifest = testutil::small_corpus(tmp.path / "src", {{0, 6}, {2, 6}}, 77, 0.34);

  // use ground-truth masks as the "predicted" masks
  const fs::path masks_dir = tmp.path / "src" / "masks";
  CropPolicy policy;
  const auto cropped = crop_corpus(manifest, masks_dir, policy, tmp.path / "out");

  CHECK(cropped.class_counts == manifest.class_counts);
  REQUIRE(cropped.size() == manifest.size());
  for (int64_t i = 0; i < manifest.size(); ++i) {
    const auto& before = manifest.records[static_cast<size_t>(i)];
    const auto& after = cropped.records[static_cast<size_t>(i)];
    CHECK(before.sample_id == after.sample_id);
    CHECK(before.label == after.label);
    CHECK(before.split == after.split);  // split preservation, no leakage
    CHECK(fs::exists(tmp.path / "out" / after.image_path));
  }
  CHECK(fs::exists(tmp.path / "out" / "crops.json"));
  CHECK(fs::exists(tmp.path / "out" / "labels.csv"));

  SUBCASE("crops contain nearly all lesion foreground and respect bounds") {
    for (const auto& record : manifest.records) {
      const Mask gt = read_mask(tmp.path / "src" / *record.mask_path);
      const Image crop = read_image(tmp.path / "out" / "images" / (record.sample_id + ".png"));
      const auto tight = mask_to_bbox(gt);
      REQUIRE(tight.has_value());
      const BBox applied = expand_bbox(*tight, policy.margin_fraction, gt.height, gt.width,
                                       policy.min_crop_size);
      CHECK(crop.height == applied.height());
      CHECK(crop.width == applied.width());
      CHECK(crop.height >= std::min(policy.min_crop_size, gt.height));
      CHECK(crop.width >= std::min(policy.min_crop_size, gt.width));

      int64_t inside = 0;
      for (int r = applied.row_min; r <= applied.row_max; ++r)
        for (int c = applied.col_min; c <= applied.col_max; ++c) inside += gt.at(r, c);
      CHECK(static_cast<double>(inside) / static_cast<double>(gt.area()) >= 0.99);
    }
  }
}

TEST_CASE("crop_corpus passes empty-mask records through unchanged") {
  TempDir tmp("crop_empty");
  const auto manifest = testutil::small_corpus(tmp.path / "src", {{0, 3}, {1, 3}}, 79, 0.34);
  const fs::path masks_dir = tmp.path / "empty_masks";
  fs::create_directories(masks_dir);
  for (const auto& record : manifest.records) {
    write_mask(masks_dir / (record.sample_id + "_segmentation.png"), Mask(64, 64));
  }
  const auto cropped = crop_corpus(manifest, masks_dir, CropPolicy{}, tmp.path / "out");
  for (size_t i = 0; i < cropped.records.size(); ++i) {
    const Image original =
        read_image(fs::path(manifest.source_root) / manifest.records[i].image_path);
    const Image out = read_image(tmp.path / "out" / cropped.records[i].image_path);
    CHECK(out == original);
  }
}

TEST_CASE("crop_corpus requires a predicted mask per record") {
  TempDir tmp("crop_missing");
  const auto manifest = testutil::small_corpus(tmp.path / "src", {{0, 3}, {1, 3}}, 81, 0.34);
  const fs::path masks_dir = tmp.path / "none";
  fs::create_directories(masks_dir);
  try {
    crop_corpus(manifest, masks_dir, CropPolicy{}, tmp.path / "out");
    FAIL("expected MissingPredictedMask");
  } catch (const Error& e) {
    CHECK(e.code() == Err::MissingPredictedMask);
  }
}

}  // TEST_SUITE
