#include <doctest.h>

#include <cmath>

#include "lesionlab/image_io.hpp"
#include "lesionlab/metrics.hpp"
#include "lesionlab/seg.hpp"
#include "test_util.hpp"

using namespace lesionlab;
using testutil::TempDir;

namespace {

Detection make_detection(int h, int w, const BBox& box, double score) {
  Detection det;
  det.box = box;
  det.score = score;
  det.mask = Mask(h, w);
  for (int r = box.row_min; r <= box.row_max; ++r)
    for (int c = box.col_min; c <= box.col_max; ++c) det.mask.at(r, c) = 1;
  return det;
}

}  // namespace

TEST_SUITE("seg") {

TEST_CASE("config invariants") {
  SegConfig config;
  config.backbone_init = BackboneInit::classifier_transfer;
  CHECK_THROWS_AS(config.validate(), Error);
  config.classifier_checkpoint = "somewhere.ckpt";
  CHECK_NOTHROW(config.validate());

  config = SegConfig{};
  config.confidence_threshold = 1.5;
  CHECK_THROWS_AS(config.validate(), Error);
  config = SegConfig{};
  config.roi_candidates_per_image = 0;
  CHECK_THROWS_AS(config.validate(), Error);
}

TEST_CASE("identical seeds build identical segmentation models") {
  SegConfig config;
  config.seed = 5;
  SegModel a(config);
  SegModel b(config);
  auto pa = a.params(), pb = b.params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].value->data == pb[i].value->data);
  }
}

TEST_CASE("unknown backbone id is rejected") {
  SegConfig config;
  config.backbone_id = "nonexistent";
  try {
    SegModel model(config);
    FAIL("expected UnknownBackbone");
  } catch (const Error& e) {
    CHECK(e.code() == Err::UnknownBackbone);
  }
}

TEST_CASE("backbone transfer copies every matching tensor") {
  TempDir tmp("seg_transfer");
  ClsConfig cls_config;
  cls_config.seed = 31;
  ClsModel classifier = build_classifier(cls_config);
  save_checkpoint(classifier.snapshot(nlohmann::json::array()), tmp.path / "cls.ckpt");

  SegConfig seg_config;
  seg_config.seed = 99;  // different init so the copy is observable
  seg_config.backbone_init = BackboneInit::classifier_transfer;
  seg_config.classifier_checkpoint = (tmp.path / "cls.ckpt").string();
  SegModel model = build_seg_model(seg_config);

  // every backbone tensor must now equal the classifier's
  auto cls_params = classifier.params();
  auto seg_params = model.params();
  int64_t backbone_tensors = 0;
  for (const auto& sp : seg_params) {
    if (sp.name.rfind("backbone.", 0) != 0) continue;
    ++backbone_tensors;
    bool found = false;
    for (const auto& cp : cls_params) {
      if (cp.name == sp.name) {
        CHECK(cp.value->data == sp.value->data);
        found = true;
      }
    }
    CHECK(found);
  }
  CHECK(backbone_tensors > 0);

  // explicit report
  SegModel fresh{[&] {
    SegConfig c = seg_config;
    c.backbone_init = BackboneInit::random;
    return c;
  }()};
  const TransferReport report = transfer_backbone_weights(tmp.path / "cls.ckpt", fresh);
  CHECK(report.copied_fraction == doctest::Approx(1.0));
  CHECK(report.missing.empty());
  bool skipped_head = false;
  for (const auto& name : report.skipped) {
    if (name == "head.fc.weight") skipped_head = true;
    CHECK(name.rfind("backbone.", 0) != 0);
  }
  CHECK(skipped_head);

  // forward-pass agreement on fixed inputs (eval mode)
  Rng rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    nn::Tensor x({1, 3, 64, 64});
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    nn::Tensor fa = classifier.backbone().forward(x, false, false);
    nn::Tensor fb = fresh.backbone().forward(x, false, false);
    REQUIRE(fa.shape == fb.shape);
    for (size_t i = 0; i < fa.data.size(); ++i) {
      CHECK(std::fabs(fa.data[i] - fb.data[i]) < 1e-5f);
    }
  }
}

TEST_CASE("transfer rejects a checkpoint from a different backbone") {
  TempDir tmp("seg_transfer_mismatch");
  ClsConfig cls_config;
  cls_config.backbone_id = "tiny4";
  ClsModel classifier = build_classifier(cls_config);
  save_checkpoint(classifier.snapshot(nlohmann::json::array()), tmp.path / "cls4.ckpt");

  SegConfig seg_config;  // tiny8
  SegModel model(seg_config);
  try {
    transfer_backbone_weights(tmp.path / "cls4.ckpt", model);
    FAIL("expected CheckpointShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Err::CheckpointShapeMismatch);
  }

  try {
    transfer_backbone_weights(tmp.path / "does_not_exist.ckpt", model);
    FAIL("expected CheckpointUnreadable");
  } catch (const Error& e) {
    CHECK(e.code() == Err::CheckpointUnreadable);
  }
}

TEST_CASE("select_primary_mask policy") {
  const int h = 32, w = 32;
  const auto det_a = make_detection(h, w, {4, 4, 10, 10}, 0.95);
  const auto det_b = make_detection(h, w, {20, 20, 27, 27}, 0.92);

  SUBCASE("highest score above threshold wins") {
    const Mask m = select_primary_mask({det_b, det_a}, h, w, 0.9);
    CHECK(m == det_a.mask);
  }
  SUBCASE("fallback A: best sub-threshold detection") {
    const auto weak = make_detection(h, w, {2, 2, 6, 6}, 0.6);
    const Mask m = select_primary_mask({weak}, h, w, 0.9);
    CHECK(m == weak.mask);
  }
  SUBCASE("fallback B: no detections gives the full-frame mask") {
    const Mask m = select_primary_mask({}, h, w, 0.9);
    CHECK(m.area() == h * w);
  }
}

TEST_CASE("raising the threshold only ever switches to fallback A") {
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 6));
    std::vector<Detection> detections;
    for (int i = 0; i < n; ++i) {
      const int r0 = static_cast<int>(rng.uniform_int(0, 20));
      const int c0 = static_cast<int>(rng.uniform_int(0, 20));
      detections.push_back(make_detection(32, 32,
                                          {r0, c0, r0 + static_cast<int>(rng.uniform_int(2, 8)),
                                           c0 + static_cast<int>(rng.uniform_int(2, 8))},
                                          rng.uniform(0.0, 1.0)));
    }
    double best_score = -1.0;
    const Detection* best = nullptr;
    for (const auto& det : detections) {
      if (det.score > best_score) {
        best_score = det.score;
        best = &det;
      }
    }
    for (double threshold : {0.1, 0.5, 0.9, 0.99}) {
      const Mask selected = select_primary_mask(detections, 32, 32, threshold);
      // the global argmax is selected whether or not it clears the threshold
      // (eligible-set argmax == global argmax, or fallback A == global argmax)
      CHECK(selected == best->mask);
    }
  }
}

TEST_CASE("untrained model emits well-formed detections") {
  SegConfig config;
  config.seed = 61;
  SegModel model(config);
  Rng rng(62);
  for (int trial = 0; trial < 4; ++trial) {
    const auto rendered = render_lesion(trial % kNumClasses, rng.next_u64(), 64, 64);
    const auto detections = infer_detections(model, rendered.image);
    for (size_t i = 0; i < detections.size(); ++i) {
      const auto& det = detections[i];
      if (i > 0) CHECK(detections[i - 1].score >= det.score);
      CHECK(det.score >= 0.0);
      CHECK(det.score <= 1.0);
      CHECK(det.box.row_min >= 0);
      CHECK(det.box.col_min >= 0);
      CHECK(det.box.row_max < 64);
      CHECK(det.box.col_max < 64);
      CHECK(det.box.row_min <= det.box.row_max);
      CHECK(det.box.col_min <= det.box.col_max);
      CHECK(det.mask.height == 64);
      CHECK(det.mask.width == 64);
      // mask foreground confined to the box
      for (int r = 0; r < 64; ++r) {
        for (int c = 0; c < 64; ++c) {
          if (det.mask.at(r, c)) {
            CHECK(r >= det.box.row_min);
            CHECK(r <= det.box.row_max);
            CHECK(c >= det.box.col_min);
            CHECK(c <= det.box.col_max);
          }
        }
      }
    }
  }

  CHECK_THROWS_AS(infer_detections(model, Image(16, 16, 3)), Error);
}

TEST_CASE("one-epoch smoke training on 8 synthetic images") {
  TempDir tmp("seg_smoke");
  const auto manifest = testutil::small_corpus(tmp.path, {{0, 4}, {1, 4}}, 71, 0.25);

  SegConfig config;
  config.epochs = 1;
  config.seed = 71;
  SegModel model(config);
  const auto ckpt = train_segmentation(model, manifest, config);
  const auto& log = ckpt.meta.at("log");
  REQUIRE(log.size() == 1);
  CHECK(std::isfinite(log.at(0).at("train_loss").get<double>()));
  CHECK(log.at(0).contains("val_mean_jaccard"));
  CHECK(ckpt.meta.at("kind") == "seg");
}

TEST_CASE("config snapshot round-trips to an equal config") {
  SegConfig config;
  config.roi_candidates_per_image = 123;
  config.confidence_threshold = 0.42;
  config.backbone_init = BackboneInit::classifier_transfer;
  config.classifier_checkpoint = "x.ckpt";
  config.seed = 9;
  const SegConfig reparsed = SegConfig::from_json(config.to_json());
  CHECK(reparsed.to_json() == config.to_json());
}

TEST_CASE("fixed seeds give identical epoch-0 loss across two runs") {
  TempDir tmp("seg_epoch0");
  const auto manifest = testutil::small_corpus(tmp.path, {{0, 5}, {1, 5}}, 83, 0.3);

  const auto epoch0_loss = [&] {
    SegConfig config;
    config.epochs = 1;
    config.seed = 83;
    SegModel model(config);
    const auto ckpt = train_segmentation(model, manifest, config);
    return ckpt.meta.at("log").at(0).at("train_loss").get<double>();
  };
  CHECK(epoch0_loss() == epoch0_loss());
}

TEST_CASE("training rejects manifests without masks") {
  TempDir tmp("seg_nomasks");
  auto manifest = testutil::small_corpus(tmp.path, {{0, 4}, {1, 4}}, 73, 0.25);
  for (auto& record : manifest.records) record.mask_path.reset();

  SegConfig config;
  config.epochs = 1;
  SegModel model(config);
  try {
    train_segmentation(model, manifest, config);
    FAIL("expected MissingMasks");
  } catch (const Error& e) {
    CHECK(e.code() == Err::MissingMasks);
  }
}

}  // TEST_SUITE
