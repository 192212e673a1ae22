#include <doctest.h>

#include <cmath>

#include "lesionlab/cls.hpp"
#include "lesionlab/image_io.hpp"
#include "lesionlab/metrics.hpp"
#include "test_util.hpp"

using namespace lesionlab;
using testutil::TempDir;

namespace {

ClassWeights weights_of(std::initializer_list<std::pair<int, double>> entries) {
  ClassWeights w;
  for (const auto& [label, weight] : entries) w.weights[label] = weight;
  return w;
}

std::array<double, kNumClasses> uniform_rest(double p_true, int true_label) {
  std::array<double, kNumClasses> probs{};
  const double rest = (1.0 - p_true) / (kNumClasses - 1);
  for (int i = 0; i < kNumClasses; ++i) probs[static_cast<size_t>(i)] = rest;
  probs[static_cast<size_t>(true_label)] = p_true;
  return probs;
}

}  // namespace

TEST_SUITE("cls") {

TEST_CASE("classifier head has exactly 7 output units") {
  ClsConfig config;
  config.seed = 3;
  ClsModel model = build_classifier(config);
  Rng rng(4);
  nn::Tensor x({1, 3, 64, 64});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  nn::Tensor scores = model.forward_scores(x, false, false);
  CHECK(scores.shape == std::vector<int>{1, kNumClasses});
}

TEST_CASE("identical seeds build identical classifiers") {
  ClsConfig config;
  config.seed = 17;
  ClsModel a = build_classifier(config);
  ClsModel b = build_classifier(config);
  auto pa = a.params(), pb = b.params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].value->data == pb[i].value->data);
}

TEST_CASE("unregistered backbone id is rejected") {
  ClsConfig config;
  config.backbone_id = "nonexistent";
  try {
    build_classifier(config);
    FAIL("expected UnknownBackbone");
  } catch (const Error& e) {
    CHECK(e.code() == Err::UnknownBackbone);
  }
}

TEST_CASE("weighted cross entropy values") {
  SUBCASE("perfect prediction costs zero") {
    CHECK(weighted_cross_entropy(uniform_rest(1.0, 2), 2, weights_of({{2, 5.0}})) ==
          doctest::Approx(0.0));
  }
  SUBCASE("p = 1/e with weight 2 costs exactly 2") {
    CHECK(weighted_cross_entropy(uniform_rest(std::exp(-1.0), 4), 4, weights_of({{4, 2.0}})) ==
          doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("uniform weights reduce to plain cross entropy") {
    const auto probs = uniform_rest(0.37, 1);
    ClassWeights uniform;
    for (int c = 0; c < kNumClasses; ++c) uniform.weights[c] = 1.0;
    CHECK(weighted_cross_entropy(probs, 1, uniform) == doctest::Approx(-std::log(0.37)));
  }
  SUBCASE("probability is clamped before the log") {
    CHECK(std::isfinite(weighted_cross_entropy(uniform_rest(0.0, 0), 0, weights_of({{0, 1.0}}))));
  }
}

TEST_CASE("score-space gradient equals w*(p - onehot) and finite differences") {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    std::array<double, kNumClasses> scores;
    for (auto& s : scores) s = rng.normal(0.0, 2.0);
    const int label = static_cast<int>(rng.uniform_int(0, kNumClasses - 1));
    const double weight = rng.uniform(0.2, 5.0);
    const auto result = weighted_ce_from_scores(scores, label, weight);

    // closed form
    double max_s = scores[0];
    for (double s : scores) max_s = std::max(max_s, s);
    double z = 0.0;
    for (double s : scores) z += std::exp(s - max_s);
    for (int i = 0; i < kNumClasses; ++i) {
      const double p = std::exp(scores[static_cast<size_t>(i)] - max_s) / z;
      const double expected = weight * (p - (i == label ? 1.0 : 0.0));
      CHECK(result.grad[static_cast<size_t>(i)] == doctest::Approx(expected).epsilon(1e-10));
    }

    // central finite differences, 1e-5 as the acceptance bound
    const double h = 1e-5;
    for (int i = 0; i < kNumClasses; ++i) {
      auto sp = scores, sm = scores;
      sp[static_cast<size_t>(i)] += h;
      sm[static_cast<size_t>(i)] -= h;
      const double numeric = (weighted_ce_from_scores(sp, label, weight).loss -
                              weighted_ce_from_scores(sm, label, weight).loss) / (2 * h);
      CHECK(std::fabs(result.grad[static_cast<size_t>(i)] - numeric) < 1e-5);
    }
  }
}

TEST_CASE("scaling all weights scales every loss value") {
  Rng rng(29);
  for (int trial = 0; trial < 50; ++trial) {
    std::array<double, kNumClasses> scores;
    for (auto& s : scores) s = rng.normal();
    const int label = static_cast<int>(rng.uniform_int(0, kNumClasses - 1));
    const double w = rng.uniform(0.1, 3.0);
    const double base = weighted_ce_from_scores(scores, label, w).loss;
    const double doubled = weighted_ce_from_scores(scores, label, 2.0 * w).loss;
    CHECK(doubled == 2.0 * base);  // exact: scaling by a power of two
  }
}

TEST_CASE("argmax ties break to the lowest class id") {
  std::array<double, kNumClasses> probs{};
  probs[2] = 0.3;
  probs[5] = 0.3;
  CHECK(argmax_label(probs) == 2);
  probs[5] = 0.31;
  CHECK(argmax_label(probs) == 5);
}

TEST_CASE("argmax is invariant under strictly monotone transforms") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    std::array<double, kNumClasses> probs;
    for (auto& p : probs) p = rng.uniform(0.0, 1.0);
    const int base = argmax_label(probs);
    auto transformed = probs;
    for (auto& p : transformed) p = std::exp(3.0 * p) + 1.0;
    CHECK(argmax_label(transformed) == base);
  }
}

TEST_CASE("one-epoch smoke training on a 14-image corpus") {
  TempDir tmp("cls_smoke");
  std::map<int, int64_t> counts;
  for (int c = 0; c < kNumClasses; ++c) counts[c] = 2;
  const auto manifest = testutil::small_corpus(tmp.path, counts, 5, 0.5);

  ClsConfig config;
  config.epochs = 1;
  config.seed = 11;
  config.batch_size = 4;
  ClsModel model = build_classifier(config);
  const auto ckpt = train_classifier(model, manifest, config);

  const auto& log = ckpt.meta.at("log");
  REQUIRE(log.size() == 1);
  CHECK(std::isfinite(log.at(0).at("train_loss").get<double>()));
  CHECK(ckpt.meta.at("kind") == "cls");
}

TEST_CASE("prediction is a valid distribution and deterministic") {
  TempDir tmp("cls_predict");
  const auto rendered = render_lesion(3, 99, 64, 64);

  ClsConfig config;
  config.seed = 7;
  ClsModel model = build_classifier(config);

  const Prediction a = predict(model, rendered.image);
  const Prediction b = predict(model, rendered.image);
  double sum = 0.0;
  for (int c = 0; c < kNumClasses; ++c) {
    CHECK(a.probs[static_cast<size_t>(c)] >= 0.0);
    CHECK(a.probs[static_cast<size_t>(c)] <= 1.0);
    sum += a.probs[static_cast<size_t>(c)];
    CHECK(a.probs[static_cast<size_t>(c)] == b.probs[static_cast<size_t>(c)]);
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(a.label == argmax_label(a.probs));

  CHECK_THROWS_AS(predict(model, Image(4, 4, 3)), Error);
}

TEST_CASE("config snapshot round-trips to an equal config") {
  ClsConfig config;
  config.epochs = 12;
  config.weighting = "uniform";
  config.seed = 3;
  config.class_weights = ClassWeights{{{0, 2.0}, {1, 0.5}}};
  CHECK(ClsConfig::from_json(config.to_json()).to_json() == config.to_json());
}

TEST_CASE("training log length equals epochs trained") {
  TempDir tmp("cls_loglen");
  const auto manifest = testutil::small_corpus(tmp.path, {{0, 4}, {1, 4}}, 19, 0.25);
  ClsConfig config;
  config.epochs = 3;
  config.seed = 19;
  ClsModel model = build_classifier(config);
  const auto ckpt = train_classifier(model, manifest, config);
  CHECK(ckpt.meta.at("log").size() == 3);
}

TEST_CASE("oversampling mode trains") {
  TempDir tmp("cls_oversample");
  const auto manifest = testutil::small_corpus(tmp.path, {{1, 8}, {5, 4}}, 23, 0.25);
  ClsConfig config;
  config.epochs = 1;
  config.seed = 23;
  config.oversample = true;
  config.class_weights = compute_class_weights(manifest.class_counts);
  ClsModel model = build_classifier(config);
  const auto ckpt = train_classifier(model, manifest, config);
  CHECK(std::isfinite(ckpt.meta.at("log").at(0).at("train_loss").get<double>()));
}

TEST_CASE("checkpoint restores the trained classifier exactly") {
  TempDir tmp("cls_restore");
  std::map<int, int64_t> counts{{0, 6}, {1, 6}};
  const auto manifest = testutil::small_corpus(tmp.path, counts, 13, 0.34);

  ClsConfig config;
  config.epochs = 2;
  config.seed = 13;
  ClsModel model = build_classifier(config);
  const auto ckpt = train_classifier(model, manifest, config);
  save_checkpoint(ckpt, tmp.path / "model.ckpt");

  const auto loaded = nn::load_checkpoint(tmp.path / "model.ckpt");
  ClsModel restored(ClsConfig::from_json(loaded.meta.at("config")));
  restored.restore(loaded);

  const auto rendered = render_lesion(0, 4, 64, 64);
  const Prediction a = predict(model, rendered.image);
  const Prediction b = predict(restored, rendered.image);
  for (int c = 0; c < kNumClasses; ++c) {
    CHECK(a.probs[static_cast<size_t>(c)] == b.probs[static_cast<size_t>(c)]);
  }
}

}  // TEST_SUITE
