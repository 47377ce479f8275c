#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "test_util.hpp"
#include "vcas/gradcheck.hpp"
#include "vcas/losses.hpp"
#include "vcas/model.hpp"

using namespace vcas;
using vcas::testing::random_tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_classes = 2;
  c.stream_width = 4;
  c.feature_dim = 4;
  c.seg_dim = 3;
  c.contrast_dim = 3;
  c.head_width = 4;
  c.groups = 2;
  return c;
}

template <typename T>
std::vector<T> vec(const Tensor<T>& t) { return {t.values().begin(), t.values().end()}; }

Tensor<double> weighted(const Tensor<double>& t, const Tensor<double>& w) { return sum(mul(t, w)); }

ClassStats<double> stats_2d(std::vector<double> mu, std::vector<double> log_sigma, double gamma) {
  ClassStats<double> s;
  const std::size_t C = log_sigma.size();
  s.gamma = Tensor<double>(Shape{1}, {gamma});
  if (C == 0) return s;
  const std::size_t D = mu.size() / C;
  s.mu = Tensor<double>(Shape{C, D}, std::move(mu));
  s.log_sigma = Tensor<double>(Shape{C}, std::move(log_sigma));
  return s;
}

}  // namespace

TEST(Encode, OutputIsQuarterResolution) {
  auto mdl = SegmentationModel<double>::init(tiny_config(), 1);
  Rng rng(1);
  auto h = mdl.features(random_tensor(Shape{2, 3, 16, 12}, rng), random_tensor(Shape{2, 1, 16, 12}, rng));
  EXPECT_EQ(h.shape(), (Shape{2, 4, 4, 3}));
}

TEST(Encode, RejectsIndivisibleSize) {
  auto mdl = SegmentationModel<double>::init(tiny_config(), 1);
  EXPECT_THROW(mdl.features(Tensor<double>(Shape{1, 3, 10, 8}), Tensor<double>(Shape{1, 1, 10, 8})),
               InvalidArgument);
  EXPECT_THROW(mdl.features(Tensor<double>(Shape{1, 3, 8, 8}), Tensor<double>(Shape{1, 1, 8, 4})), InvalidArgument);
}

TEST(Encode, ZeroInputAndDeterminism) {
  auto a = SegmentationModel<double>::init(tiny_config(), 5);
  auto b = SegmentationModel<double>::init(tiny_config(), 5);
  Tensor<double> app(Shape{1, 3, 8, 8}), dep(Shape{1, 1, 8, 8});
  auto h1 = a.features(app, dep), h2 = b.features(app, dep);
  EXPECT_EQ(vec(h1), vec(h2));
  for (double v : h1.values()) EXPECT_TRUE(std::isfinite(v));

  Rng rng(2);
  auto x = random_tensor(Shape{1, 3, 8, 8}, rng);
  auto d = random_tensor(Shape{1, 1, 8, 8}, rng);
  EXPECT_EQ(vec(a.features(x, d)), vec(b.features(x, d)));
}

TEST(Encode, GradientWithRespectToBothInputs) {
  auto mdl = SegmentationModel<double>::init(tiny_config(), 3);
  Rng rng(3);
  auto x = random_tensor(Shape{1, 3, 8, 8}, rng);
  auto d = random_tensor(Shape{1, 1, 8, 8}, rng);
  auto rep = gradient_check([&] { return sum(mdl.features(x, d)); }, {x, d});
  EXPECT_TRUE(rep.passed) << rep.message;
  EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(Heads, PreserveSpatialShapeAndWidths) {
  auto mdl = SegmentationModel<double>::init(tiny_config(), 1);
  Rng rng(4);
  for (std::size_t s : {1u, 3u, 6u}) {
    auto h = random_tensor(Shape{2, 4, s, s + 1}, rng);
    EXPECT_EQ(mdl.segmentation_embeddings(h).shape(), (Shape{2, 3, s, s + 1}));
    EXPECT_EQ(mdl.contrastive_embeddings(h).shape(), (Shape{2, 3, s, s + 1}));
  }
}

TEST(Heads, ChannelMismatchIsRejected) {
  auto mdl = SegmentationModel<double>::init(tiny_config(), 1);
  EXPECT_THROW(mdl.segmentation_embeddings(Tensor<double>(Shape{1, 6, 2, 2})), InvalidArgument);
}

TEST(Heads, DifferentSeedsGiveDifferentOutputs) {
  auto a = SegmentationModel<double>::init(tiny_config(), 1);
  auto b = SegmentationModel<double>::init(tiny_config(), 2);
  Rng rng(5);
  auto h = random_tensor(Shape{1, 4, 3, 3}, rng);
  EXPECT_NE(vec(a.segmentation_embeddings(h)), vec(b.segmentation_embeddings(h)));
  EXPECT_NE(vec(a.segmentation_embeddings(h)), vec(a.contrastive_embeddings(h)));
}

TEST(Heads, GradientThroughHead) {
  auto mdl = SegmentationModel<double>::init(tiny_config(), 6);
  Rng rng(6);
  auto h = random_tensor(Shape{1, 4, 4, 4}, rng);
  auto r = random_tensor(Shape{1, 3, 4, 4}, rng);
  auto& hp = mdl.segmentation_head();
  auto rep = gradient_check([&] { return weighted(mdl.segmentation_embeddings(h), r); },
                            {h, hp.proj_weight, hp.proj_bias, hp.blocks[0].weight, hp.blocks[3].gn_gamma});
  EXPECT_TRUE(rep.passed) << rep.message;
  EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(Heads, NoContrastiveHeadWhenDisabled) {
  auto cfg = tiny_config();
  cfg.contrastive_head = false;
  auto mdl = SegmentationModel<double>::init(cfg, 1);
  EXPECT_THROW(mdl.contrastive_embeddings(Tensor<double>(Shape{1, 4, 2, 2})), InvalidArgument);
  for (const auto& p : mdl.parameters()) EXPECT_NE(p.name.rfind("con.", 0), 0u) << p.name;
}

TEST(ClassDistances, Examples) {
  // Two classes in 2-D: mu_1 = [0, 0], mu_2 = [1, 0]; one pixel at [1, 0].
  auto s = stats_2d({0, 0, 1, 0}, {0, 0}, -3);
  Tensor<double> m(Shape{1, 2, 1, 1}, {1, 0});
  auto d = class_distances(m, s);
  ASSERT_EQ(d.shape(), (Shape{1, 3, 1, 1}));
  EXPECT_DOUBLE_EQ(d[0], -0.5);
  EXPECT_DOUBLE_EQ(d[1], 0.0);
  EXPECT_DOUBLE_EQ(d[2], -3.0);
}

TEST(ClassDistances, SigmaScalesQuadratically) {
  auto s = stats_2d({0, 0}, {std::log(2.0)}, 0);
  Tensor<double> m(Shape{1, 2, 1, 1}, {2, 0});
  EXPECT_NEAR(class_distances(m, s)[0], -4.0 / 8.0, 1e-15);
}

TEST(ClassDistances, RejectsWidthMismatch) {
  auto s = stats_2d({0, 0, 0}, {0}, 0);
  EXPECT_THROW(class_distances(Tensor<double>(Shape{1, 2, 1, 1}), s), InvalidArgument);
}

TEST(ClassDistances, NonPositiveAndConstantUnknownChannel) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const double g = rng.uniform(-5, 5);
    auto s = stats_2d({}, {}, g);
    s.mu = random_tensor(Shape{3, 4}, rng);
    s.log_sigma = random_tensor(Shape{3}, rng);
    auto m = random_tensor(Shape{2, 4, 3, 5}, rng, -2, 2);
    auto d = class_distances(m, s);
    const std::size_t hw = 15;
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t p = 0; p < hw; ++p) EXPECT_LE(d[(b * 4 + k) * hw + p], 0.0);
      for (std::size_t p = 0; p < hw; ++p) EXPECT_EQ(d[(b * 4 + 3) * hw + p], g);
    }
  }
}

TEST(ClassDistances, RotationInvariance) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = stats_2d({}, {}, rng.uniform(-2, 2));
    s.mu = random_tensor(Shape{3, 2}, rng);
    s.log_sigma = random_tensor(Shape{3}, rng, -0.5, 0.5);
    auto m = random_tensor(Shape{1, 2, 4, 4}, rng);
    const double th = rng.uniform(0, 6.283185307179586), c = std::cos(th), sn = std::sin(th);
    auto rs = s;
    rs.mu = Tensor<double>(Shape{3, 2});
    for (std::size_t k = 0; k < 3; ++k) {
      rs.mu[k * 2] = c * s.mu[k * 2] - sn * s.mu[k * 2 + 1];
      rs.mu[k * 2 + 1] = sn * s.mu[k * 2] + c * s.mu[k * 2 + 1];
    }
    Tensor<double> rm(m.shape());
    for (std::size_t p = 0; p < 16; ++p) {
      rm[p] = c * m[p] - sn * m[16 + p];
      rm[16 + p] = sn * m[p] + c * m[16 + p];
    }
    auto y = class_probabilities(class_distances(m, s));
    auto ry = class_probabilities(class_distances(rm, rs));
    EXPECT_LT(vcas::testing::max_abs_diff(y.values(), ry.values()), 1e-10);
  }
}

TEST(ClassDistances, GradientWithRespectToAllInputs) {
  Rng rng(9);
  auto s = stats_2d({}, {}, 0.3);
  s.mu = random_tensor(Shape{3, 4}, rng);
  s.log_sigma = random_tensor(Shape{3}, rng, -0.5, 0.5);
  auto m = random_tensor(Shape{2, 4, 3, 3}, rng);
  auto r = random_tensor(Shape{2, 4, 3, 3}, rng);
  auto rep = gradient_check([&] { return weighted(class_distances(m, s), r); }, {m, s.mu, s.log_sigma, s.gamma});
  EXPECT_TRUE(rep.passed) << rep.message;
  EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(ClassProbabilities, Examples) {
  Tensor<double> d(Shape{1, 2, 1, 1}, {-1.25, -1.25});
  auto y = class_probabilities(d);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);

  Tensor<double> d3(Shape{1, 3, 1, 1}, {0, -0.5, -3});
  auto y3 = class_probabilities(d3);
  const double z = 1 + std::exp(-0.5) + std::exp(-3.0);
  EXPECT_NEAR(y3[0], 1 / z, 1e-12);
  EXPECT_NEAR(y3[1], std::exp(-0.5) / z, 1e-12);
  EXPECT_NEAR(y3[2], std::exp(-3.0) / z, 1e-12);
}

TEST(ClassProbabilities, ChannelsSumToOne) {
  Rng rng(10);
  auto d = random_tensor(Shape{3, 5, 4, 2}, rng, -20, 5);
  auto y = class_probabilities(d);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t p = 0; p < 8; ++p) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += y[(b * 5 + k) * 8 + p];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(ClassProbabilities, GammaIsMonotoneForUnknown) {
  Rng rng(11);
  auto s = stats_2d({}, {}, -2);
  s.mu = random_tensor(Shape{3, 2}, rng);
  s.log_sigma = Tensor<double>(Shape{3});
  auto m = random_tensor(Shape{1, 2, 3, 3}, rng);
  std::vector<double> prev(9, -1);
  for (double g = -4; g <= 4; g += 0.5) {
    s.gamma[0] = g;
    auto y = class_probabilities(class_distances(m, s));
    for (std::size_t p = 0; p < 9; ++p) {
      EXPECT_GE(y[3 * 9 + p], prev[p]);
      prev[p] = y[3 * 9 + p];
    }
  }
}

TEST(PredictLabels, OneHotAndTieRule) {
  Tensor<double> y(Shape{1, 3, 1, 2}, {0, 1, 1, 0, 0, 0});
  auto l = predict_labels(y);
  EXPECT_EQ(l.values, (std::vector<int>{2, 1}));

  Tensor<double> t(Shape{1, 5, 1, 1}, {0.1, 0.3, 0.0, 0.3, 0.3});
  EXPECT_EQ(predict_labels(t)[0], 2);
}

TEST(PredictLabels, MatchesNaiveLoop) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2, k = 4, h = 3, w = 5;
    Tensor<double> y(Shape{n, k, h, w});
    // Coarse values so ties are common.
    for (auto& v : y.values()) v = static_cast<double>(rng.uniform_int(0, 3));
    auto l = predict_labels(y);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < h * w; ++p) {
        int best = 1;
        for (std::size_t c = 1; c < k; ++c)
          if (y[(b * k + c) * h * w + p] > y[(b * k + best - 1) * h * w + p]) best = static_cast<int>(c) + 1;
        EXPECT_EQ(l[b * h * w + p], best);
      }
  }
}

TEST(Model, EndToEndGradientOnToyInput) {
  auto mdl = SegmentationModel<double>::init(tiny_config(), 13);
  Rng rng(13);
  auto x = random_tensor(Shape{1, 3, 8, 8}, rng);
  auto dep = random_tensor(Shape{1, 1, 8, 8}, rng);
  LabelMap target(Shape{1, 2, 2}, std::vector<int>{1, 2, 3, 1});
  Mask ignore(Shape{1, 2, 2}, std::uint8_t{0});
  std::vector<Tensor<double>> inputs{x, dep};
  for (const auto& p : mdl.parameters()) inputs.push_back(p.tensor);
  GradCheckOptions opt;
  opt.max_elements_per_input = 6;
  auto rep = gradient_check(
      [&] {
        auto m = mdl.segmentation_embeddings(mdl.features(x, dep));
        return seg_cross_entropy(class_probabilities(mdl.distances(m)), target, ignore);
      },
      inputs, opt);
  EXPECT_TRUE(rep.passed) << rep.message;
  EXPECT_LT(rep.max_rel_error, 1e-4);
}

TEST(Model, InitialStatsFollowConvention) {
  auto mdl = SegmentationModel<double>::init(ModelConfig{}, 0);
  EXPECT_EQ(mdl.stats().mu.shape(), (Shape{6, 16}));
  for (double v : mdl.stats().log_sigma.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(mdl.stats().gamma[0], 0.0);
  double ss = 0;
  for (double v : mdl.stats().mu.values()) ss += v * v;
  const double sd = std::sqrt(ss / 96);
  EXPECT_GT(sd, 0.05);
  EXPECT_LT(sd, 0.2);
}

TEST(Checkpoint, RoundTripPreservesEveryParameter) {
  auto cfg = tiny_config();
  auto mdl = SegmentationModel<float>::init(cfg, 21);
  mdl.stats().gamma[0] = -1.5f;
  const auto dir = std::filesystem::temp_directory_path() / "vcas_test_checkpoint";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, mdl, {"a", "b"});
  auto ck = load_checkpoint<float>(dir);
  EXPECT_EQ(ck.class_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ck.model.config().num_classes, 2u);
  auto p1 = mdl.parameters(), p2 = ck.model.parameters();
  ASSERT_EQ(p1.size(), p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    EXPECT_EQ(p1[i].name, p2[i].name);
    EXPECT_EQ(vec(p1[i].tensor), vec(p2[i].tensor)) << p1[i].name;
  }

  // A missing parameter file is a format error, not a crash.
  std::filesystem::remove(dir / "stats.mu.cast");
  EXPECT_THROW(load_checkpoint<float>(dir), IoError);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_checkpoint<float>(dir), IoError);
}
