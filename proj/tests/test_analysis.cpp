#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vcas/analysis.hpp"

using namespace vcas;
using vcas::testing::random_tensor;

namespace {

DistanceMatrix points_1d(const std::vector<double>& x) {
  DistanceMatrix d(x.size(), std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) d[i][j] = std::abs(x[i] - x[j]);
  return d;
}

std::vector<std::string> leaf_names(std::size_t k) {
  std::vector<std::string> n;
  for (std::size_t i = 0; i < k; ++i) n.push_back("c" + std::to_string(i));
  return n;
}

std::vector<ClassPrototype> random_prototypes(std::size_t k, std::size_t dim, Rng& rng) {
  std::vector<ClassPrototype> p;
  for (std::size_t i = 0; i < k; ++i) {
    ClassPrototype c{"c" + std::to_string(i), {}};
    for (std::size_t j = 0; j < dim; ++j) c.vector.push_back(rng.uniform(-1, 1));
    p.push_back(std::move(c));
  }
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(ClassPrototypes, ConstantFieldGivesConstantVector) {
  Tensor<double> f(Shape{3, 2, 2}, std::vector<double>{2, 2, 2, 2, -1, -1, -1, -1, 0.5, 0.5, 0.5, 0.5});
  Grid<int> m(Shape{4, 4}, std::vector<int>(16, 7));
  auto p = compute_class_prototypes<double>(
      2, [&](std::size_t) { return f; }, [&](std::size_t) { return m; }, {7}, {"x"});
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0].vector, (std::vector<double>{2, -1, 0.5}));
}

TEST(ClassPrototypes, MatchesBruteForceOnOneImage) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t D = 3, h = 3, w = 4;
    auto f = random_tensor(Shape{D, h, w}, rng);
    Grid<int> m(Shape{h, w}, 0);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<int>(rng.uniform_int(1, 2));
    m[0] = 1;
    m[1] = 2;
    auto p = compute_class_prototypes<double>(
        1, [&](std::size_t) { return f; }, [&](std::size_t) { return m; }, {1, 2}, {"a", "b"});
    for (int c = 1; c <= 2; ++c) {
      std::vector<double> sum(D, 0.0);
      double n = 0;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          if (m[y * w + x] == c) {
            n += 1;
            for (std::size_t k = 0; k < D; ++k) sum[k] += f[(k * h + y) * w + x];
          }
      for (std::size_t k = 0; k < D; ++k) EXPECT_NEAR(p[static_cast<std::size_t>(c - 1)].vector[k], sum[k] / n, 1e-10);
    }
  }
}

TEST(ClassPrototypes, MaskIsDownsampledToFeatureResolution) {
  // 4×4 mask, 2×2 features: pixel centres of the coarse grid sample (1,1),
  // (1,3), (3,1), (3,3) of the mask.
  Grid<int> m(Shape{4, 4}, std::vector<int>{0, 0, 0, 0, 0, 5, 0, 6, 0, 0, 0, 0, 0, 5, 0, 5});
  Tensor<double> f(Shape{1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  auto p = compute_class_prototypes<double>(
      1, [&](std::size_t) { return f; }, [&](std::size_t) { return m; }, {5, 6}, {"five", "six"});
  EXPECT_DOUBLE_EQ(p[0].vector[0], (1 + 3 + 4) / 3.0);
  EXPECT_DOUBLE_EQ(p[1].vector[0], 2.0);
}

TEST(ClassPrototypes, MissingClassIsNamed) {
  Tensor<double> f(Shape{1, 2, 2});
  Grid<int> m(Shape{2, 2}, 1);
  try {
    compute_class_prototypes<double>(
        1, [&](std::size_t) { return f; }, [&](std::size_t) { return m; }, {1, 2, 3}, {"a", "ghost", "phantom"});
    FAIL() << "expected an error";
  } catch (const InvalidArgument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("ghost"), std::string::npos) << msg;
    EXPECT_NE(msg.find("phantom"), std::string::npos) << msg;
  }
}

TEST(PairwiseDistances, Examples) {
  auto d = pairwise_distances({{"a", {0, 0}}, {"b", {3, 4}}, {"c", {0, 0}}});
  EXPECT_EQ(d[0][1], 5.0);
  EXPECT_EQ(d[0][2], 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(d[i][i], 0.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(d[i][j], d[j][i]);
  }
  EXPECT_THROW(pairwise_distances({{"a", {0, 0}}}), InvalidArgument);
  EXPECT_THROW(pairwise_distances({{"a", {0, 0}}, {"b", {1}}}), InvalidArgument);
}

TEST(PairwiseDistances, TriangleInequality) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    auto d = pairwise_distances(random_prototypes(6, 5, rng));
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j)
        for (std::size_t k = 0; k < 6; ++k) EXPECT_LE(d[i][k], d[i][j] + d[j][k] + 1e-9);
  }
}

TEST(Cluster, OneDimensionalExample) {
  auto dg = agglomerative_cluster(points_1d({0, 1, 10}), {"a", "b", "c"});
  ASSERT_EQ(dg.merges.size(), 2u);
  EXPECT_EQ(dg.merges[0].a, 0u);
  EXPECT_EQ(dg.merges[0].b, 1u);
  EXPECT_DOUBLE_EQ(dg.merges[0].distance, 1.0);
  EXPECT_EQ(dg.merges[0].size, 2u);
  EXPECT_EQ(dg.merges[1].a, 2u);
  EXPECT_EQ(dg.merges[1].b, 3u);
  EXPECT_DOUBLE_EQ(dg.merges[1].distance, 9.5);
  EXPECT_EQ(dg.merges[1].size, 3u);
  // Single and complete linkage on the same points.
  EXPECT_DOUBLE_EQ(agglomerative_cluster(points_1d({0, 1, 10}), {"a", "b", "c"}, Linkage::single).merges[1].distance, 9.0);
  EXPECT_DOUBLE_EQ(agglomerative_cluster(points_1d({0, 1, 10}), {"a", "b", "c"}, Linkage::complete).merges[1].distance,
                   10.0);
}

TEST(Cluster, IdenticalPointsMergeAtZeroAndTiesPickLowestPair) {
  auto dg = agglomerative_cluster(points_1d({4, 7, 4}), leaf_names(3));
  EXPECT_EQ(dg.merges[0].distance, 0.0);
  EXPECT_EQ(dg.merges[0].a, 0u);
  EXPECT_EQ(dg.merges[0].b, 2u);
  // Four equidistant points: the first merge is (0, 1), the next (2, 3).
  DistanceMatrix eq(4, std::vector<double>(4, 1.0));
  for (std::size_t i = 0; i < 4; ++i) eq[i][i] = 0;
  auto e = agglomerative_cluster(eq, leaf_names(4));
  EXPECT_EQ(e.merges[0].a, 0u);
  EXPECT_EQ(e.merges[0].b, 1u);
  EXPECT_EQ(e.merges[1].a, 2u);
  EXPECT_EQ(e.merges[1].b, 3u);
}

TEST(Cluster, RejectsInvalidMatrices) {
  DistanceMatrix d = points_1d({0, 1, 2});
  d[0][1] = 5;
  EXPECT_THROW(agglomerative_cluster(d, leaf_names(3)), InvalidArgument);
  d = points_1d({0, 1, 2});
  d[0][1] = d[1][0] = -1;
  EXPECT_THROW(agglomerative_cluster(d, leaf_names(3)), InvalidArgument);
  EXPECT_THROW(agglomerative_cluster(points_1d({0, 1}), leaf_names(3)), InvalidArgument);
  EXPECT_THROW(parse_linkage("ward"), InvalidArgument);
}

TEST(Cluster, MatchesLanceWilliamsOracle) {
  Rng rng(3);
  for (int linkage = 0; linkage < 3; ++linkage) {
    const Linkage l = linkage == 0 ? Linkage::average : linkage == 1 ? Linkage::single : Linkage::complete;
    for (int trial = 0; trial < 200; ++trial) {
      const auto k = static_cast<std::size_t>(rng.uniform_int(2, 9));
      auto d = pairwise_distances(random_prototypes(k, 3, rng));
      auto dg = agglomerative_cluster(d, leaf_names(k), l);
      auto ref = oracle::cluster(d, linkage);
      ASSERT_EQ(dg.merges.size(), k - 1);
      ASSERT_EQ(ref.size(), k - 1);
      for (std::size_t m = 0; m < k - 1; ++m) {
        EXPECT_EQ(dg.merges[m].a, ref[m].a);
        EXPECT_EQ(dg.merges[m].b, ref[m].b);
        EXPECT_NEAR(dg.merges[m].distance, ref[m].distance, 1e-10);
      }
    }
  }
}

TEST(Cluster, MergeDistancesAreMonotone) {
  Rng rng(4);
  for (auto l : {Linkage::single, Linkage::complete, Linkage::average}) {
    for (int trial = 0; trial < 100; ++trial) {
      auto d = pairwise_distances(random_prototypes(8, 4, rng));
      auto dg = agglomerative_cluster(d, leaf_names(8), l);
      for (std::size_t m = 1; m < dg.merges.size(); ++m)
        EXPECT_GE(dg.merges[m].distance, dg.merges[m - 1].distance);
    }
  }
}

TEST(Newick, TwoLeaves) {
  auto dg = agglomerative_cluster(points_1d({0, 3}), {"A", "B"});
  EXPECT_EQ(to_newick(dg), "(A:1.5,B:1.5);");
}

TEST(Newick, RoundTripRecoversLeavesAndQuotes) {
  Rng rng(5);
  auto names = leaf_names(7);
  names[3] = "odd name, (x)";
  names[5] = "it's";
  auto dg = agglomerative_cluster(pairwise_distances(random_prototypes(7, 3, rng)), names);
  auto leaves = parse_newick_leaves(to_newick(dg));
  EXPECT_EQ(std::multiset<std::string>(leaves.begin(), leaves.end()),
            std::multiset<std::string>(names.begin(), names.end()));
}

TEST(Export, CsvAndNewickFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "vcas_test_dendrogram";
  std::filesystem::remove_all(dir);
  Rng rng(6);
  auto protos = random_prototypes(5, 2, rng);
  auto d = pairwise_distances(protos);
  auto dg = agglomerative_cluster(d, leaf_names(5));
  export_dendrogram(dg, dir);
  export_distances(d, leaf_names(5), dir / "distances.csv");
  const std::string csv = slurp(dir / "dendrogram.csv");
  EXPECT_EQ(csv.rfind("cluster_a,cluster_b,distance,size\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 4);
  EXPECT_EQ(slurp(dir / "dendrogram.newick"), to_newick(dg) + "\n");
  const std::string dist = slurp(dir / "distances.csv");
  EXPECT_EQ(dist.rfind("class,c0,c1,c2,c3,c4\n", 0), 0u);
  EXPECT_EQ(std::count(dist.begin(), dist.end(), '\n'), 6);
  std::filesystem::remove_all(dir);
}

TEST(Cophenetic, SharedClusterHeight) {
  auto dg = agglomerative_cluster(points_1d({0, 1, 10}), {"a", "b", "c"});
  EXPECT_DOUBLE_EQ(cophenetic(dg, 0, 1), 1.0);
  EXPECT_DOUBLE_EQ(cophenetic(dg, 1, 2), 9.5);
}
