#pragma once

// Dendrogram of the withheld (train-unknown and test-unknown) classes of a
// dataset, from class prototypes of an encoder's feature map h.

#include <string>
#include <vector>

#include "vcas/analysis.hpp"
#include "vcas/model.hpp"
#include "vcas/scenes.hpp"
#include "vcas/training.hpp"

namespace vcas {

struct RelationResult {
  std::vector<std::string> names;
  std::vector<ClassPrototype> prototypes;
  DistanceMatrix distances;
  Dendrogram dendrogram;
};

// Encoder with freshly initialised weights, sized for `data`.
inline SegmentationModel<float> random_encoder(const DatasetManifest& data, std::uint64_t seed) {
  ModelConfig mc;
  mc.num_classes = data.policy.num_known();
  mc.contrastive_head = false;
  return SegmentationModel<float>::init(mc, seed);
}

inline RelationResult unknown_class_relations(const SegmentationModel<float>& model, const DatasetManifest& data,
                                              Linkage linkage = Linkage::average) {
  RelationResult r;
  r.names = data.policy.train_unknown;
  r.names.insert(r.names.end(), data.policy.test_unknown.begin(), data.policy.test_unknown.end());
  std::vector<int> ids;
  for (const auto& n : r.names) ids.push_back(data.class_id(n));
  NoGradScope<float> no_grad;
  // Each sample is loaded once; the mask callback reuses it.
  SceneSample cur;
  std::size_t loaded = static_cast<std::size_t>(-1);
  auto sample = [&](std::size_t i) -> const SceneSample& {
    if (i != loaded) {
      cur = load_sample(data, i);
      loaded = i;
    }
    return cur;
  };
  r.prototypes = compute_class_prototypes<float>(
      data.size(),
      [&](std::size_t i) {
        const SceneSample& s = sample(i);
        const Tensor<float> h = model.features(stack_frames<float>({&s.frame_t}), stack_frames<float>({&s.depth_t}));
        return h.reshaped(Shape{h.dim(1), h.dim(2), h.dim(3)});
      },
      [&](std::size_t i) {
        const SceneSample& s = sample(i);
        Grid<int> g(s.mask_t.shape);
        for (std::size_t k = 0; k < g.size(); ++k) g[k] = s.mask_t[k];
        return g;
      },
      ids, r.names);
  r.distances = pairwise_distances(r.prototypes);
  r.dendrogram = agglomerative_cluster(r.distances, r.names, linkage);
  return r;
}

// Texture-sharing (train-unknown, test-unknown) pairs under `cfg`'s shapes.
inline std::vector<std::pair<std::string, std::string>> texture_sharing_pairs(const SceneConfig& cfg,
                                                                              const LabelPolicy& policy) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& a : policy.train_unknown)
    for (const auto& b : policy.test_unknown) {
      const ShapeSpec *sa = cfg.find_shape(a), *sb = cfg.find_shape(b);
      if (sa && sb && sa->texture == sb->texture) out.emplace_back(a, b);
    }
  return out;
}

}  // namespace vcas
