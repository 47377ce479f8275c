#pragma once

// Two-stream encoder, segmentation/contrastive heads and the distance-based
// open-set classifier: each known class k has a signature (mu_k, sigma_k);
// the extra channel C+1 is a single learnable constant gamma.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vcas/cast_io.hpp"
#include "vcas/errors.hpp"
#include "vcas/ops.hpp"
#include "vcas/random.hpp"
#include "vcas/tensor.hpp"

namespace vcas {

struct ModelConfig {
  std::size_t num_classes = 6;    // C, known classes
  std::size_t stream_width = 16;  // channels of each encoder stream
  std::size_t feature_dim = 32;   // D_h
  std::size_t seg_dim = 16;       // D_m
  std::size_t contrast_dim = 16;  // D_z
  std::size_t head_width = 32;    // hidden channels of both heads
  int groups = 4;
  bool contrastive_head = true;

  void validate() const {
    auto divisible = [&](std::size_t c, const char* what) {
      if (groups < 1 || c % static_cast<std::size_t>(groups) != 0)
        throw InvalidArgument(std::string(what) + " (" + std::to_string(c) + ") not divisible by groups (" +
                              std::to_string(groups) + ")");
    };
    if (num_classes < 1) throw InvalidArgument("model needs at least one known class");
    if (!stream_width || !feature_dim || !seg_dim || !contrast_dim || !head_width)
      throw InvalidArgument("model widths must be positive");
    divisible(stream_width, "stream_width");
    divisible(head_width, "head_width");
  }
};

template <typename T>
struct ConvBlock {
  Tensor<T> weight, bias, gn_gamma, gn_beta;
  int stride = 1;
};

template <typename T>
struct EncoderParams {
  std::array<ConvBlock<T>, 4> appearance, depth;
  Tensor<T> fuse_weight, fuse_bias;
};

template <typename T>
struct HeadParams {
  std::array<ConvBlock<T>, 4> blocks;
  Tensor<T> proj_weight, proj_bias;
};

template <typename T>
struct ClassStats {
  Tensor<T> mu;         // C × D_m
  Tensor<T> log_sigma;  // C
  Tensor<T> gamma;      // 1
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
  bool decay;  // weight decay applies
};

namespace detail {

template <typename T>
Tensor<T> he_normal(Shape shape, Rng& rng, double gain = 1.0) {
  const std::size_t fan_in = shape[1] * shape[2] * shape[3];
  const double std = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, std));
  return t;
}

template <typename T>
ConvBlock<T> make_block(std::size_t in, std::size_t out, int stride, Rng& rng) {
  ConvBlock<T> b;
  b.weight = he_normal<T>(Shape{out, in, 3, 3}, rng);
  b.bias = Tensor<T>(Shape{out});
  b.gn_gamma = Tensor<T>(Shape{out}, T(1));
  b.gn_beta = Tensor<T>(Shape{out});
  b.stride = stride;
  return b;
}

template <typename T>
Tensor<T> apply_block(const Tensor<T>& x, const ConvBlock<T>& b, int groups) {
  return relu(group_norm(conv2d(x, b.weight, b.bias, b.stride, 1), groups, b.gn_gamma, b.gn_beta, T(1e-5)));
}

template <typename T>
HeadParams<T> make_head(std::size_t in, std::size_t width, std::size_t out, Rng& rng) {
  HeadParams<T> h;
  for (std::size_t i = 0; i < 4; ++i) h.blocks[i] = make_block<T>(i == 0 ? in : width, width, 1, rng);
  // A full-gain projection starts every embedding far from every mu, and the
  // early updates then collapse all embeddings onto one class.
  h.proj_weight = he_normal<T>(Shape{out, width, 1, 1}, rng, 0.25);
  h.proj_bias = Tensor<T>(Shape{out});
  return h;
}

template <typename T>
void collect_block(std::vector<NamedParameter<T>>& out, const std::string& prefix, const ConvBlock<T>& b) {
  out.push_back({prefix + ".weight", b.weight, true});
  out.push_back({prefix + ".bias", b.bias, true});
  out.push_back({prefix + ".gn_gamma", b.gn_gamma, true});
  out.push_back({prefix + ".gn_beta", b.gn_beta, true});
}

template <typename T>
void collect_head(std::vector<NamedParameter<T>>& out, const std::string& prefix, const HeadParams<T>& h) {
  for (std::size_t i = 0; i < 4; ++i) collect_block(out, prefix + "." + std::to_string(i), h.blocks[i]);
  out.push_back({prefix + ".proj.weight", h.proj_weight, true});
  out.push_back({prefix + ".proj.bias", h.proj_bias, true});
}

}  // namespace detail

template <typename T>
Tensor<T> encode(const Tensor<T>& appearance, const Tensor<T>& depth, const EncoderParams<T>& p, int groups) {
  detail::require_rank(appearance, 4, "encode", "appearance");
  detail::require_rank(depth, 4, "encode", "depth");
  if (appearance.dim(1) != 3) throw InvalidArgument("encode: appearance must have 3 channels");
  if (depth.dim(1) != 1) throw InvalidArgument("encode: depth must have 1 channel");
  if (appearance.dim(0) != depth.dim(0) || appearance.dim(2) != depth.dim(2) || appearance.dim(3) != depth.dim(3))
    throw InvalidArgument("encode: appearance " + appearance.shape().str() + " and depth " + depth.shape().str() +
                          " disagree");
  if (appearance.dim(2) % 4 || appearance.dim(3) % 4)
    throw InvalidArgument("encode: spatial dims " + std::to_string(appearance.dim(2)) + "x" +
                          std::to_string(appearance.dim(3)) + " not divisible by 4");
  Tensor<T> a = appearance, d = depth;
  for (const auto& b : p.appearance) a = detail::apply_block(a, b, groups);
  for (const auto& b : p.depth) d = detail::apply_block(d, b, groups);
  return conv2d(concat_channels(a, d), p.fuse_weight, p.fuse_bias, 1, 0);
}

// Shared by f_phi (segmentation embeddings m) and f_alpha (contrastive z).
template <typename T>
Tensor<T> apply_head(const Tensor<T>& h, const HeadParams<T>& p, int groups) {
  detail::require_rank(h, 4, "head", "features");
  if (h.dim(1) != p.blocks[0].weight.dim(1))
    throw InvalidArgument("head: feature channels " + std::to_string(h.dim(1)) + " != head input width " +
                          std::to_string(p.blocks[0].weight.dim(1)));
  Tensor<T> x = h;
  for (const auto& b : p.blocks) x = detail::apply_block(x, b, groups);
  return conv2d(x, p.proj_weight, p.proj_bias, 1, 0);
}

template <typename T>
Tensor<T> seg_head(const Tensor<T>& h, const HeadParams<T>& p, int groups) {
  return apply_head(h, p, groups);
}

template <typename T>
Tensor<T> contrastive_head(const Tensor<T>& h, const HeadParams<T>& p, int groups) {
  return apply_head(h, p, groups);
}

// d[:, k] = -|m - mu_k|^2 / (2 sigma_k^2) for k < C, d[:, C] = gamma.
template <typename T>
Tensor<T> class_distances(const Tensor<T>& m, const ClassStats<T>& stats) {
  detail::require_rank(m, 4, "class_distances", "embeddings");
  detail::require_rank(stats.mu, 2, "class_distances", "mu");
  const std::size_t n = m.dim(0), dm = m.dim(1), hw = m.dim(2) * m.dim(3), C = stats.mu.dim(0);
  if (stats.mu.dim(1) != dm)
    throw InvalidArgument("class_distances: embedding width " + std::to_string(dm) + " != mu width " +
                          std::to_string(stats.mu.dim(1)));
  if (stats.log_sigma.numel() != C) throw InvalidArgument("class_distances: log_sigma must have C entries");
  if (stats.gamma.numel() != 1) throw InvalidArgument("class_distances: gamma must be a scalar");
  const Tensor<T>& mu = stats.mu;
  const Tensor<T>& ls = stats.log_sigma;
  const Tensor<T>& gamma = stats.gamma;

  Tensor<T> d(Shape{n, C + 1, m.dim(2), m.dim(3)});
  std::vector<T> inv_var(C);
  for (std::size_t k = 0; k < C; ++k) inv_var[k] = std::exp(T(-2) * ls[k]);
  for (std::size_t b = 0; b < n; ++b) {
    const T* mb = m.data() + b * dm * hw;
    T* db = d.data() + b * (C + 1) * hw;
    for (std::size_t k = 0; k < C; ++k) {
      T* dk = db + k * hw;
      std::fill_n(dk, hw, T(0));
      for (std::size_t c = 0; c < dm; ++c) {
        const T muc = mu[k * dm + c];
        const T* mc = mb + c * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          const T diff = mc[p] - muc;
          dk[p] += diff * diff;
        }
      }
      const T s = T(-0.5) * inv_var[k];
      for (std::size_t p = 0; p < hw; ++p) dk[p] *= s;
    }
    std::fill_n(db + C * hw, hw, gamma[0]);
  }

  if (grad_enabled({&m, &mu, &ls, &gamma})) {
    record_op(d, [m, mu, ls, gamma, d, inv_var, n, dm, hw, C]() mutable {
      if (!d.has_grad()) return;
      auto gd = d.grad();
      for (std::size_t b = 0; b < n; ++b) {
        const T* mb = m.data() + b * dm * hw;
        const T* gb = gd.data() + b * (C + 1) * hw;
        const T* db = d.data() + b * (C + 1) * hw;
        for (std::size_t k = 0; k < C; ++k) {
          const T* gk = gb + k * hw;
          if (ls.requires_grad()) {
            // d = -s/2 * exp(-2 l)  =>  dd/dl = -2 d
            T acc = 0;
            for (std::size_t p = 0; p < hw; ++p) acc += gk[p] * db[k * hw + p];
            ls.grad()[k] += T(-2) * acc;
          }
          for (std::size_t c = 0; c < dm; ++c) {
            const T muc = mu[k * dm + c];
            const T* mc = mb + c * hw;
            T acc_mu = 0;
            if (m.requires_grad()) {
              T* gm = m.grad().data() + b * dm * hw + c * hw;
              for (std::size_t p = 0; p < hw; ++p) {
                const T t = gk[p] * (mc[p] - muc) * inv_var[k];
                gm[p] -= t;
                acc_mu += t;
              }
            } else {
              for (std::size_t p = 0; p < hw; ++p) acc_mu += gk[p] * (mc[p] - muc) * inv_var[k];
            }
            if (mu.requires_grad()) mu.grad()[k * dm + c] += acc_mu;
          }
        }
        if (gamma.requires_grad()) {
          T acc = 0;
          for (std::size_t p = 0; p < hw; ++p) acc += gb[C * hw + p];
          gamma.grad()[0] += acc;
        }
      }
    });
  }
  return d;
}

template <typename T>
Tensor<T> class_probabilities(const Tensor<T>& d) {
  detail::require_rank(d, 4, "class_probabilities", "distances");
  return softmax(d, 1);
}

// Per-pixel argmax over channels as 1-based labels (C+1 = unknown); ties go
// to the lowest channel.
template <typename T>
LabelMap predict_labels(const Tensor<T>& probs) {
  detail::require_rank(probs, 4, "predict_labels", "probabilities");
  const std::size_t n = probs.dim(0), k = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  LabelMap out(Shape{n, probs.dim(2), probs.dim(3)});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      T bv = probs[b * k * hw + p];
      for (std::size_t c = 1; c < k; ++c) {
        const T v = probs[(b * k + c) * hw + p];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out[b * hw + p] = static_cast<int>(best) + 1;
    }
  return out;
}

template <typename T>
class SegmentationModel {
 public:
  SegmentationModel() = default;

  // Deterministic given `seed`. mu ~ N(0, 0.1), log sigma = 0, gamma = 0.
  static SegmentationModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    SegmentationModel mdl;
    mdl.cfg_ = cfg;
    Rng rng = Rng::substream(seed, 0, 0x6d6f64656cULL);
    const std::size_t sw = cfg.stream_width;
    for (std::size_t i = 0; i < 4; ++i) {
      const int stride = i < 2 ? 2 : 1;
      mdl.enc_.appearance[i] = detail::make_block<T>(i == 0 ? 3 : sw, sw, stride, rng);
    }
    for (std::size_t i = 0; i < 4; ++i) {
      const int stride = i < 2 ? 2 : 1;
      mdl.enc_.depth[i] = detail::make_block<T>(i == 0 ? 1 : sw, sw, stride, rng);
    }
    mdl.enc_.fuse_weight = detail::he_normal<T>(Shape{cfg.feature_dim, 2 * sw, 1, 1}, rng);
    mdl.enc_.fuse_bias = Tensor<T>(Shape{cfg.feature_dim});
    mdl.seg_ = detail::make_head<T>(cfg.feature_dim, cfg.head_width, cfg.seg_dim, rng);
    if (cfg.contrastive_head) mdl.con_ = detail::make_head<T>(cfg.feature_dim, cfg.head_width, cfg.contrast_dim, rng);
    mdl.stats_.mu = Tensor<T>(Shape{cfg.num_classes, cfg.seg_dim});
    for (auto& v : mdl.stats_.mu.values()) v = static_cast<T>(rng.normal(0.0, 0.1));
    mdl.stats_.log_sigma = Tensor<T>(Shape{cfg.num_classes});
    mdl.stats_.gamma = Tensor<T>(Shape{1});
    for (auto& p : mdl.parameters()) p.tensor.set_requires_grad(true);
    return mdl;
  }

  const ModelConfig& config() const { return cfg_; }
  EncoderParams<T>& encoder() { return enc_; }
  const EncoderParams<T>& encoder() const { return enc_; }
  HeadParams<T>& segmentation_head() { return seg_; }
  const HeadParams<T>& segmentation_head() const { return seg_; }
  HeadParams<T>& contrastive_head_params() { return con_; }
  const HeadParams<T>& contrastive_head_params() const { return con_; }
  ClassStats<T>& stats() { return stats_; }
  const ClassStats<T>& stats() const { return stats_; }

  // Handles alias the model's storage. gamma and log sigma are excluded from
  // weight decay.
  std::vector<NamedParameter<T>> parameters() const {
    std::vector<NamedParameter<T>> out;
    for (std::size_t i = 0; i < 4; ++i) detail::collect_block(out, "enc.app." + std::to_string(i), enc_.appearance[i]);
    for (std::size_t i = 0; i < 4; ++i) detail::collect_block(out, "enc.depth." + std::to_string(i), enc_.depth[i]);
    out.push_back({"enc.fuse.weight", enc_.fuse_weight, true});
    out.push_back({"enc.fuse.bias", enc_.fuse_bias, true});
    detail::collect_head(out, "seg", seg_);
    if (cfg_.contrastive_head) detail::collect_head(out, "con", con_);
    out.push_back({"stats.mu", stats_.mu, true});
    out.push_back({"stats.log_sigma", stats_.log_sigma, false});
    out.push_back({"stats.gamma", stats_.gamma, false});
    return out;
  }

  Tensor<T> features(const Tensor<T>& appearance, const Tensor<T>& depth) const {
    return encode(appearance, depth, enc_, cfg_.groups);
  }
  Tensor<T> segmentation_embeddings(const Tensor<T>& h) const { return seg_head(h, seg_, cfg_.groups); }
  Tensor<T> contrastive_embeddings(const Tensor<T>& h) const {
    if (!cfg_.contrastive_head) throw InvalidArgument("model was built without a contrastive head");
    return contrastive_head(h, con_, cfg_.groups);
  }
  Tensor<T> distances(const Tensor<T>& m) const { return class_distances(m, stats_); }

 private:
  ModelConfig cfg_;
  EncoderParams<T> enc_;
  HeadParams<T> seg_, con_;
  ClassStats<T> stats_;
};

// ---------------------------------------------------------------------------
// Checkpoints: one CAST file per parameter plus manifest.json.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const SegmentationModel<T>& model,
                     const std::vector<std::string>& class_names) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  const auto& c = model.config();
  nlohmann::ordered_json j;
  j["version"] = kCheckpointVersion;
  j["num_classes"] = c.num_classes;
  j["D_h"] = c.feature_dim;
  j["D_m"] = c.seg_dim;
  j["D_z"] = c.contrast_dim;
  j["groups"] = c.groups;
  j["stream_width"] = c.stream_width;
  j["head_width"] = c.head_width;
  j["contrastive_head"] = c.contrastive_head;
  j["classes"] = class_names;
  nlohmann::ordered_json files = nlohmann::ordered_json::object();
  for (const auto& p : model.parameters()) {
    const std::string file = p.name + ".cast";
    write_cast(dir / file, p.tensor);
    files[p.name] = file;
  }
  j["parameters"] = files;
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("cannot write " + (dir / "manifest.json").string());
  f << j.dump(2) << '\n';
}

template <typename T>
struct Checkpoint {
  SegmentationModel<T> model;
  std::vector<std::string> class_names;
};

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.json";
  std::ifstream f(manifest);
  if (!f) throw IoError("cannot open checkpoint manifest " + manifest.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest.string() + ": " + e.what());
  }
  if (j.value("version", 0) != kCheckpointVersion) throw FormatError(manifest.string() + ": unsupported version");
  ModelConfig cfg;
  try {
    cfg.num_classes = j.at("num_classes").get<std::size_t>();
    cfg.feature_dim = j.at("D_h").get<std::size_t>();
    cfg.seg_dim = j.at("D_m").get<std::size_t>();
    cfg.contrast_dim = j.at("D_z").get<std::size_t>();
    cfg.groups = j.at("groups").get<int>();
    cfg.stream_width = j.at("stream_width").get<std::size_t>();
    cfg.head_width = j.at("head_width").get<std::size_t>();
    cfg.contrastive_head = j.at("contrastive_head").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest.string() + ": " + e.what());
  }
  Checkpoint<T> ck;
  ck.model = SegmentationModel<T>::init(cfg, 0);
  ck.class_names = j.at("classes").get<std::vector<std::string>>();
  if (ck.class_names.size() != cfg.num_classes)
    throw FormatError(manifest.string() + ": class list length != num_classes");
  const auto& files = j.at("parameters");
  for (auto& p : ck.model.parameters()) {
    if (!files.contains(p.name)) throw FormatError(manifest.string() + ": missing parameter " + p.name);
    const Tensor<T> loaded = to_tensor<T>(read_cast(dir / files.at(p.name).template get<std::string>()));
    if (loaded.shape() != p.tensor.shape())
      throw FormatError("parameter " + p.name + " has shape " + loaded.shape().str() + ", expected " +
                        p.tensor.shape().str());
    std::copy(loaded.values().begin(), loaded.values().end(), p.tensor.values().begin());
  }
  return ck;
}

}  // namespace vcas
