#pragma once

// Relationship analysis between classes: per-class mean features, their
// pairwise Euclidean distances and an agglomerative dendrogram.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vcas/errors.hpp"
#include "vcas/tensor.hpp"

namespace vcas {

struct ClassPrototype {
  std::string name;
  std::vector<double> vector;
};

// Accumulates per-class feature sums over many images. Features are C×h×w
// (one image), the class map is at the same resolution.
class PrototypeAccumulator {
 public:
  explicit PrototypeAccumulator(std::vector<int> class_ids) : ids_(std::move(class_ids)) {
    sums_.resize(ids_.size());
    counts_.assign(ids_.size(), 0);
  }

  template <typename T>
  void add(const Tensor<T>& features, const std::vector<int>& class_map) {
    if (features.rank() != 3) throw InvalidArgument("prototype features must be D×h×w");
    const std::size_t D = features.dim(0), hw = features.dim(1) * features.dim(2);
    if (class_map.size() != hw) throw InvalidArgument("class map does not match feature resolution");
    for (std::size_t k = 0; k < ids_.size(); ++k) {
      if (sums_[k].empty()) sums_[k].assign(D, 0.0);
      if (sums_[k].size() != D) throw InvalidArgument("feature dimension changed between images");
      for (std::size_t p = 0; p < hw; ++p) {
        if (class_map[p] != ids_[k]) continue;
        ++counts_[k];
        for (std::size_t c = 0; c < D; ++c) sums_[k][c] += static_cast<double>(features[c * hw + p]);
      }
    }
  }

  // Means; throws listing every class that never occurred.
  std::vector<ClassPrototype> finish(const std::vector<std::string>& names) const {
    if (names.size() != ids_.size()) throw InvalidArgument("one name per class id required");
    std::vector<std::string> missing;
    for (std::size_t k = 0; k < ids_.size(); ++k)
      if (counts_[k] == 0) missing.push_back(names[k]);
    if (!missing.empty()) {
      std::string list;
      for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
      throw InvalidArgument("no pixels found for class(es): " + list);
    }
    std::vector<ClassPrototype> out;
    for (std::size_t k = 0; k < ids_.size(); ++k) {
      ClassPrototype p{names[k], sums_[k]};
      for (auto& v : p.vector) v /= static_cast<double>(counts_[k]);
      out.push_back(std::move(p));
    }
    return out;
  }

 private:
  std::vector<int> ids_;
  std::vector<std::vector<double>> sums_;
  std::vector<std::size_t> counts_;
};

// Nearest-neighbour downsampling of an H×W id map to h×w (pixel centres).
inline std::vector<int> downsample_nearest(const std::vector<int>& ids, std::size_t H, std::size_t W, std::size_t h,
                                           std::size_t w) {
  std::vector<int> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const auto sy = std::min(H - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) * H / h));
    for (std::size_t x = 0; x < w; ++x) {
      const auto sx = std::min(W - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) * W / w));
      out[y * w + x] = ids[sy * W + sx];
    }
  }
  return out;
}

// P_c = mean of `feature_fn` output over every pixel of class c across the
// given images. `feature_fn(i)` returns a D×h×w feature map for image i and
// `mask_fn(i)` its full-resolution H×W class id map; masks are downsampled to
// feature resolution.
template <typename T>
std::vector<ClassPrototype> compute_class_prototypes(
    std::size_t num_images, const std::function<Tensor<T>(std::size_t)>& feature_fn,
    const std::function<Grid<int>(std::size_t)>& mask_fn, const std::vector<int>& class_ids,
    const std::vector<std::string>& class_names) {
  PrototypeAccumulator acc(class_ids);
  for (std::size_t i = 0; i < num_images; ++i) {
    const Tensor<T> f = feature_fn(i);
    const Grid<int> m = mask_fn(i);
    if (m.shape.rank() != 2) throw InvalidArgument("class map must be H×W");
    acc.add(f, downsample_nearest(m.values, m.shape[0], m.shape[1], f.dim(1), f.dim(2)));
  }
  return acc.finish(class_names);
}

using DistanceMatrix = std::vector<std::vector<double>>;

inline DistanceMatrix pairwise_distances(const std::vector<ClassPrototype>& protos) {
  if (protos.size() < 2) throw InvalidArgument("pairwise_distances needs at least 2 prototypes");
  const std::size_t K = protos.size(), D = protos[0].vector.size();
  for (const auto& p : protos) {
    if (p.vector.size() != D)
      throw InvalidArgument("prototype '" + p.name + "' has dimension " + std::to_string(p.vector.size()) +
                            ", expected " + std::to_string(D));
    for (double v : p.vector)
      if (!std::isfinite(v)) throw InvalidArgument("prototype '" + p.name + "' is not finite");
  }
  DistanceMatrix d(K, std::vector<double>(K, 0.0));
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i + 1; j < K; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < D; ++c) s += (protos[i].vector[c] - protos[j].vector[c]) * (protos[i].vector[c] - protos[j].vector[c]);
      d[i][j] = d[j][i] = std::sqrt(s);
    }
  return d;
}

enum class Linkage { average, single, complete };

inline Linkage parse_linkage(const std::string& s) {
  if (s == "average") return Linkage::average;
  if (s == "single") return Linkage::single;
  if (s == "complete") return Linkage::complete;
  throw InvalidArgument("unknown linkage '" + s + "'");
}

// Cluster ids follow the usual convention: leaves are 0..K-1 and the cluster
// created by merge i gets id K+i.
struct Merge {
  std::size_t a = 0, b = 0;  // a < b
  double distance = 0;
  std::size_t size = 0;
};

struct Dendrogram {
  std::vector<std::string> labels;
  std::vector<Merge> merges;
};

// Bottom-up merging on the full cluster-to-cluster linkage. Among equal
// distances the pair with the lowest (a, b) cluster ids wins.
inline Dendrogram agglomerative_cluster(const DistanceMatrix& d, const std::vector<std::string>& labels,
                                        Linkage linkage = Linkage::average) {
  const std::size_t K = d.size();
  if (K == 0) throw InvalidArgument("agglomerative_cluster: empty distance matrix");
  if (labels.size() != K) throw InvalidArgument("agglomerative_cluster: one label per row required");
  for (std::size_t i = 0; i < K; ++i) {
    if (d[i].size() != K) throw InvalidArgument("agglomerative_cluster: matrix is not square");
    if (d[i][i] != 0) throw InvalidArgument("agglomerative_cluster: non-zero diagonal");
    for (std::size_t j = 0; j < K; ++j) {
      if (!(d[i][j] >= 0) || !std::isfinite(d[i][j]))
        throw InvalidArgument("agglomerative_cluster: negative or non-finite distance");
      if (d[i][j] != d[j][i]) throw InvalidArgument("agglomerative_cluster: matrix is not symmetric");
    }
  }
  Dendrogram out{labels, {}};
  // Active clusters: id -> member leaves.
  std::map<std::size_t, std::vector<std::size_t>> active;
  for (std::size_t i = 0; i < K; ++i) active[i] = {i};
  auto link = [&](const std::vector<std::size_t>& x, const std::vector<std::size_t>& y) {
    double acc = linkage == Linkage::single ? std::numeric_limits<double>::infinity() : 0.0;
    for (auto i : x)
      for (auto j : y) {
        if (linkage == Linkage::single) acc = std::min(acc, d[i][j]);
        else if (linkage == Linkage::complete) acc = std::max(acc, d[i][j]);
        else acc += d[i][j];
      }
    if (linkage == Linkage::average) acc /= static_cast<double>(x.size() * y.size());
    return acc;
  };
  std::size_t next = K;
  while (active.size() > 1) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t ba = 0, bb = 0;
    for (auto ia = active.begin(); ia != active.end(); ++ia)
      for (auto ib = std::next(ia); ib != active.end(); ++ib) {
        const double v = link(ia->second, ib->second);
        // Map iteration is in id order, so strict < keeps the lowest pair.
        if (v < best) {
          best = v;
          ba = ia->first;
          bb = ib->first;
        }
      }
    std::vector<std::size_t> members = active[ba];
    members.insert(members.end(), active[bb].begin(), active[bb].end());
    out.merges.push_back({ba, bb, best, members.size()});
    active.erase(ba);
    active.erase(bb);
    active[next++] = std::move(members);
  }
  return out;
}

// Newick with branch lengths as height differences, where a merge at linkage
// distance d sits at height d/2 (ultrametric convention).
inline std::string to_newick(const Dendrogram& dg) {
  const std::size_t K = dg.labels.size();
  auto quote = [](const std::string& s) {
    if (s.find_first_of(" ():;,[]'") == std::string::npos) return s;
    std::string q = "'";
    for (char c : s) q += c == '\'' ? std::string("''") : std::string(1, c);
    return q + "'";
  };
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  if (dg.merges.empty()) return quote(dg.labels.at(0)) + ";";
  std::function<std::string(std::size_t)> node = [&](std::size_t id) -> std::string {
    if (id < K) return quote(dg.labels[id]);
    const Merge& m = dg.merges[id - K];
    auto height = [&](std::size_t c) { return c < K ? 0.0 : dg.merges[c - K].distance / 2; };
    const double h = m.distance / 2;
    return "(" + node(m.a) + ":" + fmt(h - height(m.a)) + "," + node(m.b) + ":" + fmt(h - height(m.b)) + ")";
  };
  return node(K + dg.merges.size() - 1) + ";";
}

// Leaf labels of a Newick string, in order of appearance.
inline std::vector<std::string> parse_newick_leaves(const std::string& s) {
  std::vector<std::string> leaves;
  std::size_t i = 0;
  bool expect_label = true;
  while (i < s.size()) {
    const char c = s[i];
    if (c == '(' || c == ',') {
      expect_label = true;
      ++i;
    } else if (c == ')') {
      expect_label = false;  // internal nodes carry no labels here
      ++i;
    } else if (c == ':') {
      ++i;
      while (i < s.size() && s[i] != ',' && s[i] != ')' && s[i] != ';') ++i;
    } else if (c == ';') {
      break;
    } else if (expect_label) {
      std::string label;
      if (c == '\'') {
        ++i;
        while (i < s.size()) {
          if (s[i] == '\'' && i + 1 < s.size() && s[i + 1] == '\'') {
            label += '\'';
            i += 2;
          } else if (s[i] == '\'') {
            ++i;
            break;
          } else {
            label += s[i++];
          }
        }
      } else {
        while (i < s.size() && std::string(":,();").find(s[i]) == std::string::npos) label += s[i++];
      }
      leaves.push_back(label);
      expect_label = false;
    } else {
      throw FormatError("malformed Newick string near position " + std::to_string(i));
    }
  }
  return leaves;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  return f;
}

inline std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace detail

// Writes dendrogram.csv and dendrogram.newick into `dir`.
inline void export_dendrogram(const Dendrogram& dg, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  {
    auto f = detail::open_out(dir / "dendrogram.csv");
    f << "cluster_a,cluster_b,distance,size\n";
    for (const auto& m : dg.merges) f << m.a << ',' << m.b << ',' << detail::fmt_real(m.distance) << ',' << m.size << '\n';
    if (!f) throw IoError("write failed: " + (dir / "dendrogram.csv").string());
  }
  auto f = detail::open_out(dir / "dendrogram.newick");
  f << to_newick(dg) << '\n';
  if (!f) throw IoError("write failed: " + (dir / "dendrogram.newick").string());
}

inline void export_distances(const DistanceMatrix& d, const std::vector<std::string>& names,
                             const std::filesystem::path& path) {
  auto f = detail::open_out(path);
  f << "class";
  for (const auto& n : names) f << ',' << n;
  f << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    f << names[i];
    for (double v : d[i]) f << ',' << detail::fmt_real(v);
    f << '\n';
  }
  if (!f) throw IoError("write failed: " + path.string());
}

// Linkage distance at which leaves i and j first share a cluster.
inline double cophenetic(const Dendrogram& dg, std::size_t i, std::size_t j) {
  const std::size_t K = dg.labels.size();
  std::vector<std::set<std::size_t>> members(K + dg.merges.size());
  for (std::size_t k = 0; k < K; ++k) members[k] = {k};
  for (std::size_t m = 0; m < dg.merges.size(); ++m) {
    auto& s = members[K + m];
    s = members[dg.merges[m].a];
    s.insert(members[dg.merges[m].b].begin(), members[dg.merges[m].b].end());
    if (s.count(i) && s.count(j)) return dg.merges[m].distance;
  }
  throw InvalidArgument("leaves never merge");
}

}  // namespace vcas
