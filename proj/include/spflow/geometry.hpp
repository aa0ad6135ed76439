// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace spflow {

/// Per-point 3D displacements, n x 3.
template <class Real = double>
using FlowField = Tensor<Real>;

/// Non-empty set of finite 3D points stored as an n x 3 tensor.
template <class Real = double>
class PointCloud {
 public:
  PointCloud() = default;
  explicit PointCloud(Tensor<Real> coords) : coords_(std::move(coords)) {
    require(coords_.cols() == 3, "PointCloud: coordinates must be n x 3, got " + coords_.shape_string());
    require(coords_.rows() >= 1, "PointCloud: empty cloud");
    require(coords_.all_finite(), "PointCloud: non-finite coordinate");
  }

  std::size_t size() const noexcept { return coords_.rows(); }
  const Tensor<Real>& coords() const noexcept { return coords_; }
  std::array<Real, 3> point(std::size_t i) const { return {coords_(i, 0), coords_(i, 1), coords_(i, 2)}; }

  /// Points moved by a same-sized flow.
  PointCloud warped(const FlowField<Real>& flow) const {
    require(flow.rows() == size() && flow.cols() == 3, "PointCloud::warped: flow shape mismatch");
    Tensor<Real> out = coords_;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += flow[i];
    return PointCloud(std::move(out));
  }

  PointCloud subset(const std::vector<std::size_t>& idx) const {
    Tensor<Real> out(idx.size(), 3);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < 3; ++c) out(r, c) = coords_(idx[r], c);
    return PointCloud(std::move(out));
  }

  template <class Other>
  PointCloud<Other> cast() const {
    return PointCloud<Other>(coords_.template cast<Other>());
  }

  friend bool operator==(const PointCloud& a, const PointCloud& b) { return a.coords_ == b.coords_; }

 private:
  Tensor<Real> coords_;
};

template <class Real>
inline Real squared_distance(const Real* a, const Real* b) {
  const Real dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// k neighbors per query, ascending by (squared distance, index).
template <class Real = double>
struct NeighborIndex {
  std::size_t queries = 0;
  std::size_t k = 0;
  std::vector<std::size_t> indices;  // queries * k
  std::vector<Real> sq_dists;        // queries * k

  std::size_t index(std::size_t q, std::size_t j) const { return indices[q * k + j]; }
  Real sq_dist(std::size_t q, std::size_t j) const { return sq_dists[q * k + j]; }
};

/// Exact k-d tree (median split) over a fixed reference cloud.
///
/// Search order is irrelevant to the result: candidates are ranked by
/// (squared distance, index), which gives the same answer as a linear scan
/// including ties.
template <class Real = double>
class KdTree {
 public:
  explicit KdTree(const Tensor<Real>& points) : points_(&points), order_(points.rows()) {
    require(points.rows() > 0, "KdTree: empty reference set");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    nodes_.reserve(2 * points.rows() / kLeafSize + 2);
    build(0, order_.size());
  }

  /// Writes the k nearest references to `query` into out_idx/out_d2 (ascending).
  void nearest(const Real* query, std::size_t k, std::size_t* out_idx, Real* out_d2) const {
    std::vector<Candidate> heap;
    heap.reserve(k + 1);
    search(0, query, k, heap);
    std::sort_heap(heap.begin(), heap.end());
    for (std::size_t j = 0; j < heap.size(); ++j) {
      out_idx[j] = heap[j].index;
      out_d2[j] = heap[j].d2;
    }
  }

 private:
  static constexpr std::size_t kLeafSize = 12;

  struct Candidate {
    Real d2;
    std::size_t index;
    bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && index < o.index); }
  };

  struct Node {
    std::size_t begin, end;
    int axis = -1;  // -1 for leaves
    Real split = 0;
    std::size_t left = 0, right = 0;
  };

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t id = nodes_.size();
    nodes_.push_back(Node{begin, end});
    if (end - begin <= kLeafSize) return id;
    const auto& p = *points_;
    std::array<Real, 3> lo{}, hi{};
    lo.fill(std::numeric_limits<Real>::max());
    hi.fill(std::numeric_limits<Real>::lowest());
    for (std::size_t i = begin; i < end; ++i)
      for (int c = 0; c < 3; ++c) {
        lo[c] = std::min(lo[c], p(order_[i], c));
        hi[c] = std::max(hi[c], p(order_[i], c));
      }
    int axis = 0;
    for (int c = 1; c < 3; ++c)
      if (hi[c] - lo[c] > hi[axis] - lo[axis]) axis = c;
    if (hi[axis] - lo[axis] <= Real(0)) return id;  // all coincident: keep as a leaf
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::size_t a, std::size_t b) { return p(a, axis) < p(b, axis); });
    const Real split = p(order_[mid], axis);
    const std::size_t left = build(begin, mid);
    const std::size_t right = build(mid, end);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  void offer(std::vector<Candidate>& heap, std::size_t k, Candidate c) const {
    if (heap.size() < k) {
      heap.push_back(c);
      std::push_heap(heap.begin(), heap.end());
    } else if (c < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = c;
      std::push_heap(heap.begin(), heap.end());
    }
  }

  void search(std::size_t id, const Real* q, std::size_t k, std::vector<Candidate>& heap) const {
    const Node& node = nodes_[id];
    const auto& p = *points_;
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) {
        const std::size_t r = order_[i];
        offer(heap, k, Candidate{squared_distance(q, p.data() + 3 * r), r});
      }
      return;
    }
    // Left holds coordinates <= split, right holds >= split.
    const Real diff = q[node.axis] - node.split;
    const std::size_t near = diff <= 0 ? node.left : node.right;
    const std::size_t far = diff <= 0 ? node.right : node.left;
    search(near, q, k, heap);
    // Prune only when strictly farther: an equal distance may still win on index.
    if (heap.size() < k || diff * diff <= heap.front().d2) search(far, q, k, heap);
  }

  const Tensor<Real>* points_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

/// Exact k nearest references for every query, ties broken by smaller index.
template <class Real>
NeighborIndex<Real> knn(const Tensor<Real>& queries, const Tensor<Real>& references, std::size_t k) {
  require(k > 0, "knn: k must be positive");
  require(references.rows() > 0, "knn: empty reference set");
  require(k <= references.rows(), "knn: k exceeds reference count");
  require(queries.cols() == 3 && references.cols() == 3, "knn: coordinates must be n x 3");
  NeighborIndex<Real> out{queries.rows(), k, std::vector<std::size_t>(queries.rows() * k),
                          std::vector<Real>(queries.rows() * k)};
  KdTree<Real> tree(references);
  for (std::size_t q = 0; q < queries.rows(); ++q)
    tree.nearest(queries.data() + 3 * q, k, out.indices.data() + q * k, out.sq_dists.data() + q * k);
  return out;
}

template <class Real>
NeighborIndex<Real> knn(const PointCloud<Real>& queries, const PointCloud<Real>& references, std::size_t k) {
  return knn(queries.coords(), references.coords(), k);
}

/// Index of the nearest target point for every point (knn with k = 1).
template <class Real>
std::vector<std::size_t> nearest_match(const Tensor<Real>& points, const Tensor<Real>& target) {
  require(target.rows() > 0, "nearest_match: empty target");
  return knn(points, target, 1).indices;
}

template <class Real>
std::vector<std::size_t> nearest_match(const PointCloud<Real>& points, const PointCloud<Real>& target) {
  return nearest_match(points.coords(), target.coords());
}

/// Greedy max-min distance sampling starting at `seed_index`.
/// Returns min(L, n) distinct indices; ties go to the smaller index.
template <class Real>
std::vector<std::size_t> farthest_point_sample(const PointCloud<Real>& cloud, std::size_t count,
                                               std::size_t seed_index = 0) {
  const std::size_t n = cloud.size();
  require(n > 0, "farthest_point_sample: empty cloud");
  require(count >= 1, "farthest_point_sample: L must be >= 1");
  require(seed_index < n, "farthest_point_sample: seed index out of range");
  const std::size_t take = std::min(count, n);
  const auto& p = cloud.coords();
  std::vector<std::size_t> picked{seed_index};
  std::vector<Real> min_d2(n, std::numeric_limits<Real>::infinity());
  std::vector<char> used(n, 0);
  used[seed_index] = 1;
  std::size_t last = seed_index;
  while (picked.size() < take) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      min_d2[i] = std::min(min_d2[i], squared_distance(p.data() + 3 * i, p.data() + 3 * last));
      if (best == n || min_d2[i] > min_d2[best]) best = i;
    }
    used[best] = 1;
    picked.push_back(best);
    last = best;
  }
  return picked;
}

/// Neighbors and normalized inverse-distance weights used by backward interpolation.
template <class Real = double>
struct InterpolationStencil {
  std::size_t k = 0;                 // neighbors per destination point
  std::vector<std::size_t> indices;  // dest * k
  std::vector<Real> weights;         // dest * k, rows sum to one
};

inline constexpr std::size_t kInterpolationNeighbors = 3;
inline constexpr double kInterpolationEps = 1e-8;
inline constexpr double kCoincidenceRadius = 1e-10;

/// 3-NN inverse-distance weights 1/(d + 1e-8); a source point closer than
/// 1e-10 takes the full weight. Fewer than 3 sources use all of them.
template <class Real>
InterpolationStencil<Real> interpolation_stencil(const Tensor<Real>& source, const Tensor<Real>& dest) {
  require(source.rows() > 0, "backward_interpolate: empty source");
  const std::size_t k = std::min(kInterpolationNeighbors, source.rows());
  auto nb = knn(dest, source, k);
  InterpolationStencil<Real> s{k, std::move(nb.indices), std::vector<Real>(dest.rows() * k)};
  for (std::size_t q = 0; q < dest.rows(); ++q) {
    Real* w = s.weights.data() + q * k;
    const Real d0 = std::sqrt(nb.sq_dists[q * k]);
    if (d0 < Real(kCoincidenceRadius)) {
      w[0] = 1;
      for (std::size_t j = 1; j < k; ++j) w[j] = 0;
      continue;
    }
    Real total = 0;
    for (std::size_t j = 0; j < k; ++j) total += (w[j] = Real(1) / (std::sqrt(nb.sq_dists[q * k + j]) + Real(kInterpolationEps)));
    for (std::size_t j = 0; j < k; ++j) w[j] /= total;
  }
  return s;
}

/// Transfers per-point values from `source` onto `dest` points.
template <class Real>
Tensor<Real> backward_interpolate(const Tensor<Real>& values_on_source, const PointCloud<Real>& source,
                                  const PointCloud<Real>& dest) {
  require(values_on_source.rows() == source.size(), "backward_interpolate: value rows must match source count");
  const auto s = interpolation_stencil(source.coords(), dest.coords());
  Tensor<Real> out(dest.size(), values_on_source.cols());
  for (std::size_t q = 0; q < dest.size(); ++q)
    for (std::size_t j = 0; j < s.k; ++j) {
      const Real w = s.weights[q * s.k + j];
      const auto src = values_on_source.row(s.indices[q * s.k + j]);
      for (std::size_t c = 0; c < out.cols(); ++c) out(q, c) += w * src[c];
    }
  return out;
}

}  // namespace spflow
