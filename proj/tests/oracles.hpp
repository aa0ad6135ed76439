// SPDX-License-Identifier: Apache-2.0
#pragma once

// Independent brute-force reference implementations. They work on plain
// nested vectors with exhaustive scans and share no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include <spflow/spflow.hpp>

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows rows_of(const spflow::Tensor<double>& t) {
  Rows r(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) r[i][j] = t(i, j);
  return r;
}

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// All references ranked by (squared distance, index), truncated to k.
inline std::vector<std::pair<double, std::size_t>> ranked(const std::vector<double>& q, const Rows& refs,
                                                           std::size_t k) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t j = 0; j < refs.size(); ++j) all.emplace_back(sq_dist(q, refs[j]), j);
  std::sort(all.begin(), all.end());
  all.resize(std::min(k, all.size()));
  return all;
}

struct Knn {
  std::vector<std::size_t> indices;
  std::vector<double> sq_dists;
};

inline Knn knn(const Rows& queries, const Rows& refs, std::size_t k) {
  Knn out;
  for (const auto& q : queries)
    for (const auto& [d2, j] : ranked(q, refs, k)) {
      out.indices.push_back(j);
      out.sq_dists.push_back(d2);
    }
  return out;
}

inline std::vector<std::size_t> nearest_match(const Rows& points, const Rows& target) {
  std::vector<std::size_t> out;
  for (const auto& p : points) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < target.size(); ++j)
      if (sq_dist(p, target[j]) < sq_dist(p, target[best])) best = j;
    out.push_back(best);
  }
  return out;
}

/// Exhaustive max-min selection: every step recomputes each candidate's
/// distance to the whole selected set.
inline std::vector<std::size_t> fps(const Rows& pts, std::size_t count, std::size_t seed) {
  std::vector<std::size_t> sel{seed};
  while (sel.size() < std::min(count, pts.size())) {
    std::size_t best = pts.size();
    double best_d = -1;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (std::find(sel.begin(), sel.end(), i) != sel.end()) continue;
      double d = std::numeric_limits<double>::infinity();
      for (auto s : sel) d = std::min(d, sq_dist(pts[i], pts[s]));
      if (d > best_d) best_d = d, best = i;
    }
    sel.push_back(best);
  }
  return sel;
}

inline double chamfer(const Rows& warped, const Rows& target) {
  double total = 0;
  for (const auto& q : target) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : warped) best = std::min(best, std::sqrt(sq_dist(q, p)));
    total += best;
  }
  for (const auto& p : warped) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : target) best = std::min(best, std::sqrt(sq_dist(p, q)));
    total += best;
  }
  return total;
}

inline double smoothness(const Rows& pts, const Rows& flow, std::size_t k) {
  double total = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<std::pair<double, std::size_t>> others;
    for (std::size_t j = 0; j < pts.size(); ++j)
      if (j != i) others.emplace_back(sq_dist(pts[i], pts[j]), j);
    std::sort(others.begin(), others.end());
    double s = 0;
    for (std::size_t t = 0; t < k; ++t) {
      const auto j = others[t].second;
      s += norm({flow[i][0] - flow[j][0], flow[i][1] - flow[j][1], flow[i][2] - flow[j][2]});
    }
    total += s / static_cast<double>(k);
  }
  return total;
}

/// Inverse-distance weighting over the 3 nearest sources, 1/(d + 1e-8);
/// a source within 1e-10 is copied.
inline Rows interpolate(const Rows& values, const Rows& source, const Rows& dest) {
  Rows out;
  for (const auto& q : dest) {
    const auto nb = ranked(q, source, 3);
    std::vector<double> v(values[0].size(), 0.0);
    if (std::sqrt(nb[0].first) < 1e-10) {
      v = values[nb[0].second];
    } else {
      double total = 0;
      for (const auto& [d2, j] : nb) total += 1.0 / (std::sqrt(d2) + 1e-8);
      for (const auto& [d2, j] : nb)
        for (std::size_t c = 0; c < v.size(); ++c) v[c] += (1.0 / (std::sqrt(d2) + 1e-8)) / total * values[j][c];
    }
    out.push_back(v);
  }
  return out;
}

/// Flow of `other` carried onto `cloud` in the warped frame, negated.
inline Rows backward_flow(const Rows& other_flow, const Rows& other, const Rows& cloud) {
  Rows warped = other;
  for (std::size_t i = 0; i < warped.size(); ++i)
    for (int c = 0; c < 3; ++c) warped[i][c] += other_flow[i][c];
  auto v = interpolate(other_flow, warped, cloud);
  for (auto& row : v)
    for (auto& x : row) x = -x;
  return v;
}

inline double consistency(const Rows& fp, const Rows& fq, const Rows& p, const Rows& q) {
  double total = 0;
  const auto op = backward_flow(fq, q, p), oq = backward_flow(fp, p, q);
  for (std::size_t i = 0; i < p.size(); ++i)
    total += norm({fp[i][0] - op[i][0], fp[i][1] - op[i][1], fp[i][2] - op[i][2]});
  for (std::size_t j = 0; j < q.size(); ++j)
    total += norm({fq[j][0] - oq[j][0], fq[j][1] - oq[j][1], fq[j][2] - oq[j][2]});
  return total;
}

inline Rows initial_flow(const Rows& plan, const Rows& p, const Rows& q) {
  Rows out;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double w = 0;
    std::vector<double> acc(3, 0.0);
    for (std::size_t j = 0; j < q.size(); ++j) {
      w += plan[i][j];
      for (int c = 0; c < 3; ++c) acc[c] += plan[i][j] * q[j][c];
    }
    out.push_back({acc[0] / w - p[i][0], acc[1] / w - p[i][1], acc[2] / w - p[i][2]});
  }
  return out;
}

/// Row and column rescaling applied directly to the matrix, `sweeps` times,
/// followed by a final row rescaling.
inline Rows sinkhorn(Rows k, std::size_t sweeps) {
  const std::size_t n = k.size(), m = k[0].size();
  auto rows = [&] {
    for (auto& r : k) {
      double s = 0;
      for (double v : r) s += v;
      for (double& v : r) v /= s * static_cast<double>(n);
    }
  };
  rows();
  for (std::size_t t = 0; t < sweeps; ++t) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += k[i][j];
      for (std::size_t i = 0; i < n; ++i) k[i][j] /= s * static_cast<double>(m);
    }
    rows();
  }
  return k;
}

inline Rows reconstruct(const Rows& weights, const std::vector<std::size_t>& centers, const Rows& center_flows) {
  const std::size_t k = weights[0].size();
  Rows out(weights.size(), std::vector<double>(3, 0.0));
  for (std::size_t i = 0; i < weights.size(); ++i)
    for (std::size_t j = 0; j < k; ++j)
      for (int c = 0; c < 3; ++c) out[i][c] += weights[i][j] * center_flows[centers[i * k + j]][c];
  return out;
}

/// Per center: weighted mean of (coord || flow || feature) over the points
/// attending it, or the previous row when the total weight is below 1e-8.
inline Rows update_centers(const Rows& weights, const std::vector<std::size_t>& centers, const Rows& coords,
                           const Rows& flows, const Rows& feats, const Rows& previous) {
  const std::size_t k = weights[0].size();
  Rows out;
  for (std::size_t l = 0; l < previous.size(); ++l) {
    double r = 0;
    std::vector<double> acc(previous[l].size(), 0.0);
    for (std::size_t i = 0; i < weights.size(); ++i)
      for (std::size_t j = 0; j < k; ++j) {
        if (centers[i * k + j] != l) continue;
        const double w = weights[i][j];
        r += w;
        std::vector<double> row = coords[i];
        row.insert(row.end(), flows[i].begin(), flows[i].end());
        row.insert(row.end(), feats[i].begin(), feats[i].end());
        for (std::size_t c = 0; c < row.size(); ++c) acc[c] += w * row[c];
      }
    if (r < 1e-8) {
      out.push_back(previous[l]);
    } else {
      for (auto& v : acc) v /= r;
      out.push_back(acc);
    }
  }
  return out;
}

inline double leaky(double x, double slope) { return x > 0 ? x : slope * x; }

/// Dense layer on one row: x W + b.
inline std::vector<double> dense(const std::vector<double>& x, const spflow::Tensor<double>& w,
                                 const spflow::Tensor<double>& b) {
  std::vector<double> out(w.cols());
  for (std::size_t o = 0; o < w.cols(); ++o) {
    double s = b(0, o);
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w(i, o);
    out[o] = s;
  }
  return out;
}

/// Set convolution by nested loops: for every point, each of its k nearest
/// points (self included) contributes (feature || offset) through the layer
/// stack; the result is the channel-wise max.
inline Rows set_conv(const Rows& pts, const Rows* feats, const spflow::ParameterStore<double>& store,
                     const std::string& prefix, std::size_t layers, std::size_t k, double slope,
                     bool output_activation) {
  Rows out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<double> best;
    for (const auto& [d2, j] : ranked(pts[i], pts, k)) {
      std::vector<double> x;
      if (feats) x = (*feats)[j];
      for (int c = 0; c < 3; ++c) x.push_back(pts[j][c] - pts[i][c]);
      for (std::size_t l = 0; l < layers; ++l) {
        const auto base = prefix + "." + std::to_string(l);
        x = dense(x, store.value(base + ".weight"), store.value(base + ".bias"));
        if (l + 1 < layers || output_activation)
          for (auto& v : x) v = leaky(v, slope);
      }
      if (best.empty()) best = x;
      for (std::size_t c = 0; c < x.size(); ++c) best[c] = std::max(best[c], x[c]);
    }
    out.push_back(best);
  }
  return out;
}

/// Largest |row sum - 1/n| and |column sum - 1/m|.
inline std::pair<double, double> marginal_deviation(const Rows& plan) {
  const std::size_t n = plan.size(), m = plan[0].size();
  double rd = 0, cd = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (double v : plan[i]) s += v;
    rd = std::max(rd, std::abs(s - 1.0 / static_cast<double>(n)));
  }
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += plan[i][j];
    cd = std::max(cd, std::abs(s - 1.0 / static_cast<double>(m)));
  }
  return {rd, cd};
}

inline double max_abs_diff(const Rows& a, const spflow::Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b(i, j)));
  return m;
}

}  // namespace oracle
