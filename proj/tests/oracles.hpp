#pragma once

// Reference implementations used only by the tests. They work on plain
// std::vector<double> with textbook loops and share no code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace oracle {

using Point = std::array<double, 2>;
using PointSet = std::vector<Point>;

inline std::vector<double> softmax(const std::vector<double>& x) {
  const double m = *std::max_element(x.begin(), x.end());
  std::vector<double> e(x.size());
  double z = 0.0;
  for (size_t i = 0; i < x.size(); ++i) z += (e[i] = std::exp(x[i] - m));
  for (auto& v : e) v /= z;
  return e;
}

// Expected cell-centre coordinate of a row-major H x W probability map.
inline Point soft_argmax(const std::vector<double>& p, int h, int w) {
  Point out{0.0, 0.0};
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      out[0] += p[i * w + j] * (j + 0.5) / w;
      out[1] += p[i * w + j] * (i + 0.5) / h;
    }
  }
  return out;
}

// Gaussian elimination with partial pivoting; a is n x n row-major, b is n x m.
inline std::vector<double> solve(std::vector<double> a, std::vector<double> b, int n, int m) {
  for (int c = 0; c < n; ++c) {
    int pivot = c;
    for (int r = c + 1; r < n; ++r) {
      if (std::abs(a[r * n + c]) > std::abs(a[pivot * n + c])) pivot = r;
    }
    if (std::abs(a[pivot * n + c]) < 1e-14) throw std::runtime_error("oracle::solve: singular");
    for (int k = 0; k < n; ++k) std::swap(a[c * n + k], a[pivot * n + k]);
    for (int k = 0; k < m; ++k) std::swap(b[c * m + k], b[pivot * m + k]);
    for (int r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a[r * n + c] / a[c * n + c];
      if (f == 0.0) continue;
      for (int k = c; k < n; ++k) a[r * n + k] -= f * a[c * n + k];
      for (int k = 0; k < m; ++k) b[r * m + k] -= f * b[c * m + k];
    }
  }
  for (int r = 0; r < n; ++r) {
    for (int k = 0; k < m; ++k) b[r * m + k] /= a[r * n + r];
  }
  return b;
}

// Thin-plate spline through (src[i] -> dst[i]) with kernel r^2 log r.
struct ThinPlate {
  PointSet src;
  std::vector<double> coef;  // (n + 3) x 2: radial weights then (1, u, v) affine terms

  static double kernel(double r2) { return r2 <= 0.0 ? 0.0 : 0.5 * r2 * std::log(r2); }

  ThinPlate(const PointSet& s, const PointSet& d) : src(s) {
    const int n = int(s.size());
    const int dim = n + 3;
    std::vector<double> a(dim * dim, 0.0), b(dim * 2, 0.0);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const double du = s[i][0] - s[j][0], dv = s[i][1] - s[j][1];
        a[i * dim + j] = kernel(du * du + dv * dv);
      }
      const double row[3] = {1.0, s[i][0], s[i][1]};
      for (int k = 0; k < 3; ++k) {
        a[i * dim + n + k] = row[k];
        a[(n + k) * dim + i] = row[k];
      }
      b[i * 2 + 0] = d[i][0];
      b[i * 2 + 1] = d[i][1];
    }
    coef = solve(a, b, dim, 2);
  }

  Point operator()(const Point& p) const {
    const int n = int(src.size());
    Point out{0.0, 0.0};
    for (int c = 0; c < 2; ++c) {
      double v = coef[(n + 0) * 2 + c] + coef[(n + 1) * 2 + c] * p[0] + coef[(n + 2) * 2 + c] * p[1];
      for (int i = 0; i < n; ++i) {
        const double du = p[0] - src[i][0], dv = p[1] - src[i][1];
        v += coef[i * 2 + c] * kernel(du * du + dv * dv);
      }
      out[c] = v;
    }
    return out;
  }
};

inline double cross_entropy(const std::vector<double>& logits, int label) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return -(logits[label] - m - std::log(z));
}

// The five mining steps, written as brute-force rank counting.
struct Selection {
  std::vector<int64_t> indices;
  std::vector<PointSet> labels;
};

inline Selection sampler(const std::vector<PointSet>& batch, int kw, int ns, int nv,
                         bool relative = true) {
  const int n = int(batch.size());
  auto spread = [](const PointSet& p) {
    double mean = 0.0;
    for (const auto& q : p) mean += q[0];
    mean /= double(p.size());
    double var = 0.0;
    for (const auto& q : p) var += (q[0] - mean) * (q[0] - mean);
    return var / double(p.size());
  };
  std::vector<double> s(n);
  for (int i = 0; i < n; ++i) s[i] = spread(batch[i]);

  // Stage 1: sample i survives iff fewer than ns samples outrank it.
  std::vector<int> candidates;
  for (int i = 0; i < n; ++i) {
    int ahead = 0;
    for (int j = 0; j < n; ++j) {
      if (s[j] > s[i] || (s[j] == s[i] && j < i)) ++ahead;
    }
    if (ahead < ns) candidates.push_back(i);
  }

  // Stage 2: facing score from the discriminative parts.
  std::vector<double> f(n, 0.0);
  int plus = 0, minus = 0;
  for (int i : candidates) {
    double lead = 0.0, all = 0.0;
    for (int k = 0; k < kw; ++k) lead += batch[i][k][0];
    for (const auto& q : batch[i]) all += q[0];
    lead /= kw;
    all /= double(batch[i].size());
    f[i] = lead - (relative ? all : 0.5);
    if (f[i] > 0) ++plus;
    if (f[i] < 0) ++minus;
  }
  const double dir = plus >= minus ? 1.0 : -1.0;

  // Stage 3: order candidates by rank in the chosen direction.
  std::vector<std::pair<int, int>> ranked;  // (rank, index)
  for (int i : candidates) {
    int ahead = 0;
    for (int j : candidates) {
      const double a = dir * f[j], b = dir * f[i];
      if (a > b || (a == b && j < i)) ++ahead;
    }
    ranked.emplace_back(ahead, i);
  }
  std::sort(ranked.begin(), ranked.end());
  Selection out;
  for (int r = 0; r < nv; ++r) {
    const int i = ranked[r].second;
    out.indices.push_back(i);
    PointSet flipped = batch[i];
    for (auto& q : flipped) q[0] = 1.0 - q[0];
    out.labels.push_back(flipped);
  }
  return out;
}

}  // namespace oracle
