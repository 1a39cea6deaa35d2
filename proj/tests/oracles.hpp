#pragma once

// Naive reference implementations for the tests. Loops only; nothing here
// calls into the library's math.

#include "vsg/volio.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat random_mat(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Mat m(rows, std::vector<double>(cols));
  for (auto& r : m)
    for (auto& v : r) v = d(rng);
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// softmax(q k^T / sqrt(d)) v, one scalar at a time.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, Mat* weights = nullptr) {
  const std::size_t n = q.size(), m = k.size(), d = q[0].size();
  Mat out(n, std::vector<double>(v[0].size(), 0.0));
  Mat w(n, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) s += q[i][t] * k[j][t];
      w[i][j] = s / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, w[i][j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (w[i][j] = std::exp(w[i][j] - mx));
    for (std::size_t j = 0; j < m; ++j) w[i][j] /= z;
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t t = 0; t < v[0].size(); ++t) out[i][t] += w[i][j] * v[j][t];
  }
  if (weights) *weights = w;
  return out;
}

// Direct 3D cross-correlation on row-major [N,C,X,Y,Z] data, weights [F,C,k0,k1,k2].
struct ConvShape {
  std::int64_t n, c, x, y, z;
};

inline std::vector<double> conv3d(const std::vector<double>& in, ConvShape s, const std::vector<double>& w,
                                  std::int64_t f, std::array<std::int64_t, 3> k, std::array<std::int64_t, 3> stride,
                                  std::array<std::int64_t, 3> pad, ConvShape* out_shape) {
  const std::int64_t ox = (s.x + 2 * pad[0] - k[0]) / stride[0] + 1;
  const std::int64_t oy = (s.y + 2 * pad[1] - k[1]) / stride[1] + 1;
  const std::int64_t oz = (s.z + 2 * pad[2] - k[2]) / stride[2] + 1;
  *out_shape = {s.n, f, ox, oy, oz};
  std::vector<double> out(static_cast<std::size_t>(s.n * f * ox * oy * oz), 0.0);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t fo = 0; fo < f; ++fo)
      for (std::int64_t a = 0; a < ox; ++a)
        for (std::int64_t b = 0; b < oy; ++b)
          for (std::int64_t cz = 0; cz < oz; ++cz) {
            double acc = 0.0;
            for (std::int64_t c = 0; c < s.c; ++c)
              for (std::int64_t i = 0; i < k[0]; ++i)
                for (std::int64_t j = 0; j < k[1]; ++j)
                  for (std::int64_t l = 0; l < k[2]; ++l) {
                    const std::int64_t xi = a * stride[0] - pad[0] + i, yi = b * stride[1] - pad[1] + j,
                                       zi = cz * stride[2] - pad[2] + l;
                    if (xi < 0 || yi < 0 || zi < 0 || xi >= s.x || yi >= s.y || zi >= s.z) continue;
                    acc += in[static_cast<std::size_t>((((n * s.c + c) * s.x + xi) * s.y + yi) * s.z + zi)] *
                           w[static_cast<std::size_t>((((fo * s.c + c) * k[0] + i) * k[1] + j) * k[2] + l)];
                  }
            out[static_cast<std::size_t>((((n * f + fo) * ox + a) * oy + b) * oz + cz)] = acc;
          }
  return out;
}

inline std::int64_t dice_count_intersection(const vsg::Mask& a, const vsg::Mask& b) {
  std::int64_t n = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) n += (a.data[i] && b.data[i]);
  return n;
}

inline double dice_by_counting(const vsg::Mask& a, const vsg::Mask& b) {
  std::int64_t na = 0, nb = 0;
  for (auto v : a.data) na += v != 0;
  for (auto v : b.data) nb += v != 0;
  if (na == 0 && nb == 0) return 1.0;
  return 2.0 * static_cast<double>(dice_count_intersection(a, b)) / static_cast<double>(na + nb);
}

inline std::vector<std::array<std::int64_t, 3>> surface(const vsg::Mask& m) {
  std::vector<std::array<std::int64_t, 3>> pts;
  const auto d = m.dims;
  auto in = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
    if (x < 0 || y < 0 || z < 0 || x >= d[0] || y >= d[1] || z >= d[2]) return false;
    return m.data[static_cast<std::size_t>(x + d[0] * (y + d[1] * z))] != 0;
  };
  const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (std::int64_t z = 0; z < d[2]; ++z)
    for (std::int64_t y = 0; y < d[1]; ++y)
      for (std::int64_t x = 0; x < d[0]; ++x) {
        if (!in(x, y, z)) continue;
        bool edge = false;
        for (const auto& o : off) edge = edge || !in(x + o[0], y + o[1], z + o[2]);
        if (edge) pts.push_back({x, y, z});
      }
  return pts;
}

inline double interpolated_percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (pos - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

// All-pairs surface distances, max of the two directed percentiles.
inline double hausdorff_all_pairs(const vsg::Mask& a, const vsg::Mask& b, const vsg::Spacing3& sp, double p) {
  const auto sa = surface(a), sb = surface(b);
  if (sa.empty() && sb.empty()) return 0.0;
  if (sa.empty() || sb.empty()) return 373.13;
  auto directed = [&](const auto& from, const auto& to) {
    std::vector<double> ds;
    for (const auto& u : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& v : to) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) {
          const double t = static_cast<double>(u[k] - v[k]) * static_cast<double>(sp[k]);
          s += t * t;
        }
        best = std::min(best, s);
      }
      ds.push_back(std::sqrt(best));
    }
    return interpolated_percentile(ds, p);
  };
  return std::max(directed(sa, sb), directed(sb, sa));
}

// Ties: the label nested in more regions wins.
inline int tie_rank(std::uint8_t label) {
  static const std::map<std::uint8_t, int> rank{{4, 3}, {1, 2}, {2, 1}, {0, 0}};
  return rank.at(label);
}

// Each model's label repeated `weight` times, then counted.
inline std::uint8_t weighted_vote(const std::vector<std::uint8_t>& labels, const std::vector<int>& weights) {
  std::vector<std::uint8_t> ballots;
  for (std::size_t m = 0; m < labels.size(); ++m)
    for (int r = 0; r < weights[m]; ++r) ballots.push_back(labels[m]);
  std::uint8_t best = ballots.front();
  std::int64_t best_count = -1;
  for (std::uint8_t cand : {0, 1, 2, 4}) {
    const auto c = std::count(ballots.begin(), ballots.end(), cand);
    if (c > best_count || (c == best_count && c > 0 && tie_rank(cand) > tie_rank(best))) {
      best = cand;
      best_count = c;
    }
  }
  return best;
}

struct LossParts {
  double dice, ce;
};

// Soft Dice (foreground mean, eps in numerator and denominator) plus mean NLL.
// logits row-major [N,K,S], target [N,S] class indices.
inline LossParts dice_ce(const std::vector<double>& logits, std::int64_t N, std::int64_t K, std::int64_t S,
                         const std::vector<int>& target, double eps = 1e-5) {
  std::vector<double> inter(K, 0.0), ps(K, 0.0), gs(K, 0.0);
  double nll = 0.0;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t s = 0; s < S; ++s) {
      double z = 0.0;
      for (std::int64_t k = 0; k < K; ++k) z += std::exp(logits[(n * K + k) * S + s]);
      const int g = target[n * S + s];
      for (std::int64_t k = 0; k < K; ++k) {
        const double p = std::exp(logits[(n * K + k) * S + s]) / z;
        ps[k] += p;
        if (k == g) {
          inter[k] += p;
          gs[k] += 1.0;
          nll -= std::log(p);
        }
      }
    }
  double dice = 0.0;
  for (std::int64_t k = 1; k < K; ++k) dice += 1.0 - (2.0 * inter[k] + eps) / (ps[k] + gs[k] + eps);
  return {dice / static_cast<double>(K - 1), nll / static_cast<double>(N * S)};
}

inline vsg::Mask random_mask(vsg::Dims3 d, double density, std::mt19937_64& rng) {
  vsg::Mask m(d);
  std::bernoulli_distribution on(density);
  for (auto& v : m.data) v = on(rng);
  return m;
}

inline vsg::LabelMap random_labels(vsg::Dims3 d, std::mt19937_64& rng) {
  vsg::LabelMap m(d);
  std::uniform_int_distribution<int> pick(0, 3);
  for (auto& v : m.data) v = vsg::kLabelSet[static_cast<std::size_t>(pick(rng))];
  return m;
}

}  // namespace oracle
