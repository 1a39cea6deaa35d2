#include "vsg/metrics.hpp"

#include "vsg/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vsg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_dims(const Mask& a, const Mask& b) {
  if (a.dims != b.dims) throw ShapeError("mask shapes differ");
}

// Lower envelope of parabolas over sites at x_i = i * s with heights f_i.
void edt_1d(const std::vector<double>& f, double s, std::vector<double>& d, std::vector<int>& v,
            std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double xq = q * s;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double sq;
    for (;;) {
      const double xp = v[k] * s;
      sq = ((f[q] + xq * xq) - (f[v[k]] + xp * xp)) / (2.0 * (xq - xp));
      if (sq <= z[k] && k > 0)
        --k;
      else
        break;
    }
    ++k;
    v[k] = q;
    z[k] = sq;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double xq = q * s;
    while (z[j + 1] < xq) ++j;
    const double dx = xq - v[j] * s;
    d[q] = dx * dx + f[v[j]];
  }
}

std::vector<double> directed(const Mask& from, const std::vector<double>& dist_to) {
  std::vector<double> out;
  for (std::size_t i = 0; i < from.data.size(); ++i)
    if (from.data[i]) out.push_back(dist_to[i]);
  return out;
}

}  // namespace

double dice(const Mask& a, const Mask& b) {
  require_same_dims(a, b);
  std::int64_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

Mask boundary(const Mask& m) {
  Mask out(m.dims);
  const auto [X, Y, Z] = m.dims;
  auto inside = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
    return x >= 0 && y >= 0 && z >= 0 && x < X && y < Y && z < Z && m.at(x, y, z) != 0;
  };
  for (std::int64_t z = 0; z < Z; ++z)
    for (std::int64_t y = 0; y < Y; ++y)
      for (std::int64_t x = 0; x < X; ++x)
        if (m.at(x, y, z) && !(inside(x - 1, y, z) && inside(x + 1, y, z) && inside(x, y - 1, z) &&
                               inside(x, y + 1, z) && inside(x, y, z - 1) && inside(x, y, z + 1)))
          out.at(x, y, z) = 1;
  return out;
}

std::vector<double> distance_transform(const Mask& features, const Spacing3& spacing) {
  const Dims3 d = features.dims;
  std::vector<double> g(features.data.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = features.data[i] ? 0.0 : kInf;
  const auto longest = static_cast<std::size_t>(std::max({d[0], d[1], d[2]}));
  std::vector<double> f, out;
  std::vector<int> v(longest);
  std::vector<double> z(longest + 1);
  const std::array<std::int64_t, 3> stride{1, d[0], d[0] * d[1]};
  for (int axis = 0; axis < 3; ++axis) {
    const auto n = d[axis];
    f.resize(static_cast<std::size_t>(n));
    out.resize(static_cast<std::size_t>(n));
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (std::int64_t i = 0; i < d[a1]; ++i)
      for (std::int64_t j = 0; j < d[a2]; ++j) {
        const std::int64_t base = i * stride[a1] + j * stride[a2];
        for (std::int64_t q = 0; q < n; ++q) f[q] = g[base + q * stride[axis]];
        edt_1d(f, static_cast<double>(spacing[axis]), out, v, z);
        for (std::int64_t q = 0; q < n; ++q) g[base + q * stride[axis]] = out[q];
      }
  }
  for (auto& x : g) x = std::sqrt(x);
  return g;
}

double percentile_of(std::vector<double> values, double p) {
  if (values.empty()) throw UsageError("percentile of an empty set");
  if (!(p > 0.0 && p <= 100.0)) throw UsageError("percentile must lie in (0, 100]");
  std::sort(values.begin(), values.end());
  const double rank = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  if (frac == 0.0) return values[lo];
  return values[lo] + frac * (values[hi] - values[lo]);
}

double hausdorff(const Mask& a, const Mask& b, const Spacing3& spacing, double percentile) {
  require_same_dims(a, b);
  if (!(percentile > 0.0 && percentile <= 100.0)) throw UsageError("percentile must lie in (0, 100]");
  const auto na = a.count(), nb = b.count();
  if (na == 0 && nb == 0) return 0.0;
  if (na == 0 || nb == 0) return kMissedRegionHd;
  const Mask ba = boundary(a), bb = boundary(b);
  const double ab = percentile_of(directed(ba, distance_transform(bb, spacing)), percentile);
  const double ba_ = percentile_of(directed(bb, distance_transform(ba, spacing)), percentile);
  return std::max(ab, ba_);
}

SubjectReport evaluate_subject(const LabelMap& pred, const LabelMap& gt, const Spacing3& spacing, double percentile,
                               std::string subject_id) {
  if (pred.dims != gt.dims) throw ShapeError("prediction and ground truth shapes differ");
  SubjectReport r;
  r.subject_id = std::move(subject_id);
  r.hd_percentile = percentile;
  for (std::size_t i = 0; i < 3; ++i) {
    const Region& region = Region::all()[i];
    const Mask p = extract_region(pred, region), g = extract_region(gt, region);
    r.scores[i] = {region.name, dice(p, g), hausdorff(p, g, spacing, percentile)};
    r.mean_dice += r.scores[i].dice / 3.0;
    r.mean_hd += r.scores[i].hd / 3.0;
  }
  return r;
}

SubjectReport aggregate_reports(std::span<const SubjectReport> reports) {
  if (reports.empty()) throw UsageError("no reports to aggregate");
  SubjectReport m;
  m.subject_id = "mean";
  m.hd_percentile = reports.front().hd_percentile;
  const auto n = static_cast<double>(reports.size());
  for (std::size_t i = 0; i < 3; ++i) m.scores[i].region = Region::all()[i].name;
  for (const auto& r : reports)
    for (std::size_t i = 0; i < 3; ++i) {
      m.scores[i].dice += r.scores[i].dice / n;
      m.scores[i].hd += r.scores[i].hd / n;
    }
  for (const auto& s : m.scores) {
    m.mean_dice += s.dice / 3.0;
    m.mean_hd += s.hd / 3.0;
  }
  return m;
}

void to_json(nlohmann::json& j, const RegionScore& s) {
  j = nlohmann::json{{"region", to_string(s.region)}, {"dice", s.dice}, {"hd", s.hd}};
}

void to_json(nlohmann::json& j, const SubjectReport& r) {
  nlohmann::json dice_j, hd_j;
  for (const auto& s : r.scores) {
    dice_j[to_string(s.region)] = s.dice;
    hd_j[to_string(s.region)] = s.hd;
  }
  dice_j["Mean"] = r.mean_dice;
  hd_j["Mean"] = r.mean_hd;
  j = nlohmann::json{{"subject_id", r.subject_id},
                     {"dice", dice_j},
                     {"hd", hd_j},
                     {"hd_percentile", r.hd_percentile},
                     {"hd_missed_region_value", kMissedRegionHd}};
}

}  // namespace vsg
