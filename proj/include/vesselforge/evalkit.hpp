#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "core.hpp"
#include "volume.hpp"

namespace vesselforge::eval {

// ---------------------------------------------------------------------------
// Detection matching
// ---------------------------------------------------------------------------

struct Match {
  int tp = 0, fp = 0, fn = 0;
  Components pred, gt;
  // pred_for_gt[g-1]: ids of predicted components overlapping GT component g.
  std::vector<std::vector<std::uint32_t>> pred_for_gt;
};

inline void require_same_grid(const Mask& a, const Mask& b, const char* op) {
  if (!a.grid.same_shape(b.grid))
    throw ShapeError(std::string(op) + ": prediction and ground truth grids differ");
}

// A GT component is detected when any predicted component touches it; a
// predicted component that touches no GT component is one false positive.
inline Match match_detections(const Mask& pred, const Mask& gt) {
  require_same_grid(pred, gt, "match_detections");
  Match m;
  m.pred = connected_components(pred);
  m.gt = connected_components(gt);
  m.pred_for_gt.assign(m.gt.count(), {});
  std::vector<char> pred_hits(m.pred.count() + 1, 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto g = m.gt.labels.data[i], p = m.pred.labels.data[i];
    if (!g || !p) continue;
    pred_hits[p] = 1;
    auto& list = m.pred_for_gt[g - 1];
    if (std::find(list.begin(), list.end(), p) == list.end()) list.push_back(p);
  }
  for (auto& list : m.pred_for_gt) {
    std::sort(list.begin(), list.end());
    list.empty() ? ++m.fn : ++m.tp;
  }
  for (std::size_t p = 1; p <= m.pred.count(); ++p)
    if (!pred_hits[p]) ++m.fp;
  return m;
}

// ---------------------------------------------------------------------------
// Overlap and surface metrics
// ---------------------------------------------------------------------------

struct Overlap {
  std::size_t a = 0, b = 0, both = 0;
};

inline Overlap overlap(const Mask& a, const Mask& b) {
  require_same_grid(a, b, "overlap");
  Overlap o;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    o.a += x;
    o.b += y;
    o.both += x && y;
  }
  return o;
}

inline double dice(const Mask& a, const Mask& b) {
  const auto o = overlap(a, b);
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.a + o.b);
}

inline double iou(const Mask& a, const Mask& b) {
  const auto o = overlap(a, b);
  const auto uni = o.a + o.b - o.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(o.both) / static_cast<double>(uni);
}

// Foreground voxels with at least one 6-neighbour in the background; voxels
// outside the volume count as background.
inline Mask boundary(const Mask& m) {
  Mask out(m.grid);
  const auto& d = m.grid.dims;
  static constexpr int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        if (!m.at(x, y, z)) continue;
        for (const auto& o : off) {
          const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (!m.grid.contains(nx, ny, nz) || !m.at(nx, ny, nz)) {
            out.at(x, y, z) = 1;
            break;
          }
        }
      }
  return out;
}

namespace detail {

// 1D squared distance transform by lower envelope of parabolas, sample spacing w.
inline void edt_1d(const double* f, double* d, int n, double w, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = 0;
  int first = -1;
  for (int q = 0; q < n; ++q)
    if (f[q] < inf) {
      first = q;
      break;
    }
  if (first < 0) {
    std::fill(d, d + n, inf);
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  const auto pos = [w](int q) { return q * w; };
  for (int q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2 * (pos(q) - pos(p)));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < pos(q)) ++k;
    const double dq = pos(q) - pos(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

}  // namespace detail

// Exact squared Euclidean distance (mm^2) from each voxel to the nearest
// nonzero voxel of `features`, separable over axes with physical spacing.
inline std::vector<double> squared_edt(const Mask& features) {
  const auto& d = features.grid.dims;
  const auto& sp = features.grid.spacing;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(features.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = features.data[i] ? 0.0 : inf;
  const int longest = std::max({d[0], d[1], d[2]});
  std::vector<double> fin(longest), fout(longest), zbuf(longest + 1);
  std::vector<int> vbuf(longest);
  for (int axis = 0; axis < 3; ++axis) {
    const int n = d[axis];
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (int j = 0; j < d[a2]; ++j)
      for (int i = 0; i < d[a1]; ++i) {
        Index3 p{};
        p[a1] = i;
        p[a2] = j;
        for (int q = 0; q < n; ++q) {
          p[axis] = q;
          fin[q] = g[features.grid.index(p[0], p[1], p[2])];
        }
        detail::edt_1d(fin.data(), fout.data(), n, sp[axis], vbuf, zbuf);
        for (int q = 0; q < n; ++q) {
          p[axis] = q;
          g[features.grid.index(p[0], p[1], p[2])] = fout[q];
        }
      }
  }
  return g;
}

// Symmetric 95th-percentile surface distance in mm: the larger of the two
// directed 95th percentiles of boundary-to-boundary nearest distances.
inline double hd95(const Mask& a, const Mask& b) {
  require_same_grid(a, b, "hd95");
  if (count_nonzero(a) == 0 || count_nonzero(b) == 0) throw ShapeError("hd95: empty mask");
  const Mask ba = boundary(a), bb = boundary(b);
  const auto directed = [](const Mask& from, const Mask& to) {
    const auto dist = squared_edt(to);
    std::vector<double> d;
    for (std::size_t i = 0; i < from.size(); ++i)
      if (from.data[i]) d.push_back(std::sqrt(dist[i]));
    return percentile(std::move(d), 95.0);
  };
  return std::max(directed(ba, bb), directed(bb, ba));
}

// Same as hd95 with an explicit spacing overriding the grids'.
inline double hd95(Mask a, Mask b, const Vec3& spacing) {
  a.grid.spacing = spacing;
  b.grid.spacing = spacing;
  return hd95(a, b);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct LesionMetrics {
  int gt_label = 0;
  double dice = 0, iou = 0, hd95_mm = 0;
};

struct SubjectReport {
  std::string subject_id;
  int tp = 0, fp = 0, fn = 0;
  std::optional<double> sensitivity;  // empty for subjects without lesions
  double fp_rate = 0;
  std::vector<LesionMetrics> per_aneurysm;  // true positives only
  std::optional<double> dice, iou, hd95_mm;  // means over per_aneurysm
};

inline SubjectReport evaluate_subject(const Mask& pred, const Mask& gt, const std::string& id) {
  const Match m = match_detections(pred, gt);
  SubjectReport r;
  r.subject_id = id;
  r.tp = m.tp;
  r.fp = m.fp;
  r.fn = m.fn;
  r.fp_rate = m.fp;
  if (m.tp + m.fn > 0) r.sensitivity = static_cast<double>(m.tp) / (m.tp + m.fn);
  for (std::size_t g = 0; g < m.pred_for_gt.size(); ++g) {
    const auto& preds = m.pred_for_gt[g];
    if (preds.empty()) continue;
    Mask lesion(gt.grid), matched(gt.grid);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      lesion.data[i] = m.gt.labels.data[i] == g + 1;
      const auto p = m.pred.labels.data[i];
      matched.data[i] = p && std::binary_search(preds.begin(), preds.end(), p);
    }
    r.per_aneurysm.push_back({static_cast<int>(g + 1), dice(matched, lesion), iou(matched, lesion), hd95(matched, lesion)});
  }
  if (!r.per_aneurysm.empty()) {
    double d = 0, j = 0, h = 0;
    for (const auto& l : r.per_aneurysm) {
      d += l.dice;
      j += l.iou;
      h += l.hd95_mm;
    }
    const double n = static_cast<double>(r.per_aneurysm.size());
    r.dice = d / n;
    r.iou = j / n;
    r.hd95_mm = h / n;
  }
  return r;
}

struct Stat {
  double mean = 0, std = 0;
  std::size_t n = 0;
};

// Population standard deviation; empty input gives n = 0.
inline Stat summarize(const std::vector<double>& v) {
  Stat s;
  s.n = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(v.size()));
  return s;
}

inline std::string format_pm(const Stat& s) {
  if (s.n == 0) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f±%.3f", s.mean, s.std);
  return buf;
}

struct CohortEntry {
  const Mask* pred;
  const Mask* gt;
  std::string subject_id;
};

struct CohortReport {
  std::vector<SubjectReport> subjects;
  Stat sensitivity, fp_rate, dice, iou, hd95_mm;
};

// Per-subject reports, then mean and std over subjects. Subjects without
// lesions only contribute to the FP rate.
inline CohortReport evaluate_cohort(const std::vector<CohortEntry>& cohort) {
  if (cohort.empty()) throw ConfigError("evaluate_cohort: empty cohort");
  CohortReport rep;
  rep.subjects.resize(cohort.size());
  parallel_for(cohort.size(), [&](std::size_t i) {
    rep.subjects[i] = evaluate_subject(*cohort[i].pred, *cohort[i].gt, cohort[i].subject_id);
  });
  std::vector<double> sens, fpr, dc, ji, hd;
  for (const auto& s : rep.subjects) {
    fpr.push_back(s.fp_rate);
    if (s.sensitivity) sens.push_back(*s.sensitivity);
    if (s.dice) {
      dc.push_back(*s.dice);
      ji.push_back(*s.iou);
      hd.push_back(*s.hd95_mm);
    }
  }
  rep.sensitivity = summarize(sens);
  rep.fp_rate = summarize(fpr);
  rep.dice = summarize(dc);
  rep.iou = summarize(ji);
  rep.hd95_mm = summarize(hd);
  return rep;
}

inline nlohmann::json to_json(const Stat& s) {
  if (s.n == 0) return {{"mean", nullptr}, {"std", nullptr}, {"n", 0}, {"formatted", "n/a"}};
  return {{"mean", s.mean}, {"std", s.std}, {"n", s.n}, {"formatted", format_pm(s)}};
}

inline nlohmann::json to_json(const SubjectReport& s) {
  const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json lesions = nlohmann::json::array();
  for (const auto& l : s.per_aneurysm)
    lesions.push_back({{"gt_label", l.gt_label}, {"dice", l.dice}, {"iou", l.iou}, {"hd95_mm", l.hd95_mm}});
  return {{"subject_id", s.subject_id}, {"tp", s.tp},         {"fp", s.fp},           {"fn", s.fn},
          {"sensitivity", opt(s.sensitivity)}, {"fp_rate", s.fp_rate}, {"dice", opt(s.dice)},
          {"iou", opt(s.iou)},       {"hd95_mm", opt(s.hd95_mm)}, {"per_aneurysm", lesions}};
}

inline nlohmann::json to_json(const CohortReport& r) {
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& s : r.subjects) subjects.push_back(to_json(s));
  return {{"subjects", subjects},
          {"summary",
           {{"sensitivity", to_json(r.sensitivity)},
            {"fp_rate", to_json(r.fp_rate)},
            {"dice", to_json(r.dice)},
            {"iou", to_json(r.iou)},
            {"hd95_mm", to_json(r.hd95_mm)}}}};
}

// One row per subject, then mean and std rows, then a mean±std row.
inline std::string to_csv(const CohortReport& r) {
  std::string out = "subject_id,tp,fp,fn,sensitivity,fp_rate,dice,iou,hd95_mm\n";
  const auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  const auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  for (const auto& s : r.subjects)
    out += s.subject_id + "," + std::to_string(s.tp) + "," + std::to_string(s.fp) + "," + std::to_string(s.fn) + "," +
           opt(s.sensitivity) + "," + num(s.fp_rate) + "," + opt(s.dice) + "," + opt(s.iou) + "," + opt(s.hd95_mm) + "\n";
  const auto field = [&](const Stat& s, bool mean) { return s.n ? num(mean ? s.mean : s.std) : std::string(); };
  for (bool mean : {true, false})
    out += std::string(mean ? "mean" : "std") + ",,,," + field(r.sensitivity, mean) + "," + field(r.fp_rate, mean) + "," +
           field(r.dice, mean) + "," + field(r.iou, mean) + "," + field(r.hd95_mm, mean) + "\n";
  out += "mean±std,,,," + format_pm(r.sensitivity) + "," + format_pm(r.fp_rate) + "," + format_pm(r.dice) + "," +
         format_pm(r.iou) + "," + format_pm(r.hd95_mm) + "\n";
  return out;
}

}  // namespace vesselforge::eval
