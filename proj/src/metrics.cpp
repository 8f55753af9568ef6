#include "lovis/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "lovis/errors.hpp"

namespace lovis {

namespace {

void require_path(const House& house, const Path& p, const char* what) {
  if (p.empty()) throw ContractError(std::string(what) + " path is empty");
  for (std::size_t v : p) {
    if (v >= house.size()) throw GraphError(std::string(what) + " path visits unknown viewpoint " + std::to_string(v));
  }
}

}  // namespace

double nav_error(const House& house, const Path& pred, const Path& ref) {
  require_path(house, pred, "predicted");
  require_path(house, ref, "reference");
  return house.distance(pred.back(), ref.back());
}

double success(const House& house, const Path& pred, const Path& ref, double threshold) {
  return nav_error(house, pred, ref) <= threshold ? 1.0 : 0.0;
}

double spl(const House& house, const Path& pred, const Path& ref, double threshold) {
  const double s = success(house, pred, ref, threshold);
  const double l = house.distance(pred.front(), ref.back());
  const double p = path_length(house, pred);
  // Edge sums and Dijkstra sums may disagree in the last bits.
  if (l <= 0.0 || p <= l + 1e-9) return s;
  return s * l / p;
}

double dtw(const House& house, const Path& pred, const Path& ref) {
  require_path(house, pred, "predicted");
  require_path(house, ref, "reference");
  const std::size_t n = pred.size(), m = ref.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = inf;
    for (std::size_t j = 1; j <= m; ++j) {
      const double cost = house.distance(pred[i - 1], ref[j - 1]);
      cur[j] = cost + std::min({prev[j], cur[j - 1], prev[j - 1]});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double ndtw(const House& house, const Path& pred, const Path& ref, double threshold) {
  return std::exp(-dtw(house, pred, ref) / (static_cast<double>(ref.size()) * threshold));
}

double sdtw(const House& house, const Path& pred, const Path& ref, double threshold) {
  return success(house, pred, ref, threshold) * ndtw(house, pred, ref, threshold);
}

double cls(const House& house, const Path& pred, const Path& ref, double threshold) {
  require_path(house, pred, "predicted");
  require_path(house, ref, "reference");
  double pc = 0.0;
  for (std::size_t r : ref) {
    double nearest = std::numeric_limits<double>::infinity();
    for (std::size_t p : pred) nearest = std::min(nearest, house.distance(r, p));
    pc += std::exp(-nearest / threshold);
  }
  pc /= static_cast<double>(ref.size());
  const double epl = pc * path_length(house, ref);
  const double denom = epl + std::abs(epl - path_length(house, pred));
  const double ls = denom > 0.0 ? epl / denom : 1.0;
  return pc * ls;
}

EpisodeMetrics score_episode(const House& house, const Path& pred, const Path& ref) {
  EpisodeMetrics m;
  m.ne = nav_error(house, pred, ref);
  m.sr = success(house, pred, ref);
  m.spl = spl(house, pred, ref);
  m.ndtw = ndtw(house, pred, ref);
  m.sdtw = m.sr * m.ndtw;
  m.cls = cls(house, pred, ref);
  m.path_length = path_length(house, pred);
  return m;
}

MetricTable aggregate(const std::vector<EpisodeMetrics>& rows) {
  if (rows.empty()) throw ContractError("aggregate: no episodes to aggregate");
  MetricTable t;
  t.episodes = rows.size();
  for (const auto& r : rows) {
    t.ne += r.ne;
    t.sr += r.sr;
    t.spl += r.spl;
    t.cls += r.cls;
    t.ndtw += r.ndtw;
    t.sdtw += r.sdtw;
    t.path_length += r.path_length;
  }
  const double n = static_cast<double>(rows.size());
  for (double* v : {&t.ne, &t.sr, &t.spl, &t.cls, &t.ndtw, &t.sdtw, &t.path_length}) *v /= n;
  return t;
}

std::string metric_csv_header() { return "NE,SR,SPL,CLS,nDTW,sDTW"; }

std::string metric_csv_values(const MetricTable& t) {
  return fmt::format("{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}", t.ne, t.sr, t.spl, t.cls, t.ndtw, t.sdtw);
}

std::string format_table(const MetricTable& t, DatasetStyle style) {
  std::string out = fmt::format("episodes {:>6}\nTL     {:>8.3f}\nNE     {:>8.3f}\nSR     {:>8.3f}\nSPL    {:>8.3f}\n",
                                t.episodes, t.path_length, t.ne, t.sr, t.spl);
  if (style == DatasetStyle::kR4R) {
    out += fmt::format("CLS    {:>8.3f}\nnDTW   {:>8.3f}\nsDTW   {:>8.3f}\n", t.cls, t.ndtw, t.sdtw);
  }
  return out;
}

}  // namespace lovis
