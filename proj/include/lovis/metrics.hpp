#pragma once

// Navigation and path-fidelity metrics over geodesic distances.

#include <string>
#include <vector>

#include "lovis/world.hpp"

namespace lovis {

using Path = std::vector<std::size_t>;

double nav_error(const House& house, const Path& pred, const Path& ref);
// Success is inclusive: NE ≤ threshold.
double success(const House& house, const Path& pred, const Path& ref, double threshold = kSuccessDistance);
// S · l / max(p, l) with l the geodesic start→goal distance; S when l == 0.
double spl(const House& house, const Path& pred, const Path& ref, double threshold = kSuccessDistance);
double dtw(const House& house, const Path& pred, const Path& ref);
// exp(−dtw / (|R| · threshold))
double ndtw(const House& house, const Path& pred, const Path& ref, double threshold = kSuccessDistance);
double sdtw(const House& house, const Path& pred, const Path& ref, double threshold = kSuccessDistance);
// Path coverage times length score.
double cls(const House& house, const Path& pred, const Path& ref, double threshold = kSuccessDistance);

struct EpisodeMetrics {
  double ne = 0, sr = 0, spl = 0, cls = 0, ndtw = 0, sdtw = 0;
  double path_length = 0;
};

EpisodeMetrics score_episode(const House& house, const Path& pred, const Path& ref);

struct MetricTable {
  std::size_t episodes = 0;
  double ne = 0, sr = 0, spl = 0, cls = 0, ndtw = 0, sdtw = 0;
  double path_length = 0;
};

// Per-metric means; throws ContractError on an empty list.
MetricTable aggregate(const std::vector<EpisodeMetrics>& rows);

std::string metric_csv_header();  // NE,SR,SPL,CLS,nDTW,sDTW
std::string metric_csv_values(const MetricTable& table);
std::string format_table(const MetricTable& table, DatasetStyle style);

}  // namespace lovis
