#pragma once

// Stage drivers and machine-readable outputs shared by the CLI and tests.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lovis/config.hpp"
#include "lovis/metrics.hpp"
#include "lovis/trainer.hpp"

namespace lovis {

// iteration,split,NE,SR,SPL,CLS,nDTW,sDTW
std::string history_csv(const std::vector<HistoryRow>& rows);

// One JSON object per line: {"index", "house_id", "trajectory"}.
std::string trajectories_jsonl(const std::vector<Episode>& episodes, const std::vector<Path>& paths);

struct TrajectoryRecord {
  std::size_t house_id = 0;
  Path trajectory;
};
// Accepts trajectory lines as written above and episode lines (their "path").
std::vector<TrajectoryRecord> read_trajectories_jsonl(const std::filesystem::path& file);

void write_text(const std::filesystem::path& path, const std::string& text);

// Throws ConfigError when the dataset's vision width differs from d_v.
void check_dataset_matches(const Config& config, const Dataset& dataset);

struct AblationRun {
  std::string axis;
  std::string variant;
  std::uint64_t seed = 0;
  MetricTable val_seen;
  MetricTable val_unseen;
};

// Module axis: fine-tunes h, h+o, h+v, h+o+v from `init` (random init when
// empty). Task axis: pre-trains with each task combination from scratch and
// fine-tunes the full model. One run per (variant, seed).
std::vector<AblationRun> run_ablation(const std::string& axis, const Dataset& dataset, const Config& config,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::optional<std::filesystem::path>& init,
                                      const ProgressFn& progress = {});

std::vector<std::string> ablation_variants(const std::string& axis);

// axis,variant,seed,split,NE,SR,SPL,CLS,nDTW,sDTW
std::string ablation_csv(const std::vector<AblationRun>& runs);

}  // namespace lovis
