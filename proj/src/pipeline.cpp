#include "lovis/pipeline.hpp"

#include <fstream>

#include <fmt/format.h>
#include <json.hpp>

#include "lovis/checkpoint.hpp"
#include "lovis/errors.hpp"

namespace lovis {

std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "iteration,split," + metric_csv_header() + "\n";
  for (const auto& r : rows) out += fmt::format("{},{},{}\n", r.iteration, r.split, metric_csv_values(r.table));
  return out;
}

std::string trajectories_jsonl(const std::vector<Episode>& episodes, const std::vector<Path>& paths) {
  if (episodes.size() != paths.size()) throw ContractError("trajectories_jsonl: episode and path counts differ");
  std::string out;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    nlohmann::ordered_json j;
    j["index"] = i;
    j["house_id"] = episodes[i].house_id;
    j["trajectory"] = paths[i];
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<TrajectoryRecord> read_trajectories_jsonl(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot read " + file.string());
  std::vector<TrajectoryRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TrajectoryRecord r;
      r.house_id = j.at("house_id").get<std::size_t>();
      r.trajectory = j.contains("trajectory") ? j.at("trajectory").get<Path>() : j.at("path").get<Path>();
      if (r.trajectory.empty()) throw DataError("empty trajectory");
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(fmt::format("{}:{}: {}", file.string(), line_no, e.what()));
    }
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void check_dataset_matches(const Config& config, const Dataset& dataset) {
  if (dataset.world.vision_dim != config.model.d_v) {
    throw ConfigError(fmt::format("d_v = {} but the dataset has {}-dimensional vision features", config.model.d_v,
                                  dataset.world.vision_dim));
  }
}

std::vector<std::string> ablation_variants(const std::string& axis) {
  if (axis == "modules") return {"h", "h+o", "h+v", "h+o+v"};
  if (axis == "tasks") return {"mlm", "mlm+ssap", "mlm+ssap+vm", "mlm+ssap+om", "mlm+ssap+vm+om"};
  throw ConfigError("unknown ablation axis '" + axis + "' (expected modules or tasks)");
}

std::vector<AblationRun> run_ablation(const std::string& axis, const Dataset& dataset, const Config& config,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::optional<std::filesystem::path>& init, const ProgressFn& progress) {
  check_dataset_matches(config, dataset);
  const auto variants = ablation_variants(axis);
  std::vector<AblationRun> runs;
  for (const auto& variant : variants) {
    for (std::uint64_t seed : seeds) {
      Config cfg = config;
      cfg.apply_seed(seed);
      LovisModel model(cfg.model, seed);
      if (axis == "modules") {
        cfg.train.modules = ModuleFlags::parse(variant);
        if (init) load_checkpoint(model.params, *init);
      } else {
        cfg.pretrain.tasks = TaskFlags::parse(variant);
        run_pretraining(model, dataset, cfg.pretrain);
      }
      if (progress) progress(fmt::format("ablate {} {} seed {}", axis, variant, seed));
      train_finetune(model, dataset, cfg.train, progress);
      AblationRun run{axis, variant, seed, {}, {}};
      run.val_seen = evaluate_split(model, dataset, "val_seen", cfg.train.modules, cfg.train.max_steps).table;
      run.val_unseen = evaluate_split(model, dataset, "val_unseen", cfg.train.modules, cfg.train.max_steps).table;
      if (progress) {
        progress(fmt::format("ablate {} {} seed {}: val_seen SR {:.3f}, val_unseen SR {:.3f}", axis, variant, seed,
                             run.val_seen.sr, run.val_unseen.sr));
      }
      runs.push_back(run);
    }
  }
  return runs;
}

std::string ablation_csv(const std::vector<AblationRun>& runs) {
  std::string out = "axis,variant,seed,split," + metric_csv_header() + "\n";
  for (const auto& r : runs) {
    out += fmt::format("{},{},{},val_seen,{}\n", r.axis, r.variant, r.seed, metric_csv_values(r.val_seen));
    out += fmt::format("{},{},{},val_unseen,{}\n", r.axis, r.variant, r.seed, metric_csv_values(r.val_unseen));
  }
  return out;
}

}  // namespace lovis
