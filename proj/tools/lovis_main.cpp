// lovis: data generation, pre-training, fine-tuning, evaluation, metrics and
// ablation sweeps. Progress goes to stderr; machine output goes to files.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "lovis/checkpoint.hpp"
#include "lovis/config.hpp"
#include "lovis/errors.hpp"
#include "lovis/pipeline.hpp"

namespace fs = std::filesystem;
using namespace lovis;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

void progress(const std::string& line) { fmt::print(stderr, "{}\n", line); }

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Config load_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  Config cfg = path.empty() ? parse_config_text("") : parse_config(path);
  if (seed) cfg.apply_seed(*seed);
  return cfg;
}

Dataset load_dataset(const std::string& dir, const Config& cfg) {
  Dataset ds = read_dataset(dir);
  check_dataset_matches(cfg, ds);
  return ds;
}

std::uint64_t parse_seed_list_item(const std::string& s) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("--seeds: '" + s + "' is not a non-negative integer");
  }
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string data, out, ckpt, split = "val_unseen", pred, ref, houses, style = "r2r", axis, seeds = "7";
  std::optional<std::size_t> steps, n_houses, episodes;
};

int cmd_gen_data(const Options& o) {
  Config cfg = load_config(o.config, o.seed);
  if (o.n_houses) cfg.data.houses = *o.n_houses;
  if (o.episodes) cfg.data.episodes = *o.episodes;
  WorldConfig world = cfg.data.world;
  world.vision_dim = cfg.model.d_v;
  progress(fmt::format("generating {} houses x {} episodes ({}), seed {}", cfg.data.houses, cfg.data.episodes,
                       to_string(cfg.data.style), cfg.seed));
  const Dataset ds = make_dataset(cfg.data.houses, cfg.data.episodes, cfg.seed, cfg.data.style, world);
  write_dataset(ds, o.out);
  progress(fmt::format("wrote {}: train {}, val_seen {}, val_unseen {}", o.out, ds.train.size(), ds.val_seen.size(),
                       ds.val_unseen.size()));
  return kOk;
}

int cmd_pretrain(const Options& o) {
  Config cfg = load_config(o.config, o.seed);
  if (o.steps) cfg.pretrain.steps = *o.steps;
  const Dataset ds = load_dataset(o.data, cfg);
  const fs::path out(o.out);
  const fs::path csv = fs::path(o.out).replace_extension(".csv");
  RunManifest manifest{"pretrain", cfg, o.data, dataset_hash(o.data), {}, {{"checkpoint", out.string()},
                       {"loss_csv", csv.string()}}, utc_now()};
  write_manifest(manifest, fs::path(o.out).replace_extension(".manifest.json"));

  LovisModel model(cfg.model, cfg.seed);
  const auto log = run_pretraining(model, ds, cfg.pretrain, [](const PretrainLogRow& r) {
    if (r.step % 50 == 0) progress(fmt::format("pretrain step {:>6} {:<4} loss {:.4f}", r.step, r.task, r.loss));
  });
  write_text(csv, pretrain_csv(log));
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(model.params, out);
  progress("saved " + out.string());
  return kOk;
}

int cmd_finetune(const Options& o) {
  Config cfg = load_config(o.config, o.seed);
  const Dataset ds = load_dataset(o.data, cfg);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  RunManifest manifest{"finetune", cfg, o.data, dataset_hash(o.data), {}, {}, utc_now()};
  if (!o.ckpt.empty()) manifest.inputs["init_checkpoint"] = o.ckpt;
  manifest.outputs = {{"checkpoint", (dir / "best.ckpt").string()}, {"history", (dir / "history.csv").string()}};
  write_manifest(manifest, dir / "manifest.json");

  LovisModel model(cfg.model, cfg.seed);
  if (!o.ckpt.empty()) load_checkpoint(model.params, o.ckpt);
  const FinetuneResult result = train_finetune(model, ds, cfg.train, progress);
  write_text(dir / "history.csv", history_csv(result.history));
  save_checkpoint(model.params, dir / "best.ckpt");
  progress(fmt::format("best val_unseen SPL {:.4f} at iteration {}", result.best_spl, result.best_iteration));
  return kOk;
}

int cmd_eval(const Options& o) {
  Config cfg = load_config(o.config, o.seed);
  const Dataset ds = load_dataset(o.data, cfg);
  LovisModel model(cfg.model, cfg.seed);
  load_checkpoint(model.params, o.ckpt);
  const EvalResult ev = evaluate_split(model, ds, o.split, cfg.train.modules, cfg.train.max_steps);
  const std::string csv = "split," + metric_csv_header() + "\n" + o.split + "," + metric_csv_values(ev.table) + "\n";
  fmt::print("{}", format_table(ev.table, ds.style));
  if (!o.out.empty()) write_text(o.out, csv);
  if (!o.pred.empty()) write_text(o.pred, trajectories_jsonl(ds.split(o.split), ev.trajectories));
  return kOk;
}

int cmd_metrics(const Options& o) {
  const auto pred = read_trajectories_jsonl(o.pred);
  const auto ref = read_trajectories_jsonl(o.ref);
  if (pred.size() != ref.size()) {
    throw DataError(fmt::format("{} predictions but {} references", pred.size(), ref.size()));
  }
  std::map<std::size_t, House> houses;
  std::vector<EpisodeMetrics> rows;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].house_id != ref[i].house_id) {
      throw DataError(fmt::format("line {}: prediction house {} differs from reference house {}", i + 1,
                                  pred[i].house_id, ref[i].house_id));
    }
    auto it = houses.find(ref[i].house_id);
    if (it == houses.end()) {
      const fs::path file = fs::path(o.houses) / ("house_" + std::to_string(ref[i].house_id) + ".json");
      std::ifstream in(file);
      if (!in) throw DataError("cannot read " + file.string());
      std::ostringstream os;
      os << in.rdbuf();
      it = houses.emplace(ref[i].house_id, house_from_json(os.str())).first;
    }
    rows.push_back(score_episode(it->second, pred[i].trajectory, ref[i].trajectory));
  }
  const MetricTable table = aggregate(rows);
  fmt::print("{}", format_table(table, parse_style(o.style)));
  if (!o.out.empty()) write_text(o.out, metric_csv_header() + "\n" + metric_csv_values(table) + "\n");
  return kOk;
}

int cmd_ablate(const Options& o) {
  Config cfg = load_config(o.config, o.seed);
  const Dataset ds = load_dataset(o.data, cfg);
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(o.seeds);
  std::string item;
  while (std::getline(ss, item, ',')) seeds.push_back(parse_seed_list_item(item));
  if (seeds.empty()) throw ConfigError("--seeds: at least one seed is required");
  const fs::path dir(o.out);
  fs::create_directories(dir);
  RunManifest manifest{"ablate " + o.axis, cfg, o.data, dataset_hash(o.data), {}, {}, utc_now()};
  if (!o.ckpt.empty()) manifest.inputs["init_checkpoint"] = o.ckpt;
  manifest.outputs = {{"results", (dir / ("ablation_" + o.axis + ".csv")).string()}};
  write_manifest(manifest, dir / ("manifest_" + o.axis + ".json"));
  std::optional<fs::path> init;
  if (!o.ckpt.empty()) init = o.ckpt;
  const auto runs = run_ablation(o.axis, ds, cfg, seeds, init, progress);
  write_text(dir / ("ablation_" + o.axis + ".csv"), ablation_csv(runs));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modular vision-and-language navigation agent on synthetic houses"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "key = value configuration file");
    c->add_option("--seed", o.seed, "overrides the config seed");
  };

  auto* gen = app.add_subcommand("gen-data", "generate houses and episode splits");
  add_common(gen);
  gen->add_option("--out", o.out, "output directory")->required();
  gen->add_option("--houses", o.n_houses, "number of houses");
  gen->add_option("--episodes", o.episodes, "episodes per house");

  auto* pre = app.add_subcommand("pretrain", "run the pre-training tasks");
  add_common(pre);
  pre->add_option("--data", o.data, "dataset directory")->required();
  pre->add_option("--steps", o.steps, "optimizer steps");
  pre->add_option("--out", o.out, "checkpoint path")->required();

  auto* fine = app.add_subcommand("finetune", "mixed imitation/reinforcement fine-tuning");
  add_common(fine);
  fine->add_option("--data", o.data, "dataset directory")->required();
  fine->add_option("--ckpt", o.ckpt, "initial checkpoint (random init when omitted)");
  fine->add_option("--out", o.out, "output directory")->required();

  auto* ev = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  add_common(ev);
  ev->add_option("--data", o.data, "dataset directory")->required();
  ev->add_option("--ckpt", o.ckpt, "checkpoint")->required();
  ev->add_option("--split", o.split, "train, val_seen or val_unseen")
      ->check(CLI::IsMember({"train", "val_seen", "val_unseen"}));
  ev->add_option("--out", o.out, "metric CSV path");
  ev->add_option("--pred", o.pred, "trajectory JSON-lines output");

  auto* met = app.add_subcommand("metrics", "score predicted trajectories against references");
  met->add_option("--pred", o.pred, "predicted trajectories (JSON lines)")->required();
  met->add_option("--ref", o.ref, "reference trajectories or episodes (JSON lines)")->required();
  met->add_option("--houses", o.houses, "directory of house_<id>.json files")->required();
  met->add_option("--style", o.style, "r2r or r4r")->check(CLI::IsMember({"r2r", "r4r"}));
  met->add_option("--out", o.out, "metric CSV path");

  auto* abl = app.add_subcommand("ablate", "module or pre-training-task ablation sweep");
  add_common(abl);
  abl->add_option("--axis", o.axis, "modules or tasks")->required()->check(CLI::IsMember({"modules", "tasks"}));
  abl->add_option("--data", o.data, "dataset directory")->required();
  abl->add_option("--ckpt", o.ckpt, "initial checkpoint for the modules axis");
  abl->add_option("--seeds", o.seeds, "comma-separated seeds");
  abl->add_option("--out", o.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*pre) return cmd_pretrain(o);
    if (*fine) return cmd_finetune(o);
    if (*ev) return cmd_eval(o);
    if (*met) return cmd_metrics(o);
    if (*abl) return cmd_ablate(o);
  } catch (const ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kConfig;
  } catch (const NumericError& e) {
    fmt::print(stderr, "numeric error: {}\n", e.what());
    return kNumeric;
  } catch (const DataError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kData;
  } catch (const FormatError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kData;
  } catch (const GraphError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kData;
  } catch (const DimensionError& e) {
    fmt::print(stderr, "data error: {}\n", e.what());
    return kData;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kFailure;
  }
  return kFailure;
}
