#pragma once

// Fine-tuning with mixed imitation and policy-gradient losses, plus
// evaluation loops and reference policies.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lovis/agent.hpp"
#include "lovis/metrics.hpp"
#include "lovis/world.hpp"

namespace lovis {

struct RewardConfig {
  double success_bonus = 2.0;
  double distance_scale = 1.0;
  double gamma = 0.9;
};

struct TrainerConfig {
  double lambda = 0.2;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double grad_clip = 5.0;
  std::size_t iterations = 2000;
  std::size_t batch_size = 4;
  std::size_t max_steps = 0;  // 0 picks the dataset style default
  std::size_t eval_every = 200;
  std::uint64_t seed = 7;
  ModuleFlags modules;
  RewardConfig reward;

  void validate() const;
};

// r_t = scale · (d(prev, goal) − d(cur, goal)); a final step adds ±bonus by
// whether NE ≤ 3 m.
double compute_reward(const House& house, std::size_t prev, std::size_t cur, std::size_t goal, bool final_step,
                      const RewardConfig& cfg = {});

// Fills rollout.rewards, one per action.
void attach_rewards(const House& house, const Episode& episode, Rollout& rollout, const RewardConfig& cfg = {});

std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma);

// Σ_t −log p_t[a*_t] along the teacher-forced path, STOP included.
Tensor loss_il(const LovisModel& model, const House& house, const Episode& episode, const TextContext& ctx,
               const ModuleFlags& flags = {}, std::size_t max_steps = 15);

struct RlLoss {
  Tensor policy;    // −Σ_t (R_t − b_t) log p_t[a^s_t]
  Tensor baseline;  // Σ_t ½ (b_t − R_t)², b_t from the detached state
  Tensor total;
};

RlLoss loss_rl(const LovisModel& model, const Rollout& rollout, double gamma);

struct MixedLoss {
  Tensor total;  // rl + λ · il
  RlLoss rl;
  Tensor il;
  Rollout sampled;
};

// Shares one text encoding between the sampled and the teacher-forced passes.
MixedLoss mixed_loss(const LovisModel& model, const House& house, const Episode& episode, const TrainerConfig& cfg,
                     std::mt19937_64& rng, std::size_t max_steps);

struct HistoryRow {
  std::size_t iteration = 0;
  std::string split;
  MetricTable table;
};

struct FinetuneResult {
  std::vector<HistoryRow> history;
  std::size_t best_iteration = 0;
  double best_spl = -1.0;
};

using ProgressFn = std::function<void(const std::string&)>;

// AdamW over mixed_loss with periodic evaluation on val_seen and val_unseen.
// On return the model holds the best-by-val_unseen-SPL parameters.
FinetuneResult train_finetune(LovisModel& model, const Dataset& dataset, const TrainerConfig& cfg,
                              const ProgressFn& progress = {});

using Policy = std::function<Path(const House&, const Episode&)>;

struct EvalResult {
  MetricTable table;
  std::vector<Path> trajectories;
};

// Runs `policy` on every episode of a split. Fans out over `threads` workers
// (0 reads LOVIS_THREADS, defaulting to 1); results keep episode order.
EvalResult evaluate_policy(const Dataset& dataset, const std::vector<Episode>& episodes, const Policy& policy,
                           std::size_t threads = 0);

EvalResult evaluate_split(const LovisModel& model, const Dataset& dataset, const std::string& split,
                          const ModuleFlags& flags = {}, std::size_t max_steps = 0, std::size_t threads = 0);

std::size_t worker_threads();

// Reference policies.
Path teacher_policy(const House& house, const Episode& episode);
Path stop_policy(const House& house, const Episode& episode);
// Uniform over STOP and every neighbour at each step.
Path random_walk(const House& house, const Episode& episode, std::mt19937_64& rng, std::size_t max_steps);
// Exact success probability of random_walk, by dynamic programming over the
// position distribution.
double random_walk_success_probability(const House& house, const Episode& episode, std::size_t max_steps);
// Mean of the exact success probability over a split.
double random_walk_success_rate(const Dataset& dataset, const std::vector<Episode>& episodes, std::size_t max_steps);

}  // namespace lovis
