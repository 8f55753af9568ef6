#include "lovis/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

#include <fmt/format.h>

#include "lovis/errors.hpp"

namespace lovis {

void TrainerConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be a finite value ≥ 0");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be ≥ 0");
  if (iterations == 0) throw ConfigError("iterations must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (!(reward.gamma >= 0.0 && reward.gamma <= 1.0)) throw ConfigError("gamma must be in [0, 1]");
}

double compute_reward(const House& house, std::size_t prev, std::size_t cur, std::size_t goal, bool final_step,
                      const RewardConfig& cfg) {
  double r = cfg.distance_scale * (house.distance(prev, goal) - house.distance(cur, goal));
  if (final_step) r += house.distance(cur, goal) <= kSuccessDistance ? cfg.success_bonus : -cfg.success_bonus;
  return r;
}

void attach_rewards(const House& house, const Episode& episode, Rollout& rollout, const RewardConfig& cfg) {
  rollout.rewards.clear();
  const std::size_t n = rollout.actions.size();
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t prev = rollout.positions[t];
    const std::size_t cur = t + 1 < n ? rollout.positions[t + 1] : rollout.trajectory.back();
    rollout.rewards.push_back(compute_reward(house, prev, cur, episode.goal, t + 1 == n, cfg));
  }
}

std::vector<double> discounted_returns(const std::vector<double>& rewards, double gamma) {
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    out[i] = acc;
  }
  return out;
}

Tensor loss_il(const LovisModel& model, const House& house, const Episode& episode, const TextContext& ctx,
               const ModuleFlags& flags, std::size_t max_steps) {
  if (episode.path.size() > max_steps) {
    throw DataError("reference path of " + std::to_string(episode.path.size() - 1) + " hops does not fit in " +
                    std::to_string(max_steps) + " steps");
  }
  Rollout r = rollout(model, house, episode, ctx, NavMode::kTeacher, nullptr, flags, max_steps);
  Tensor total = r.log_probs.front();
  for (std::size_t i = 1; i < r.log_probs.size(); ++i) total = add(total, r.log_probs[i]);
  return scale(total, -1.0);
}

RlLoss loss_rl(const LovisModel& model, const Rollout& rollout, double gamma) {
  if (rollout.rewards.size() != rollout.log_probs.size()) {
    throw ContractError("loss_rl: rollout has " + std::to_string(rollout.log_probs.size()) + " steps but " +
                        std::to_string(rollout.rewards.size()) + " rewards");
  }
  if (rollout.log_probs.empty()) throw ContractError("loss_rl: empty rollout");
  const std::vector<double> returns = discounted_returns(rollout.rewards, gamma);
  RlLoss out;
  std::vector<Tensor> policy_terms, baseline_terms;
  for (std::size_t t = 0; t < returns.size(); ++t) {
    Tensor b = model.baseline(rollout.states[t].detach());
    const double advantage = returns[t] - b.item();
    policy_terms.push_back(scale(rollout.log_probs[t], -advantage));
    Tensor diff = add_scalar(b, -returns[t]);
    baseline_terms.push_back(scale(mul(diff, diff), 0.5));
  }
  out.policy = sum(concat_rows(policy_terms));
  out.baseline = sum(concat_rows(baseline_terms));
  out.total = add(out.policy, out.baseline);
  return out;
}

MixedLoss mixed_loss(const LovisModel& model, const House& house, const Episode& episode, const TrainerConfig& cfg,
                     std::mt19937_64& rng, std::size_t max_steps) {
  static const Vocabulary vocab = Vocabulary::standard();
  const TextContext ctx = prepare_text(model, tokenize(episode.instruction, vocab));
  MixedLoss out;
  out.sampled = rollout(model, house, episode, ctx, NavMode::kSample, &rng, cfg.modules, max_steps);
  attach_rewards(house, episode, out.sampled, cfg.reward);
  out.rl = loss_rl(model, out.sampled, cfg.reward.gamma);
  if (cfg.lambda > 0.0) {
    out.il = loss_il(model, house, episode, ctx, cfg.modules, max_steps);
    out.total = add(out.rl.total, scale(out.il, cfg.lambda));
  } else {
    out.il = Tensor::scalar(0.0);
    out.total = out.rl.total;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

std::size_t worker_threads() {
  if (const char* env = std::getenv("LOVIS_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && n > 0) return static_cast<std::size_t>(n);
    throw ConfigError(std::string("LOVIS_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

EvalResult evaluate_policy(const Dataset& dataset, const std::vector<Episode>& episodes, const Policy& policy,
                           std::size_t threads) {
  if (threads == 0) threads = worker_threads();
  threads = std::max<std::size_t>(1, std::min(threads, episodes.size()));
  EvalResult result;
  result.trajectories.resize(episodes.size());
  std::vector<EpisodeMetrics> rows(episodes.size());
  auto work = [&](std::size_t begin) {
    for (std::size_t i = begin; i < episodes.size(); i += threads) {
      const House& house = dataset.house(episodes[i].house_id);
      result.trajectories[i] = policy(house, episodes[i]);
      rows[i] = score_episode(house, result.trajectories[i], episodes[i].path);
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(t);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  result.table = aggregate(rows);
  return result;
}

EvalResult evaluate_split(const LovisModel& model, const Dataset& dataset, const std::string& split,
                          const ModuleFlags& flags, std::size_t max_steps, std::size_t threads) {
  if (max_steps == 0) max_steps = default_max_steps(dataset.style);
  return evaluate_policy(
      dataset, dataset.split(split),
      [&](const House& house, const Episode& ep) { return greedy_trajectory(model, house, ep, flags, max_steps); },
      threads);
}

Path teacher_policy(const House&, const Episode& episode) { return episode.path; }

Path stop_policy(const House&, const Episode& episode) { return {episode.path.front()}; }

Path random_walk(const House& house, const Episode& episode, std::mt19937_64& rng, std::size_t max_steps) {
  Path path{episode.path.front()};
  for (std::size_t t = 0; t < max_steps; ++t) {
    const auto& nbs = house.neighbors(path.back());
    const std::size_t choice = std::uniform_int_distribution<std::size_t>(0, nbs.size())(rng);
    if (choice == 0) break;
    path.push_back(nbs[choice - 1].id);
  }
  return path;
}

double random_walk_success_probability(const House& house, const Episode& episode, std::size_t max_steps) {
  const std::size_t n = house.size();
  std::vector<double> alive(n, 0.0), ended(n, 0.0), next(n);
  alive[episode.path.front()] = 1.0;
  for (std::size_t t = 0; t < max_steps; ++t) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t v = 0; v < n; ++v) {
      if (alive[v] == 0.0) continue;
      const auto& nbs = house.neighbors(v);
      const double share = alive[v] / static_cast<double>(nbs.size() + 1);
      ended[v] += share;
      for (const auto& nb : nbs) next[nb.id] += share;
    }
    std::swap(alive, next);
  }
  double p = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    if (house.distance(v, episode.goal) <= kSuccessDistance) p += ended[v] + alive[v];
  }
  return p;
}

double random_walk_success_rate(const Dataset& dataset, const std::vector<Episode>& episodes, std::size_t max_steps) {
  if (episodes.empty()) throw ContractError("random_walk_success_rate: no episodes");
  double total = 0.0;
  for (const auto& ep : episodes) total += random_walk_success_probability(dataset.house(ep.house_id), ep, max_steps);
  return total / static_cast<double>(episodes.size());
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::vector<std::vector<double>> snapshot(const ParameterSet& params) {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : params.entries()) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

void restore(ParameterSet& params, const std::vector<std::vector<double>>& values) {
  std::size_t i = 0;
  for (const auto& entry : params.entries()) {
    Tensor t = entry.second;
    std::copy(values[i].begin(), values[i].end(), t.data_mut().begin());
    ++i;
  }
}

}  // namespace

FinetuneResult train_finetune(LovisModel& model, const Dataset& dataset, const TrainerConfig& cfg,
                              const ProgressFn& progress) {
  // Zero iterations is a no-op run: the model keeps its initial parameters.
  if (cfg.iterations == 0) return {};
  cfg.validate();
  if (dataset.train.empty()) throw DataError("train_finetune: the train split is empty");
  const std::size_t max_steps = cfg.max_steps ? cfg.max_steps : default_max_steps(dataset.style);

  std::vector<Tensor> params = model.policy_parameters();
  for (const Tensor& t : model.baseline_parameters()) params.push_back(t);
  for (Tensor& t : params) t.zero_grad();
  AdamW opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.train.size() - 1);
  FinetuneResult result;
  std::vector<std::vector<double>> best;
  double running_sr = 0.0;

  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    std::vector<Tensor> losses;
    double batch_sr = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const Episode& ep = dataset.train[pick(rng)];
      const House& house = dataset.house(ep.house_id);
      MixedLoss ml = mixed_loss(model, house, ep, cfg, rng, max_steps);
      losses.push_back(ml.total);
      batch_sr += success(house, ml.sampled.trajectory, ep.path);
    }
    Tensor loss = scale(sum(concat_rows(losses)), 1.0 / static_cast<double>(cfg.batch_size));
    if (!std::isfinite(loss.item())) {
      Graph::current().clear();
      throw NumericError(fmt::format("non-finite fine-tuning loss at iteration {}", it));
    }
    backward(loss);
    clip_grad_norm(params, cfg.grad_clip);
    opt.step();
    running_sr = 0.98 * running_sr + 0.02 * batch_sr / static_cast<double>(cfg.batch_size);

    if (it % cfg.eval_every == 0 || it == cfg.iterations) {
      for (const char* split : {"val_seen", "val_unseen"}) {
        if (dataset.split(split).empty()) continue;
        const EvalResult ev = evaluate_split(model, dataset, split, cfg.modules, max_steps);
        result.history.push_back({it, split, ev.table});
        if (progress) {
          progress(fmt::format("iter {:>5} {:<10} SR {:.3f} SPL {:.3f} NE {:.3f} (train sample SR {:.3f})", it, split,
                               ev.table.sr, ev.table.spl, ev.table.ne, running_sr));
        }
        if (std::string(split) == "val_unseen" && ev.table.spl > result.best_spl) {
          result.best_spl = ev.table.spl;
          result.best_iteration = it;
          best = snapshot(model.params);
        }
      }
    }
  }
  if (!best.empty()) restore(model.params, best);
  return result;
}

}  // namespace lovis
