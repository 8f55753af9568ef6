#include <gtest/gtest.h>

#include <cmath>

#include "lovis/checkpoint.hpp"
#include "lovis/errors.hpp"
#include "lovis/trainer.hpp"
#include "test_util.hpp"

using namespace lovis;
using lovis::test::tiny_config;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::standard();
  return v;
}

const Dataset& data() {
  static const Dataset d = lovis::test::small_dataset();
  return d;
}

TextContext context(const LovisModel& m, const Episode& ep) { return prepare_text(m, tokenize(ep.instruction, vocab())); }

std::vector<double> grads(const std::vector<Tensor>& params) {
  std::vector<double> out;
  for (const auto& t : params) {
    if (t.has_grad()) out.insert(out.end(), t.grad().begin(), t.grad().end());
    else out.insert(out.end(), t.numel(), 0.0);
  }
  return out;
}

// Episode with `path` as its ground truth, so teacher mode replays it.
Episode replay_of(const Episode& ep, const Path& path) {
  Episode e = ep;
  e.path = path;
  e.goal = path.back();
  return e;
}

}  // namespace

TEST(TrainerConfig, Validation) {
  TrainerConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lambda = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.iterations = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Reward, Definitions) {
  const House& h = data().house(data().train[0].house_id);
  const Episode& ep = data().train[0];
  const std::size_t goal = ep.goal, before = ep.path[ep.path.size() - 2];
  const double onto = compute_reward(h, before, goal, goal, false);
  EXPECT_DOUBLE_EQ(onto, h.distance(before, goal));
  EXPECT_DOUBLE_EQ(compute_reward(h, goal, goal, goal, true), 2.0);
  // A 2 m step away from the goal along a line.
  House line;
  line.viewpoints = {{0, 0, 0, {0}}, {1, 2, 0, {1}}, {2, 4, 0, {2}}};
  line.edges = {{0, 1, 0}, {1, 2, 0}};
  line.finalize();
  EXPECT_DOUBLE_EQ(compute_reward(line, 1, 2, 0, false), -2.0);
  EXPECT_DOUBLE_EQ(compute_reward(line, 1, 2, 0, true), -2.0 - 2.0);
}

TEST(Reward, Telescoping) {
  std::mt19937_64 rng(5);
  for (const Episode& ep : data().train) {
    const House& h = data().house(ep.house_id);
    const Path p = random_walk(h, ep, rng, 10);
    double total = 0.0;
    for (std::size_t i = 1; i < p.size(); ++i) total += compute_reward(h, p[i - 1], p[i], ep.goal, false);
    EXPECT_NEAR(total, h.distance(p.front(), ep.goal) - h.distance(p.back(), ep.goal), 1e-9);
  }
}

TEST(Reward, AttachedPerActionWithTerminalBonus) {
  LovisModel m({}, 1);
  const Episode& ep = data().train[1];
  const House& h = data().house(ep.house_id);
  NoGradGuard g;
  Rollout r = rollout(m, h, ep, context(m, ep), NavMode::kTeacher);
  attach_rewards(h, ep, r);
  ASSERT_EQ(r.rewards.size(), r.actions.size());
  double total = 0.0;
  for (double x : r.rewards) total += x;
  EXPECT_NEAR(total, h.distance(ep.path.front(), ep.goal) + 2.0, 1e-9);
}

TEST(Returns, Discounted) {
  const auto R = discounted_returns({1.0, 0.0, 2.0}, 0.9);
  ASSERT_EQ(R.size(), 3u);
  EXPECT_DOUBLE_EQ(R[2], 2.0);
  EXPECT_DOUBLE_EQ(R[1], 0.9 * 2.0);
  EXPECT_DOUBLE_EQ(R[0], 1.0 + 0.9 * 0.9 * 2.0);
}

TEST(LossIl, UniformPolicyGivesLogCandidateCounts) {
  LovisModel m({}, 2);
  for (double& w : m.fuse_w.data_mut()) w = 0.0;
  const Episode& ep = data().train[2];
  const House& h = data().house(ep.house_id);
  const Tensor loss = loss_il(m, h, ep, context(m, ep));
  double expected = 0.0;
  double heading = ep.initial_heading;
  for (std::size_t t = 0; t < ep.path.size(); ++t) {
    expected += std::log(static_cast<double>(build_candidates(h, ep.path[t], heading).size()));
    if (t + 1 < ep.path.size()) heading = h.edge(ep.path[t], ep.path[t + 1])->heading;
  }
  EXPECT_NEAR(loss.item(), expected, 1e-12);
  Graph::current().clear();
}

TEST(LossIl, NearPointMassGivesNearZero) {
  // Scaling the fused logits drives the teacher probability to one once the
  // teacher action has the largest score at every step.
  LovisModel m({}, 3);
  const Episode& ep = data().train[3];
  const House& h = data().house(ep.house_id);
  NoGradGuard g;
  const TextContext ctx = context(m, ep);
  const Rollout r = rollout(m, h, ep, ctx, NavMode::kGreedy);
  const Episode greedy = replay_of(ep, r.trajectory);
  if (!r.stopped) GTEST_SKIP() << "greedy rollout hit the step limit";
  for (double& w : m.fuse_w.data_mut()) w *= 1e9;
  const double loss = loss_il(m, h, greedy, ctx).item();
  EXPECT_LT(loss, 1e-9);
}

TEST(LossIl, TwoStepFiniteDifference) {
  LovisModel m(tiny_config(), 4);
  Episode ep = data().train[4];
  ep = replay_of(ep, {ep.path[0], ep.path[1]});
  const House& h = data().house(ep.house_id);
  std::vector<Tensor> params = m.policy_parameters();
  const double err = finite_diff_check([&] { return loss_il(m, h, ep, context(m, ep)); }, params, {1e-5, 3, 5});
  EXPECT_LT(err, 1e-4);
}

TEST(LossIl, OffPathTeacherIsDataError) {
  LovisModel m({}, 5);
  Episode ep = data().train[5];
  ep.path = {ep.path[0], ep.path[2]};  // not adjacent
  const House& h = data().house(ep.house_id);
  if (h.edge(ep.path[0], ep.path[1])) GTEST_SKIP();
  EXPECT_THROW(loss_il(m, h, ep, context(m, ep)), DataError);
  Graph::current().clear();
}

TEST(LossRl, ZeroAndUnitAdvantage) {
  LovisModel m({}, 6);
  for (double& w : m.baseline.w.data_mut()) w = 0.0;
  m.baseline.b.data_mut()[0] = 0.7;
  const Episode& start = data().train[6];
  const Episode stop_here = replay_of(start, {start.path.front()});
  const House& h = data().house(start.house_id);
  Rollout r = rollout(m, h, stop_here, context(m, stop_here), NavMode::kTeacher);
  ASSERT_EQ(r.actions.size(), 1u);
  r.rewards = {0.7};
  EXPECT_EQ(loss_rl(m, r, 0.9).policy.item(), 0.0);
  r.rewards = {1.7};
  const RlLoss unit = loss_rl(m, r, 0.9);
  EXPECT_NEAR(unit.policy.item(), -r.log_probs[0].item(), 1e-12);
  EXPECT_NEAR(unit.baseline.item(), 0.5, 1e-12);
  Graph::current().clear();
}

TEST(LossRl, BaselineGradientStaysInBaselineHead) {
  LovisModel m({}, 7);
  const Episode& ep = data().train[7];
  std::mt19937_64 rng(1);
  TrainerConfig cfg;
  MixedLoss ml = mixed_loss(m, data().house(ep.house_id), ep, cfg, rng, 15);
  backward(ml.rl.baseline);
  for (double g : grads(m.policy_parameters())) EXPECT_EQ(g, 0.0);
  double norm = 0.0;
  for (double g : grads(m.baseline_parameters())) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(LossRl, StepCountMismatchIsContractError) {
  LovisModel m({}, 8);
  Rollout r;
  EXPECT_THROW(loss_rl(m, r, 0.9), ContractError);
  r.rewards = {1.0};
  EXPECT_THROW(loss_rl(m, r, 0.9), ContractError);
}

TEST(MixedLoss, AdditivityAndLambdaZero) {
  LovisModel m({}, 9);
  for (double lambda : {0.0, 0.2, 3.5}) {
    const Episode& ep = data().train[8];
    TrainerConfig cfg;
    cfg.lambda = lambda;
    std::mt19937_64 rng(4);
    NoGradGuard g;
    const MixedLoss ml = mixed_loss(m, data().house(ep.house_id), ep, cfg, rng, 15);
    EXPECT_NEAR(ml.total.item(), ml.rl.total.item() + lambda * ml.il.item(), 1e-12);
    if (lambda == 0.0) EXPECT_EQ(ml.total.item(), ml.rl.total.item());
  }
}

TEST(MixedLoss, LargeLambdaFollowsImitationGradient) {
  LovisModel m({}, 10);
  const Episode& ep = data().train[9];
  const House& h = data().house(ep.house_id);
  const auto params = m.policy_parameters();
  TrainerConfig cfg;
  cfg.lambda = 1e6;
  std::mt19937_64 rng(2);
  backward(mixed_loss(m, h, ep, cfg, rng, 15).total);
  const auto mixed = grads(params);
  m.params.zero_grad();
  backward(loss_il(m, h, ep, context(m, ep)));
  const auto il = grads(params);
  double dot = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < il.size(); ++i) {
    dot += mixed[i] * il[i];
    a += mixed[i] * mixed[i];
    b += il[i] * il[i];
  }
  EXPECT_GT(dot / std::sqrt(a * b), 0.99);
}

TEST(Finetune, ZeroIterationsKeepsInit) {
  LovisModel m(tiny_config(), 11);
  const auto before = parameter_hash(m.params);
  TrainerConfig cfg;
  cfg.iterations = 0;
  const auto r = train_finetune(m, data(), cfg);
  EXPECT_EQ(parameter_hash(m.params), before);
  EXPECT_TRUE(r.history.empty());
}

TEST(Finetune, SeededRunsAreIdentical) {
  TrainerConfig cfg;
  cfg.iterations = 4;
  cfg.batch_size = 2;
  cfg.eval_every = 2;
  cfg.max_steps = 8;
  auto run = [&] {
    LovisModel m(tiny_config(), 12);
    const auto r = train_finetune(m, data(), cfg);
    return std::make_pair(r, parameter_hash(m.params));
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.first.history.size(), 4u);
  ASSERT_EQ(a.first.history.size(), b.first.history.size());
  for (std::size_t i = 0; i < a.first.history.size(); ++i) {
    EXPECT_EQ(a.first.history[i].iteration, b.first.history[i].iteration);
    EXPECT_EQ(metric_csv_values(a.first.history[i].table), metric_csv_values(b.first.history[i].table));
    EXPECT_EQ(a.first.history[i].table.spl, b.first.history[i].table.spl);
  }
  EXPECT_EQ(a.second, b.second);
  EXPECT_EQ(a.first.best_iteration, b.first.best_iteration);
}

TEST(Finetune, TrainingChangesParametersAndKeepsBest) {
  TrainerConfig cfg;
  cfg.iterations = 3;
  cfg.batch_size = 1;
  cfg.eval_every = 1;
  cfg.max_steps = 8;
  LovisModel m(tiny_config(), 13);
  const auto before = parameter_hash(m.params);
  const auto r = train_finetune(m, data(), cfg);
  EXPECT_NE(parameter_hash(m.params), before);
  double best = -1;
  for (const auto& row : r.history)
    if (row.split == "val_unseen") best = std::max(best, row.table.spl);
  EXPECT_EQ(best, r.best_spl);
  const auto ev = evaluate_split(m, data(), "val_unseen", cfg.modules, cfg.max_steps);
  EXPECT_EQ(ev.table.spl, r.best_spl);
}

TEST(Evaluate, TeacherPolicyIsPerfect) {
  for (const char* split : {"val_seen", "val_unseen"}) {
    const auto r = evaluate_policy(data(), data().split(split), teacher_policy);
    EXPECT_EQ(r.table.sr, 1.0);
    EXPECT_EQ(r.table.spl, 1.0);
    EXPECT_EQ(r.table.ndtw, 1.0);
    EXPECT_EQ(r.table.ne, 0.0);
  }
}

TEST(Evaluate, StopPolicyErrorIsStartGoalDistance) {
  const auto& eps = data().val_unseen;
  const auto r = evaluate_policy(data(), eps, stop_policy);
  double mean = 0.0;
  for (const auto& ep : eps) mean += data().house(ep.house_id).distance(ep.path.front(), ep.goal);
  mean /= static_cast<double>(eps.size());
  EXPECT_NEAR(r.table.ne, mean, 1e-12);
}

TEST(Evaluate, ThreadCountDoesNotChangeResults) {
  LovisModel m({}, 14);
  const Policy p = [&](const House& h, const Episode& ep) { return greedy_trajectory(m, h, ep, {}, 15); };
  const auto one = evaluate_policy(data(), data().val_seen, p, 1);
  const auto three = evaluate_policy(data(), data().val_seen, p, 3);
  EXPECT_EQ(one.trajectories, three.trajectories);
  EXPECT_EQ(metric_csv_values(one.table), metric_csv_values(three.table));
}

TEST(Evaluate, RandomWalkMatchesMonteCarlo) {
  const Dataset d = make_dataset(5, 40, 2);
  const auto& eps = d.val_unseen;
  const double exact = random_walk_success_rate(d, eps, 15);
  std::mt19937_64 rng(17);
  double hits = 0, n = 0;
  for (int rep = 0; rep < 50; ++rep) {
    for (const auto& ep : eps) {
      const House& h = d.house(ep.house_id);
      hits += success(h, random_walk(h, ep, rng, 15), ep.path);
      n += 1;
    }
  }
  EXPECT_NEAR(hits / n, exact, 0.03);
}

TEST(Evaluate, HistoryOnlyFlagsUseHistoryScoresAlone) {
  LovisModel m({}, 15);
  const Episode& ep = data().val_seen[0];
  const House& h = data().house(ep.house_id);
  NoGradGuard g;
  const TextContext ctx = context(m, ep);
  const AgentState s = initial_state(ctx, ep);
  const auto step = nav_step(m, h, ep, ctx, s, NavMode::kGreedy, nullptr, ModuleFlags::parse("h"));
  const auto hist = history_step(m, s.s, ctx, build_candidates(h, s.viewpoint, s.heading));
  const Tensor expected = scale(hist.scores, m.fuse_w[0]);
  for (std::size_t i = 0; i < expected.numel(); ++i) EXPECT_EQ(step.logits[i], expected[i]);
}
