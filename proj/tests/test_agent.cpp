#include <gtest/gtest.h>

#include <cmath>

#include "lovis/agent.hpp"
#include "lovis/errors.hpp"
#include "test_util.hpp"

using namespace lovis;
using lovis::test::random_tensor;
using lovis::test::tiny_config;
using lovis::test::weighted_sum;

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

// A candidate set with three random neighbours after STOP.
CandidateSet synthetic_candidates(std::uint64_t seed, std::size_t k = 3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> ang(-kPi, kPi);
  CandidateSet c;
  for (std::size_t i = 0; i <= k; ++i) {
    Candidate cand;
    cand.viewpoint = i;
    cand.alpha = i == 0 ? 0.0 : ang(rng);
    cand.beta = i == 0 ? 0.0 : deg2rad(30.0 * (static_cast<int>(rng() % 3) - 1));
    cand.heading = cand.alpha;
    cand.vision.resize(64);
    for (double& v : cand.vision) v = 0.3 * n(rng);
    cand.orientation = orientation_feature(cand.alpha, cand.beta);
    c.items.push_back(cand);
  }
  return c;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(ModuleFlags, ParseAndPrint) {
  EXPECT_EQ(ModuleFlags::parse("h").to_string(), "h");
  EXPECT_EQ(ModuleFlags::parse("h+o").to_string(), "h+o");
  EXPECT_EQ(ModuleFlags::parse("h+v").to_string(), "h+v");
  EXPECT_EQ(ModuleFlags::parse("h+o+v").to_string(), "h+o+v");
  EXPECT_THROW(ModuleFlags::parse("o+v"), ConfigError);
  EXPECT_THROW(ModuleFlags::parse("h+x"), ConfigError);
}

TEST(LovisModel, DeterministicInitAndFuseWeights) {
  LovisModel a({}, 3), b({}, 3);
  EXPECT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) {
    EXPECT_EQ(values(a.params.entries()[i].second), values(b.params.entries()[i].second));
  }
  EXPECT_EQ(values(a.fuse_w), (std::vector<double>{1, 1, 1}));
  EXPECT_TRUE(a.params.contains("nav.h.score_q.w"));
  EXPECT_TRUE(a.params.contains("text.tok_emb"));
}

TEST(AgentState, StartsFromCls) {
  LovisModel m({}, 1);
  const Episode& ep = data().train[0];
  const TextContext ctx = context(m, ep);
  const AgentState s = initial_state(ctx, ep);
  EXPECT_EQ(values(s.s), values(ctx.text.cls));
  EXPECT_EQ(s.viewpoint, ep.path.front());
  EXPECT_EQ(s.t, 0u);
}

TEST(HistoryStep, StopOnly) {
  LovisModel m({}, 1);
  const TextContext ctx = context(m, data().train[0]);
  House h;
  h.viewpoints = {{0, 0, 0, {2}}};
  h.finalize();
  const CandidateSet c = build_candidates(h, 0, 0.0);
  ASSERT_EQ(c.size(), 1u);
  const auto out = history_step(m, ctx.text.cls, ctx, c);
  EXPECT_EQ(out.scores.numel(), 1u);
  EXPECT_EQ(softmax(out.scores)[0], 1.0);
  EXPECT_THROW(history_step(m, ctx.text.cls, ctx, CandidateSet{}), ContractError);
  EXPECT_THROW(orientation_step(m, ctx.text.cls, ctx, CandidateSet{}), ContractError);
  EXPECT_THROW(vision_step(m, ctx.text.cls, ctx, CandidateSet{}), ContractError);
}

TEST(HistoryStep, IdenticalCandidatesScoreEqually) {
  LovisModel m({}, 2);
  const TextContext ctx = context(m, data().train[1]);
  CandidateSet c = synthetic_candidates(4, 2);
  c.items.push_back(c.items[1]);
  const auto out = history_step(m, ctx.text.cls, ctx, c);
  EXPECT_NEAR(out.scores[1], out.scores[3], 1e-9);
}

TEST(HistoryStep, GradientsPassFiniteDifference) {
  LovisModel m(tiny_config(), 5);
  const auto tokens = tokenize(data().train[2].instruction, vocab());
  const CandidateSet c = synthetic_candidates(7, 3);
  std::vector<Tensor> params = m.policy_parameters();
  const double err = finite_diff_check(
      [&] {
        const TextContext ctx = prepare_text(m, tokens);
        const auto out = history_step(m, ctx.text.cls, ctx, c);
        return add(weighted_sum(out.next_state, 1), weighted_sum(out.scores, 2));
      },
      params, {1e-5, 4, 11});
  EXPECT_LT(err, 1e-4);
}

TEST(ModuleSteps, InputSeparationIsBitExact) {
  LovisModel m({}, 3);
  const TextContext ctx = context(m, data().train[3]);
  const CandidateSet base = synthetic_candidates(9, 4);
  const Tensor po = orientation_step(m, ctx.text.cls, ctx, base);
  const Tensor pv = vision_step(m, ctx.text.cls, ctx, base);

  CandidateSet v_changed = base;
  std::swap(v_changed.items[1].vision, v_changed.items[3].vision);
  for (double& x : v_changed.items[2].vision) x += 0.5;
  EXPECT_EQ(values(orientation_step(m, ctx.text.cls, ctx, v_changed)), values(po));

  CandidateSet o_changed = base;
  std::swap(o_changed.items[1].orientation, o_changed.items[3].orientation);
  o_changed.items[2].orientation = orientation_feature(1.0, 0.5);
  EXPECT_EQ(values(vision_step(m, ctx.text.cls, ctx, o_changed)), values(pv));

  // Swapping orientation features swaps the orientation scores.
  CandidateSet o_swap = base;
  std::swap(o_swap.items[1].orientation, o_swap.items[3].orientation);
  const Tensor po_swap = orientation_step(m, ctx.text.cls, ctx, o_swap);
  EXPECT_NEAR(po_swap[1], po[3], 1e-9);
  EXPECT_NEAR(po_swap[3], po[1], 1e-9);
  EXPECT_NEAR(po_swap[2], po[2], 1e-9);
}

TEST(ModuleSteps, CandidatePermutationEquivariance) {
  LovisModel m({}, 4);
  const TextContext ctx = context(m, data().train[4]);
  const CandidateSet base = synthetic_candidates(10, 4);
  const std::vector<std::size_t> perm{0, 3, 1, 4, 2};
  CandidateSet permuted;
  for (std::size_t i : perm) permuted.items.push_back(base.items[i]);

  const auto h0 = history_step(m, ctx.text.cls, ctx, base);
  const auto h1 = history_step(m, ctx.text.cls, ctx, permuted);
  const Tensor o0 = orientation_step(m, ctx.text.cls, ctx, base), o1 = orientation_step(m, ctx.text.cls, ctx, permuted);
  const Tensor v0 = vision_step(m, ctx.text.cls, ctx, base), v1 = vision_step(m, ctx.text.cls, ctx, permuted);
  const auto p0 = fuse(h0.scores, o0, v0, m.fuse_w).probs;
  const auto p1 = fuse(h1.scores, o1, v1, m.fuse_w).probs;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    EXPECT_NEAR(h1.scores[i], h0.scores[perm[i]], 1e-9);
    EXPECT_NEAR(o1[i], o0[perm[i]], 1e-9);
    EXPECT_NEAR(v1[i], v0[perm[i]], 1e-9);
    EXPECT_NEAR(p1[i], p0[perm[i]], 1e-9);
  }
  for (std::size_t j = 0; j < h0.next_state.numel(); ++j) EXPECT_NEAR(h0.next_state[j], h1.next_state[j], 1e-9);
}

TEST(ModuleSteps, StateRecurrence) {
  LovisModel m({}, 5);
  const TextContext ctx = context(m, data().train[5]);
  const CandidateSet c = synthetic_candidates(11);
  const auto a = history_step(m, ctx.text.cls, ctx, c);
  const auto b = history_step(m, Tensor::zeros({1, 64}), ctx, c);
  EXPECT_NE(values(a.next_state), values(b.next_state));
}

TEST(Fuse, SelectorReducesToSingleModule) {
  const Tensor ph = Tensor::row({0.3, -1.2, 2.0});
  const Tensor po = Tensor::row({1.0, 0.5, -0.5});
  const Tensor pv = Tensor::row({-2.0, 0.0, 0.7});
  const Tensor sel[3] = {Tensor::row({1, 0, 0}), Tensor::row({0, 1, 0}), Tensor::row({0, 0, 1})};
  const Tensor* src[3] = {&ph, &po, &pv};
  for (int m = 0; m < 3; ++m) {
    const auto p = fuse(ph, po, pv, sel[m]).probs;
    const auto q = softmax(*src[m]);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], q[i], 1e-15);
  }
}

TEST(Fuse, ConstantScoresGiveUniform) {
  const auto p = fuse(Tensor::full({1, 4}, 2.0), Tensor::full({1, 4}, -1.0), Tensor::full({1, 4}, 0.5),
                      Tensor::row({0.3, 0.2, 0.9})).probs;
  for (double v : p.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Fuse, MatchesScalarProductOracle) {
  const std::vector<double> h{0.4, -0.1, 1.3}, o{2.0, 0.2, -0.7}, v{-1.0, 0.5, 0.25};
  const std::vector<double> w{0.02, -0.03, -0.04};
  const auto d = fuse(Tensor::row(h), Tensor::row(o), Tensor::row(v), Tensor::row(w));
  std::vector<double> logit(3);
  double total = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    logit[i] = w[0] * h[i] + w[1] * o[i] + w[2] * v[i];
    total += std::exp(logit[i]);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(d.logits[i], logit[i], 1e-15);
    EXPECT_NEAR(d.probs[i], std::exp(logit[i]) / total, 1e-12);
  }
}

TEST(Fuse, LengthMismatchIsDimensionError) {
  EXPECT_THROW(fuse(Tensor::row({1, 2}), Tensor::row({1, 2, 3}), Tensor::row({1, 2}), Tensor::row({1, 1, 1})),
               DimensionError);
}

TEST(Fuse, DisabledModulesAreIgnored) {
  const Tensor ph = Tensor::row({0.3, -1.2}), pv = Tensor::row({-2.0, 0.7});
  const auto d = fuse(ph, Tensor(), pv, Tensor::row({0.5, 9.0, 2.0}), ModuleFlags::parse("h+v"));
  EXPECT_NEAR(d.logits[0], 0.5 * 0.3 + 2.0 * -2.0, 1e-15);
  EXPECT_NEAR(d.logits[1], 0.5 * -1.2 + 2.0 * 0.7, 1e-15);
}

TEST(Fuse, ArgmaxInvariantToModuleShift) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const Tensor ph = random_tensor({1, 5}, rng(), 1.0, false);
    const Tensor po = random_tensor({1, 5}, rng(), 1.0, false);
    const Tensor pv = random_tensor({1, 5}, rng(), 1.0, false);
    const Tensor w = random_tensor({1, 3}, rng(), 1.0, false);
    auto argmax = [](const Tensor& p) {
      std::size_t a = 0;
      for (std::size_t i = 1; i < p.numel(); ++i)
        if (p[i] > p[a]) a = i;
      return a;
    };
    EXPECT_EQ(argmax(fuse(ph, po, pv, w).probs), argmax(fuse(ph, add_scalar(po, 3.7), pv, w).probs));
  }
}

TEST(NavStep, GreedyRolloutDeterministicAndBounded) {
  LovisModel m({}, 6);
  for (std::size_t i = 0; i < 5; ++i) {
    const Episode& ep = data().val_seen[i];
    const House& h = data().house(ep.house_id);
    const auto a = greedy_trajectory(m, h, ep, {}, 15);
    const auto b = greedy_trajectory(m, h, ep, {}, 15);
    EXPECT_EQ(a, b);
    EXPECT_LE(a.size(), 16u);
    EXPECT_EQ(a.front(), ep.path.front());
  }
}

TEST(NavStep, TeacherRolloutFollowsPath) {
  LovisModel m({}, 7);
  for (std::size_t i = 0; i < 10; ++i) {
    const Episode& ep = data().train[i];
    const TextContext ctx = context(m, ep);
    const Rollout r = rollout(m, data().house(ep.house_id), ep, ctx, NavMode::kTeacher);
    EXPECT_EQ(r.trajectory, ep.path);
    EXPECT_TRUE(r.stopped);
    EXPECT_EQ(r.actions.back(), 0u);
    Graph::current().clear();
  }
}

TEST(NavStep, SampledLogProbsAreValid) {
  LovisModel m({}, 8);
  std::mt19937_64 rng(3);
  for (std::size_t i = 0; i < 5; ++i) {
    const Episode& ep = data().train[i];
    NoGradGuard g;
    const TextContext ctx = context(m, ep);
    const Rollout r = rollout(m, data().house(ep.house_id), ep, ctx, NavMode::kSample, &rng);
    EXPECT_EQ(r.log_probs.size(), r.actions.size());
    for (const auto& lp : r.log_probs) {
      EXPECT_TRUE(std::isfinite(lp.item()));
      EXPECT_LE(lp.item(), 0.0);
    }
    EXPECT_LE(r.trajectory.size(), 16u);
  }
}

TEST(NavStep, StopAndStepLimit) {
  LovisModel m({}, 9);
  const Episode& ep = data().train[0];
  const House& h = data().house(ep.house_id);
  NoGradGuard g;
  const TextContext ctx = context(m, ep);
  AgentState s = initial_state(ctx, ep);
  // Force STOP by making STOP the teacher's answer: an episode ending here.
  Episode here = ep;
  here.path = {ep.path.front()};
  const auto stop = nav_step(m, h, here, ctx, s, NavMode::kTeacher);
  EXPECT_EQ(stop.action, 0u);
  EXPECT_TRUE(stop.next.done);
  EXPECT_EQ(stop.next.viewpoint, s.viewpoint);

  const auto move = nav_step(m, h, ep, ctx, s, NavMode::kTeacher, nullptr, {}, 1);
  EXPECT_NE(move.action, 0u);
  EXPECT_TRUE(move.next.done);
  EXPECT_EQ(move.next.viewpoint, ep.path[1]);
  EXPECT_EQ(move.next.heading, h.edge(ep.path[0], ep.path[1])->heading);

  // The state comes from the history module alone.
  const auto hist = history_step(m, s.s, ctx, build_candidates(h, s.viewpoint, s.heading));
  EXPECT_EQ(values(move.next.s), values(hist.next_state));

  const Rollout capped = rollout(m, h, ep, ctx, NavMode::kTeacher, nullptr, {}, 2);
  EXPECT_EQ(capped.actions.size(), 2u);
  EXPECT_FALSE(capped.stopped);
}

TEST(NavStep, TeacherOffPathIsDataError) {
  const Episode& ep = data().train[0];
  const House& h = data().house(ep.house_id);
  std::size_t off = 0;
  while (off == ep.path[0] || off == ep.path[1]) ++off;
  const CandidateSet c = build_candidates(h, off, 0.0);
  EXPECT_THROW(teacher_action(ep, 0, off, c), DataError);
}

TEST(NavStep, DefaultMaxSteps) {
  EXPECT_EQ(default_max_steps(DatasetStyle::kR2R), 15u);
  EXPECT_EQ(default_max_steps(DatasetStyle::kR4R), 30u);
}
