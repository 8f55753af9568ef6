#include "lovis/agent.hpp"

#include <cmath>

#include "lovis/errors.hpp"

namespace lovis {

ModuleFlags ModuleFlags::parse(const std::string& spec) {
  ModuleFlags f{false, false};
  bool history = false;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const std::size_t plus = spec.find('+', start);
    std::string part = spec.substr(start, plus == std::string::npos ? std::string::npos : plus - start);
    part.erase(0, part.find_first_not_of(" \t"));
    part.erase(part.find_last_not_of(" \t") + 1);
    if (part == "h") {
      history = true;
    } else if (part == "o") {
      f.orientation = true;
    } else if (part == "v") {
      f.vision = true;
    } else {
      throw ConfigError("modules: unknown module '" + part + "' (valid set {h, o, v})");
    }
    if (plus == std::string::npos) break;
    start = plus + 1;
  }
  if (!history) throw ConfigError("modules: 'h' is required (valid set {h, o, v})");
  return f;
}

std::string ModuleFlags::to_string() const {
  std::string s = "h";
  if (orientation) s += "+o";
  if (vision) s += "+v";
  return s;
}

NavModule NavModule::make(ParamFactory& f, const std::string& name, const ModelConfig& cfg) {
  NavModule m;
  m.cross = CrossStack::make(f, name, cfg);
  m.self = AttentionBlock::make(f, name + ".self", cfg);
  m.score_q = Linear::make(f, name + ".score_q", cfg.d_model, cfg.d_model, false);
  m.score_k = Linear::make(f, name + ".score_k", cfg.d_model, cfg.d_model, false);
  return m;
}

LovisModel::LovisModel(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
  config.validate();
  std::mt19937_64 rng(seed);
  ParamFactory f(params, rng, config.init_std);
  enc = Encoders::make(f, config);
  history = NavModule::make(f, "nav.h", config);
  orientation = NavModule::make(f, "nav.o", config);
  vision = NavModule::make(f, "nav.v", config);
  fuse_w = f.values("fuse.w", {1, 3}, {1.0, 1.0, 1.0});
  baseline = Linear::make(f, "baseline", config.d_model, 1);
  mlm_head = Linear::make(f, "mlm", config.d_model, config.vocab_size);
  vm_head = Linear::make(f, "vm", config.d_model, 1);
  om_head = Linear::make(f, "om", config.d_model, 4);
  params.zero_grad();
}

std::vector<Tensor> LovisModel::policy_parameters() const {
  static const std::vector<std::string> prefixes = {"text.", "enc.", "nav.", "fuse."};
  return params.with_prefixes(prefixes);
}

std::vector<Tensor> LovisModel::baseline_parameters() const {
  static const std::vector<std::string> prefixes = {"baseline."};
  return params.with_prefixes(prefixes);
}

TextContext prepare_text(const LovisModel& model, const TokenizedText& tokens) {
  TextContext ctx;
  ctx.text = model.enc.encode_text(tokens);
  ctx.history_kv = model.history.cross.project_text(ctx.text.X);
  ctx.orientation_kv = model.orientation.cross.project_text(ctx.text.X);
  ctx.vision_kv = model.vision.cross.project_text(ctx.text.X);
  return ctx;
}

ModuleResult run_module(const NavModule& module, const Tensor& state, const TextEncoding& text,
                        const Tensor& features, const KeyValue* text_kv, bool want_text) {
  if (features.rows() == 0) throw ContractError("module step: empty candidate set");
  const std::size_t n = features.rows();
  CrossOutput cross = module.cross.forward(concat_rows({state, features}), text.X, text.row_mask, want_text, text_kv);
  Tensor z = module.self.self(cross.query);
  Tensor q = module.score_q(slice_rows(z, 0, 1));
  Tensor k = module.score_k(slice_rows(z, 1, n));
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  ModuleResult r;
  r.state = slice_rows(z, 0, 1);
  r.scores = scale(matmul_bt(q, k), inv);
  r.cross_state = slice_rows(cross.query, 0, 1);
  r.text = cross.text;
  r.cross_attention = cross.attention;
  return r;
}

HistoryOutput history_step(const LovisModel& model, const Tensor& state, const TextContext& ctx,
                           const CandidateSet& cands) {
  if (cands.size() == 0) throw ContractError("history_step: empty candidate set");
  Tensor feats = model.enc.encode_vision_orientation(vision_matrix(cands), orientation_matrix(cands));
  ModuleResult r = run_module(model.history, state, ctx.text, feats, &ctx.history_kv);
  return {r.state, r.scores};
}

Tensor orientation_step(const LovisModel& model, const Tensor& state, const TextContext& ctx,
                        const CandidateSet& cands) {
  if (cands.size() == 0) throw ContractError("orientation_step: empty candidate set");
  Tensor feats = model.enc.encode_orientation(orientation_matrix(cands));
  return run_module(model.orientation, state, ctx.text, feats, &ctx.orientation_kv).scores;
}

Tensor vision_step(const LovisModel& model, const Tensor& state, const TextContext& ctx, const CandidateSet& cands) {
  if (cands.size() == 0) throw ContractError("vision_step: empty candidate set");
  Tensor feats = model.enc.encode_vision(vision_matrix(cands));
  return run_module(model.vision, state, ctx.text, feats, &ctx.vision_kv).scores;
}

ActionDistribution fuse(const Tensor& ph, const Tensor& po, const Tensor& pv, const Tensor& w,
                        const ModuleFlags& flags) {
  if (w.numel() != 3) throw DimensionError("fuse: W_a must have 3 entries, got " + shape_str(w.shape()));
  std::vector<Tensor> rows{ph};
  Tensor weights = slice_cols(w, 0, 1);
  auto take = [&](const Tensor& p, std::size_t col) {
    if (!p.defined()) throw ContractError("fuse: enabled module has no scores");
    if (p.numel() != ph.numel()) {
      throw DimensionError("fuse: score lengths differ: " + shape_str(ph.shape()) + " vs " + shape_str(p.shape()));
    }
    rows.push_back(p);
    weights = concat_cols(weights, slice_cols(w, col, 1));
  };
  if (flags.orientation) take(po, 1);
  if (flags.vision) take(pv, 2);
  ActionDistribution out;
  out.logits = rows.size() == 1 ? matmul(weights, ph) : matmul(weights, concat_rows(rows));
  out.probs = softmax(out.logits);
  return out;
}

AgentState initial_state(const TextContext& ctx, const Episode& episode) {
  if (episode.path.empty()) throw DataError("episode has an empty path");
  AgentState s;
  s.s = ctx.text.cls;
  s.viewpoint = episode.path.front();
  s.heading = episode.initial_heading;
  return s;
}

std::size_t teacher_action(const Episode& episode, std::size_t t, std::size_t viewpoint, const CandidateSet& cands) {
  if (t >= episode.path.size() || episode.path[t] != viewpoint) {
    throw DataError("teacher action requested off the reference path at step " + std::to_string(t));
  }
  if (t + 1 == episode.path.size()) return 0;
  const auto idx = cands.index_of(episode.path[t + 1]);
  if (!idx) {
    throw DataError("teacher move to viewpoint " + std::to_string(episode.path[t + 1]) +
                    " is not a navigable candidate of " + std::to_string(viewpoint));
  }
  return *idx;
}

StepResult nav_step(const LovisModel& model, const House& house, const Episode& episode, const TextContext& ctx,
                    const AgentState& state, NavMode mode, std::mt19937_64* rng, const ModuleFlags& flags,
                    std::size_t max_steps) {
  if (state.done) throw ContractError("nav_step: episode already finished");
  const CandidateSet cands = build_candidates(house, state.viewpoint, state.heading);
  HistoryOutput h = history_step(model, state.s, ctx, cands);
  Tensor po = flags.orientation ? orientation_step(model, state.s, ctx, cands) : Tensor();
  Tensor pv = flags.vision ? vision_step(model, state.s, ctx, cands) : Tensor();
  ActionDistribution dist = fuse(h.scores, po, pv, model.fuse_w, flags);

  std::size_t action = 0;
  auto probs = dist.probs.data();
  switch (mode) {
    case NavMode::kGreedy:
      for (std::size_t i = 1; i < probs.size(); ++i)
        if (probs[i] > probs[action]) action = i;
      break;
    case NavMode::kSample: {
      if (!rng) throw ContractError("nav_step: sampling requires an rng");
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      const double u = unit(*rng);
      double acc = 0.0;
      action = probs.size() - 1;
      for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) {
          action = i;
          break;
        }
      }
      break;
    }
    case NavMode::kTeacher:
      action = teacher_action(episode, state.t, state.viewpoint, cands);
      break;
  }

  StepResult r;
  r.action = action;
  r.logits = dist.logits;
  r.log_prob = element(log_softmax(dist.logits), action);
  r.state_before = state.s;
  r.next = state;
  r.next.s = h.next_state;
  r.next.t = state.t + 1;
  if (action == 0) {
    r.next.done = true;
  } else {
    r.next.viewpoint = cands.items[action].viewpoint;
    r.next.heading = cands.items[action].heading;
    if (r.next.t >= max_steps) r.next.done = true;
  }
  return r;
}

std::size_t default_max_steps(DatasetStyle style) { return style == DatasetStyle::kR2R ? 15 : 30; }

Rollout rollout(const LovisModel& model, const House& house, const Episode& episode, const TextContext& ctx,
                NavMode mode, std::mt19937_64* rng, const ModuleFlags& flags, std::size_t max_steps) {
  if (max_steps == 0) throw ContractError("rollout: max_steps must be positive");
  Rollout out;
  AgentState state = initial_state(ctx, episode);
  out.trajectory.push_back(state.viewpoint);
  while (!state.done) {
    StepResult step = nav_step(model, house, episode, ctx, state, mode, rng, flags, max_steps);
    out.actions.push_back(step.action);
    out.log_probs.push_back(step.log_prob);
    out.logits.push_back(step.logits);
    out.states.push_back(step.state_before);
    out.positions.push_back(state.viewpoint);
    if (step.action == 0) out.stopped = true;
    else out.trajectory.push_back(step.next.viewpoint);
    state = std::move(step.next);
  }
  return out;
}

std::vector<std::size_t> greedy_trajectory(const LovisModel& model, const House& house, const Episode& episode,
                                           const ModuleFlags& flags, std::size_t max_steps) {
  NoGradGuard no_grad;
  static const Vocabulary vocab = Vocabulary::standard();
  const TextContext ctx = prepare_text(model, tokenize(episode.instruction, vocab));
  return rollout(model, house, episode, ctx, NavMode::kGreedy, nullptr, flags, max_steps).trajectory;
}

}  // namespace lovis
