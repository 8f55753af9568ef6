#pragma once

// The navigation policy: three cross-modal scoring modules over a shared
// recurrent state, fused per candidate by a trainable 3-vector.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lovis/encoders.hpp"
#include "lovis/optim.hpp"
#include "lovis/world.hpp"

namespace lovis {

// Which modules contribute to the fused score. History is always present.
struct ModuleFlags {
  bool orientation = true;
  bool vision = true;

  static ModuleFlags parse(const std::string& spec);  // "h", "h+o", "h+v", "h+o+v"
  std::string to_string() const;
};

// One of the history/orientation/vision modules: a cross stack against the
// text, one self-attention block over [state; features], and a single-head
// scoring attention from the state row to the feature rows.
struct NavModule {
  CrossStack cross;
  AttentionBlock self;
  Linear score_q;
  Linear score_k;

  static NavModule make(ParamFactory& f, const std::string& name, const ModelConfig& cfg);
};

class LovisModel {
 public:
  explicit LovisModel(const ModelConfig& config = {}, std::uint64_t seed = 0);
  LovisModel(const LovisModel&) = delete;
  LovisModel& operator=(const LovisModel&) = delete;

  ModelConfig config;
  ParameterSet params;
  Encoders enc;
  NavModule history;
  NavModule orientation;
  NavModule vision;
  Tensor fuse_w;        // 1 × 3, weights of (p^h, p^o, p^v)
  Linear baseline;      // value head on the detached state
  Linear mlm_head;      // d_model → vocab
  Linear vm_head;       // d_model → 1
  Linear om_head;       // d_model → 4

  // Parameters touched by navigation losses (everything except the
  // pre-training heads and the baseline).
  std::vector<Tensor> policy_parameters() const;
  std::vector<Tensor> baseline_parameters() const;
};

// Per-episode text encoding plus the first-layer text keys/values of every
// module, computed once and reused at each step.
struct TextContext {
  TextEncoding text;
  KeyValue history_kv;
  KeyValue orientation_kv;
  KeyValue vision_kv;
};

TextContext prepare_text(const LovisModel& model, const TokenizedText& tokens);

struct ModuleResult {
  Tensor state;         // 1 × d, state row after the self-attention block
  Tensor scores;        // 1 × n feature rows, pre-softmax logits
  Tensor cross_state;   // 1 × d, state row after the cross stack (ŝ)
  Tensor text;          // updated text rows (only when requested)
  Tensor cross_attention;  // head-averaged (1 + n) × L weights
};

// Runs one module on already-encoded feature rows.
ModuleResult run_module(const NavModule& module, const Tensor& state, const TextEncoding& text,
                        const Tensor& features, const KeyValue* text_kv = nullptr, bool want_text = false);

struct HistoryOutput {
  Tensor next_state;
  Tensor scores;
};

HistoryOutput history_step(const LovisModel& model, const Tensor& state, const TextContext& ctx,
                           const CandidateSet& cands);
Tensor orientation_step(const LovisModel& model, const Tensor& state, const TextContext& ctx,
                        const CandidateSet& cands);
Tensor vision_step(const LovisModel& model, const Tensor& state, const TextContext& ctx, const CandidateSet& cands);

struct ActionDistribution {
  Tensor logits;  // 1 × (k+1)
  Tensor probs;   // 1 × (k+1)
};

// logit_i = W_a · (p^h_i, p^o_i, p^v_i) over the enabled modules, then softmax.
// Disabled modules may be passed as undefined tensors.
ActionDistribution fuse(const Tensor& ph, const Tensor& po, const Tensor& pv, const Tensor& w,
                        const ModuleFlags& flags = {});

enum class NavMode { kGreedy, kSample, kTeacher };

struct AgentState {
  Tensor s;  // 1 × d
  std::size_t t = 0;
  std::size_t viewpoint = 0;
  double heading = 0.0;
  bool done = false;
};

AgentState initial_state(const TextContext& ctx, const Episode& episode);

struct StepResult {
  std::size_t action = 0;  // 0 is STOP
  Tensor log_prob;         // log p_t[action], scalar
  Tensor logits;           // fused logits
  Tensor state_before;     // s_t used to score this step
  AgentState next;
};

// Index of the ground-truth next move, or 0 (STOP) at the end of the path.
// Throws DataError if the agent is off the path or the move is not a candidate.
std::size_t teacher_action(const Episode& episode, std::size_t t, std::size_t viewpoint, const CandidateSet& cands);

StepResult nav_step(const LovisModel& model, const House& house, const Episode& episode, const TextContext& ctx,
                    const AgentState& state, NavMode mode, std::mt19937_64* rng = nullptr,
                    const ModuleFlags& flags = {}, std::size_t max_steps = 15);

struct Rollout {
  std::vector<std::size_t> trajectory;  // visited viewpoints, start first
  std::vector<std::size_t> actions;
  std::vector<Tensor> log_probs;
  std::vector<Tensor> logits;
  std::vector<Tensor> states;           // s_t before each step
  std::vector<std::size_t> positions;   // viewpoint before each step
  std::vector<double> rewards;          // filled by the trainer
  bool stopped = false;                 // ended by STOP rather than the step limit
};

std::size_t default_max_steps(DatasetStyle style);

Rollout rollout(const LovisModel& model, const House& house, const Episode& episode, const TextContext& ctx,
                NavMode mode, std::mt19937_64* rng = nullptr, const ModuleFlags& flags = {},
                std::size_t max_steps = 15);

// Convenience for evaluation: no-grad greedy rollout from scratch.
std::vector<std::size_t> greedy_trajectory(const LovisModel& model, const House& house, const Episode& episode,
                                           const ModuleFlags& flags = {}, std::size_t max_steps = 15);

}  // namespace lovis
