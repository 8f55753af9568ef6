#pragma once

// Pre-training on single-step inputs: masked language modelling (MLM),
// single-step action prediction (SSAP), vision matching (VM) and orientation
// matching (OM).

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lovis/agent.hpp"
#include "lovis/world.hpp"

namespace lovis {

inline constexpr double kMaskProbability = 0.08;

struct MaskPlan {
  std::vector<std::size_t> positions;
  std::vector<std::size_t> originals;
};

// Each direction or landmark token is replaced by [MASK] independently with
// probability p; nothing else is ever masked.
std::pair<TokenizedText, MaskPlan> mask_instruction(const TokenizedText& text, const Vocabulary& vocab,
                                                    std::uint64_t seed, double p = kMaskProbability);

struct VmPair {
  Tensor features;  // k × d_v vision features
  double y = 1.0;   // 1 when the features are the episode's own
  std::size_t source_house = 0;
};

// Keeps the true features with probability 0.5, otherwise substitutes the
// same number of sector features from a random viewpoint of another house.
VmPair sample_vm_pair(const Dataset& dataset, const Episode& episode, const Tensor& true_features,
                      std::mt19937_64& rng);

struct PretrainExample {
  std::size_t house_id = 0;
  std::size_t step = 0;  // index into the episode's path
  TokenizedText tokens;
  TokenizedText masked;
  MaskPlan plan;
  Tensor vision;       // VO_p vision part, (k+1) × d_v
  Tensor orientation;  // O_p, (k+1) × 128
  std::size_t teacher = 0;
  std::array<double, 4> target_orientation{};  // [sin α, cos α, sin β, cos β] of the teacher action
  VmPair vm;
};

// One step of `episode`, drawn uniformly along the reference path: the candidates
// at that viewpoint, facing the way the path arrived, and the teacher action.
PretrainExample make_example(const Dataset& dataset, const Episode& episode, std::mt19937_64& rng);

// Mean cross-entropy over masked positions of the vocabulary head applied to
// the text rows after the history cross stack; 0 with no masked positions.
Tensor loss_mlm(const LovisModel& model, const PretrainExample& ex);
// Cross-entropy of the [CLS]-row action scores at step 0 against the teacher.
Tensor loss_ssap(const LovisModel& model, const PretrainExample& ex);
// Binary cross-entropy of the matching head over the vision-only stream.
Tensor loss_vm(const LovisModel& model, const PretrainExample& ex);
// Squared error of the 4-output head over the orientation stream.
Tensor loss_om(const LovisModel& model, const PretrainExample& ex);

struct TaskFlags {
  bool mlm = true, ssap = true, vm = true, om = true;

  static TaskFlags parse(const std::string& spec);  // e.g. "mlm+ssap+vm"
  std::string to_string() const;
  std::vector<std::string> names() const;
};

struct PretrainLosses {
  Tensor mlm, ssap, vm, om;
  Tensor total;  // unweighted sum of the enabled tasks
};

PretrainLosses loss_pretrain(const LovisModel& model, const PretrainExample& ex, const TaskFlags& tasks = {});

struct PretrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double grad_clip = 5.0;
  std::uint64_t seed = 7;
  TaskFlags tasks;

  void validate() const;
};

struct PretrainLogRow {
  std::size_t step = 0;
  std::string task;
  double loss = 0.0;
};

// Round-robin over the enabled tasks, one task per optimizer step, each step a
// mean over batch_size freshly drawn training examples.
std::vector<PretrainLogRow> run_pretraining(LovisModel& model, const Dataset& dataset, const PretrainConfig& cfg,
                                            const std::function<void(const PretrainLogRow&)>& on_step = {});

// CSV with columns step,mlm,ssap,vm,om; the inactive tasks of a step are empty.
std::string pretrain_csv(const std::vector<PretrainLogRow>& rows);

struct PretrainEval {
  double mlm = 0, ssap = 0, vm = 0, om = 0;
  double mlm_chance = 0;   // ln |V|
  double ssap_chance = 0;  // mean ln(k+1)
  double vm_chance = 0;    // ln 2
  double om_initial = 0;   // filled by the caller when known
  std::size_t masked_tokens = 0;
};

// Mean task losses over examples (MLM pooled over masked positions).
PretrainEval evaluate_pretraining(const LovisModel& model, const std::vector<PretrainExample>& examples);

std::vector<PretrainExample> make_examples(const Dataset& dataset, const std::vector<Episode>& episodes,
                                           std::size_t count, std::uint64_t seed);

}  // namespace lovis
