#include "lovis/pretrain.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "lovis/errors.hpp"

namespace lovis {

namespace {

const Vocabulary& vocabulary() {
  static const Vocabulary vocab = Vocabulary::standard();
  return vocab;
}

// The [CLS] row after the module's cross stack and its self-attention over
// [CLS; features]. The cross stack alone never lets [CLS] see the features
// when it has a single layer.
Tensor joint_state(const NavModule& module, const TextEncoding& text, const Tensor& features) {
  return run_module(module, text.cls, text, features).state;
}

Tensor mlm_on(const LovisModel& model, const PretrainExample& ex, const TextEncoding& masked) {
  if (ex.plan.positions.empty()) return Tensor::scalar(0.0);
  Tensor feats = model.enc.encode_vision_orientation(ex.vision, ex.orientation);
  CrossOutput out = model.history.cross.forward(concat_rows({masked.cls, feats}), masked.X, masked.row_mask, true);
  std::vector<Tensor> rows;
  for (std::size_t pos : ex.plan.positions) rows.push_back(slice_rows(out.text, pos, 1));
  Tensor logits = model.mlm_head(concat_rows(rows));
  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < ex.plan.positions.size(); ++i) {
    terms.push_back(cross_entropy(slice_rows(logits, i, 1), ex.plan.originals[i]));
  }
  return mean(concat_rows(terms));
}

Tensor ssap_on(const LovisModel& model, const PretrainExample& ex, const TextEncoding& text) {
  Tensor feats = model.enc.encode_vision_orientation(ex.vision, ex.orientation);
  return cross_entropy(run_module(model.history, text.cls, text, feats).scores, ex.teacher);
}

Tensor vm_on(const LovisModel& model, const PretrainExample& ex, const TextEncoding& text) {
  Tensor s = joint_state(model.vision, text, model.enc.encode_vision(ex.vm.features));
  return bce_with_logits(model.vm_head(s), ex.vm.y);
}

Tensor om_on(const LovisModel& model, const PretrainExample& ex, const TextEncoding& text) {
  Tensor s = joint_state(model.orientation, text, model.enc.encode_orientation(ex.orientation));
  return mse(model.om_head(s), ex.target_orientation);
}

}  // namespace

std::pair<TokenizedText, MaskPlan> mask_instruction(const TokenizedText& text, const Vocabulary& vocab,
                                                    std::uint64_t seed, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("mask_instruction: probability must be in [0, 1]");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(p);
  TokenizedText masked = text;
  MaskPlan plan;
  for (std::size_t i = 0; i < text.length; ++i) {
    const std::size_t id = text.ids[i];
    if (!vocab.is_direction(id) && !vocab.is_landmark(id)) continue;
    if (coin(rng)) {
      plan.positions.push_back(i);
      plan.originals.push_back(id);
      masked.ids[i] = Vocabulary::kMask;
    }
  }
  return {std::move(masked), std::move(plan)};
}

VmPair sample_vm_pair(const Dataset& dataset, const Episode& episode, const Tensor& true_features,
                      std::mt19937_64& rng) {
  if (dataset.houses.size() < 2) throw DataError("vision matching needs at least two houses for negatives");
  VmPair pair;
  if (std::bernoulli_distribution(0.5)(rng)) {
    pair.features = true_features;
    pair.y = 1.0;
    pair.source_house = episode.house_id;
    return pair;
  }
  std::size_t other = std::uniform_int_distribution<std::size_t>(0, dataset.houses.size() - 2)(rng);
  if (other >= episode.house_id) ++other;
  const House& house = dataset.house(other);
  const std::size_t vp = std::uniform_int_distribution<std::size_t>(0, house.size() - 1)(rng);
  const std::size_t k = true_features.rows();
  if (k > kSectors) throw ContractError("sample_vm_pair: more candidates than panorama sectors");
  std::vector<std::size_t> sectors(kSectors);
  std::iota(sectors.begin(), sectors.end(), 0);
  std::shuffle(sectors.begin(), sectors.end(), rng);
  std::vector<double> data;
  data.reserve(k * true_features.cols());
  for (std::size_t i = 0; i < k; ++i) {
    const auto f = vision_feature(house, vp, sectors[i]);
    if (f.size() != true_features.cols()) throw DimensionError("sample_vm_pair: vision widths differ across houses");
    data.insert(data.end(), f.begin(), f.end());
  }
  pair.features = Tensor::from({k, true_features.cols()}, std::move(data));
  pair.y = 0.0;
  pair.source_house = other;
  return pair;
}

PretrainExample make_example(const Dataset& dataset, const Episode& episode, std::mt19937_64& rng) {
  const House& house = dataset.house(episode.house_id);
  PretrainExample ex;
  ex.house_id = episode.house_id;
  ex.tokens = tokenize(episode.instruction, vocabulary());
  auto [masked, plan] = mask_instruction(ex.tokens, vocabulary(), rng());
  ex.masked = std::move(masked);
  ex.plan = std::move(plan);
  // A uniformly drawn step of the reference path, so the final viewpoint (teacher STOP) is seen too.
  const std::size_t t = std::uniform_int_distribution<std::size_t>(0, episode.path.size() - 1)(rng);
  double heading = episode.initial_heading;
  if (t > 0) {
    for (const Neighbor& n : house.neighbors(episode.path[t - 1])) {
      if (n.id == episode.path[t]) heading = n.heading;
    }
  }
  ex.step = t;
  const CandidateSet cands = build_candidates(house, episode.path[t], heading);
  ex.vision = vision_matrix(cands);
  ex.orientation = orientation_matrix(cands);
  ex.teacher = teacher_action(episode, t, episode.path[t], cands);
  const Candidate& c = cands.items[ex.teacher];
  ex.target_orientation = {std::sin(c.alpha), std::cos(c.alpha), std::sin(c.beta), std::cos(c.beta)};
  ex.vm = sample_vm_pair(dataset, episode, ex.vision, rng);
  return ex;
}

std::vector<PretrainExample> make_examples(const Dataset& dataset, const std::vector<Episode>& episodes,
                                           std::size_t count, std::uint64_t seed) {
  if (episodes.empty()) throw DataError("make_examples: no episodes");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, episodes.size() - 1);
  std::vector<PretrainExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_example(dataset, episodes[pick(rng)], rng));
  return out;
}

Tensor loss_mlm(const LovisModel& model, const PretrainExample& ex) {
  if (ex.plan.positions.empty()) return Tensor::scalar(0.0);
  return mlm_on(model, ex, model.enc.encode_text(ex.masked));
}

Tensor loss_ssap(const LovisModel& model, const PretrainExample& ex) {
  return ssap_on(model, ex, model.enc.encode_text(ex.tokens));
}

Tensor loss_vm(const LovisModel& model, const PretrainExample& ex) {
  return vm_on(model, ex, model.enc.encode_text(ex.tokens));
}

Tensor loss_om(const LovisModel& model, const PretrainExample& ex) {
  return om_on(model, ex, model.enc.encode_text(ex.tokens));
}

TaskFlags TaskFlags::parse(const std::string& spec) {
  TaskFlags f{false, false, false, false};
  std::stringstream ss(spec);
  std::string part;
  bool any = false;
  while (std::getline(ss, part, '+')) {
    part.erase(0, part.find_first_not_of(" \t"));
    part.erase(part.find_last_not_of(" \t") + 1);
    if (part == "mlm") f.mlm = true;
    else if (part == "ssap") f.ssap = true;
    else if (part == "vm") f.vm = true;
    else if (part == "om") f.om = true;
    else throw ConfigError("pretrain_tasks: unknown task '" + part + "' (valid set {mlm, ssap, vm, om})");
    any = true;
  }
  if (!any) throw ConfigError("pretrain_tasks: at least one task is required");
  return f;
}

std::vector<std::string> TaskFlags::names() const {
  std::vector<std::string> out;
  if (mlm) out.push_back("mlm");
  if (ssap) out.push_back("ssap");
  if (vm) out.push_back("vm");
  if (om) out.push_back("om");
  return out;
}

std::string TaskFlags::to_string() const {
  std::string s;
  for (const auto& n : names()) s += (s.empty() ? "" : "+") + n;
  return s;
}

PretrainLosses loss_pretrain(const LovisModel& model, const PretrainExample& ex, const TaskFlags& tasks) {
  PretrainLosses out;
  const TextEncoding text = model.enc.encode_text(ex.tokens);
  std::vector<Tensor> parts;
  if (tasks.mlm) {
    out.mlm = loss_mlm(model, ex);
    parts.push_back(out.mlm);
  }
  if (tasks.ssap) {
    out.ssap = ssap_on(model, ex, text);
    parts.push_back(out.ssap);
  }
  if (tasks.vm) {
    out.vm = vm_on(model, ex, text);
    parts.push_back(out.vm);
  }
  if (tasks.om) {
    out.om = om_on(model, ex, text);
    parts.push_back(out.om);
  }
  if (parts.empty()) throw ContractError("loss_pretrain: no task enabled");
  out.total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out.total = add(out.total, parts[i]);
  return out;
}

void PretrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("pretrain batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("pretrain lr must be positive");
  if (tasks.names().empty()) throw ConfigError("pretrain_tasks: at least one task is required");
}

std::vector<PretrainLogRow> run_pretraining(LovisModel& model, const Dataset& dataset, const PretrainConfig& cfg,
                                            const std::function<void(const PretrainLogRow&)>& on_step) {
  cfg.validate();
  if (dataset.train.empty()) throw DataError("run_pretraining: the train split is empty");
  static const std::vector<std::string> prefixes = {"text.", "enc.", "nav.", "mlm.", "vm.", "om."};
  std::vector<Tensor> params = model.params.with_prefixes(prefixes);
  for (Tensor& t : params) t.zero_grad();
  AdamW opt(params, {cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  const std::vector<std::string> tasks = cfg.tasks.names();

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.train.size() - 1);
  std::vector<PretrainLogRow> log;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::string& task = tasks[(step - 1) % tasks.size()];
    std::vector<Tensor> losses;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const PretrainExample ex = make_example(dataset, dataset.train[pick(rng)], rng);
      if (task == "mlm") losses.push_back(loss_mlm(model, ex));
      else if (task == "ssap") losses.push_back(loss_ssap(model, ex));
      else if (task == "vm") losses.push_back(loss_vm(model, ex));
      else losses.push_back(loss_om(model, ex));
    }
    Tensor loss = scale(sum(concat_rows(losses)), 1.0 / static_cast<double>(cfg.batch_size));
    if (!std::isfinite(loss.item())) {
      Graph::current().clear();
      throw NumericError(fmt::format("non-finite {} loss at pre-training step {}", task, step));
    }
    if (loss.requires_grad()) backward(loss);
    clip_grad_norm(params, cfg.grad_clip);
    opt.step();
    log.push_back({step, task, loss.item()});
    if (on_step) on_step(log.back());
  }
  return log;
}

std::string pretrain_csv(const std::vector<PretrainLogRow>& rows) {
  std::string out = "step,mlm,ssap,vm,om\n";
  for (const auto& r : rows) {
    const std::string v = fmt::format("{:.6f}", r.loss);
    out += fmt::format("{},{},{},{},{}\n", r.step, r.task == "mlm" ? v : "", r.task == "ssap" ? v : "",
                       r.task == "vm" ? v : "", r.task == "om" ? v : "");
  }
  return out;
}

PretrainEval evaluate_pretraining(const LovisModel& model, const std::vector<PretrainExample>& examples) {
  if (examples.empty()) throw ContractError("evaluate_pretraining: no examples");
  NoGradGuard no_grad;
  PretrainEval ev;
  double mlm_sum = 0.0;
  for (const auto& ex : examples) {
    const PretrainLosses l = loss_pretrain(model, ex);
    mlm_sum += l.mlm.item() * static_cast<double>(ex.plan.positions.size());
    ev.masked_tokens += ex.plan.positions.size();
    ev.ssap += l.ssap.item();
    ev.vm += l.vm.item();
    ev.om += l.om.item();
    ev.ssap_chance += std::log(static_cast<double>(ex.vision.rows()));
  }
  const double n = static_cast<double>(examples.size());
  ev.mlm = ev.masked_tokens ? mlm_sum / static_cast<double>(ev.masked_tokens) : 0.0;
  ev.ssap /= n;
  ev.vm /= n;
  ev.om /= n;
  ev.ssap_chance /= n;
  ev.mlm_chance = std::log(static_cast<double>(model.config.vocab_size));
  ev.vm_chance = std::log(2.0);
  return ev;
}

}  // namespace lovis
