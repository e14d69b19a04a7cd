#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "defnet/network.hpp"
#include "defnet/parallel.hpp"

namespace defnet {

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 16;
  int epochs = 1;
  double stage_lr_scale = 0.1;  // branch phases (new branch only) run at this fraction of the lr
  double last_epoch_lr_scale = 1.0;  // step decay for the final epoch of multi-epoch phases
  std::uint64_t seed = 0;

  void validate() const {
    require(learning_rate >= 0.0 && std::isfinite(learning_rate), ErrorCode::kInvalidArgument,
            "learning_rate must be finite and >= 0");
    require(last_epoch_lr_scale >= 0.0 && std::isfinite(last_epoch_lr_scale), ErrorCode::kInvalidArgument,
            "last_epoch_lr_scale must be finite and >= 0");
    require(momentum >= 0.0 && momentum < 1.0, ErrorCode::kInvalidArgument, "momentum must be in [0,1)");
    require(weight_decay >= 0.0, ErrorCode::kInvalidArgument, "weight_decay must be >= 0");
    require(batch_size > 0 && epochs > 0, ErrorCode::kInvalidArgument,
            "batch_size and epochs must be positive");
  }
};

/// Parameters named in `frozen` are never written. Zero-pinned parameters are
/// frozen and additionally held at exactly 0.
struct FreezeMask {
  std::set<std::string> frozen;
  std::set<std::string> zero_pinned;

  void freeze(const std::string& name) { frozen.insert(name); }
  void pin_zero(const std::string& name) {
    frozen.insert(name);
    zero_pinned.insert(name);
  }
  bool is_frozen(const std::string& name) const { return frozen.count(name) > 0; }
};

struct Sample {
  Tensor image;
  Target target;
  std::size_t id = 0;
};
using Dataset = std::vector<Sample>;

struct SgdState {
  std::map<std::string, Tensor> velocity;
};

struct LossRow {
  std::string phase;
  std::size_t step = 0;
  double loss = 0.0;
};

enum class StepEvent { kBefore, kAfter };

struct TrainHooks {
  /// Called with the network around every SGD step (tests use it to check
  /// freeze contracts).
  std::function<void(const std::string& phase, StepEvent, const StagedNetwork&)> on_step;
  /// Called at stage boundaries: "base_done", "stageT_randomized_before",
  /// "stageT_randomized_after", "stageT_branch_done", "stageT_joint_done".
  std::function<void(const std::string& event, const StagedNetwork&)> on_boundary;
};

/// Mean loss and parameter gradients over a batch. Samples are processed in
/// parallel but reduced in batch order, so results do not depend on threads.
inline std::pair<double, ParamGrads> batch_gradients(const StagedNetwork& net,
                                                    std::span<const Sample* const> batch,
                                                    const LossKind& loss) {
  std::vector<ParamGrads> per(batch.size());
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    const ForwardCache c = forward(net, batch[i]->image);
    const LossResult l = loss_forward_backward(c.scores, batch[i]->target, loss);
    losses[i] = l.loss;
    per[i] = backward(net, c, l.grad);
  });
  ParamGrads total = std::move(per[0]);
  for (std::size_t i = 1; i < per.size(); ++i) {
    for (auto& [name, g] : per[i]) total.at(name) += g;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& [name, g] : total) g *= inv;
  double sum = 0.0;
  for (double l : losses) sum += l;
  return {sum * inv, std::move(total)};
}

/// v <- momentum*v - lr*(g + weight_decay*w); w <- w + v.
inline void sgd_apply(Tensor& w, const Tensor& g, Tensor& v, const SgdConfig& cfg, double lr) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = cfg.momentum * v[i] - lr * (g[i] + cfg.weight_decay * w[i]);
    w[i] += v[i];
  }
}

/// One momentum-SGD step with weight decay. Returns the batch's mean loss
/// (evaluated before the update).
inline double sgd_step(StagedNetwork& net, std::span<const Sample* const> batch, const LossKind& loss,
                       const SgdConfig& cfg, const FreezeMask& mask, SgdState& state,
                       double lr_scale = 1.0) {
  require(!batch.empty(), ErrorCode::kInvalidArgument, "sgd_step: empty batch");
  auto [mean_loss, grads] = batch_gradients(net, batch, loss);
  if (!std::isfinite(mean_loss)) {
    std::string ids;
    for (const Sample* s : batch) ids += (ids.empty() ? "" : ",") + std::to_string(s->id);
    fail(ErrorCode::kNonFinite, "non-finite loss (lr=" + format_double(cfg.learning_rate * lr_scale) +
                                    ", batch ids=" + ids + ")");
  }
  const double lr = cfg.learning_rate * lr_scale;
  net.for_each_param([&](const std::string& name, Tensor& w) {
    if (mask.zero_pinned.count(name)) {
      w.fill(0.0);
      return;
    }
    if (mask.is_frozen(name)) return;
    const auto it = grads.find(name);
    if (it == grads.end()) return;  // frozen basis: no gradient
    sgd_apply(w, it->second, state.velocity.try_emplace(name, w.shape()).first->second, cfg, lr);
  });
  return mean_loss;
}

/// Runs `cfg.epochs` shuffled passes over `data`. Shuffle order depends only on
/// (seed, phase name, epoch).
inline void train_phase(StagedNetwork& net, const Dataset& data, const LossKind& loss,
                        const SgdConfig& cfg, const FreezeMask& mask, const std::string& phase,
                        std::vector<LossRow>& report, double lr_scale = 1.0,
                        const TrainHooks& hooks = {}) {
  cfg.validate();
  require(!data.empty(), ErrorCode::kInvalidArgument, "train phase '" + phase + "' has no samples");
  SgdState state;
  std::vector<std::size_t> order(data.size());
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double scale = epoch > 0 && epoch == cfg.epochs - 1 ? lr_scale * cfg.last_epoch_lr_scale : lr_scale;
    std::iota(order.begin(), order.end(), 0);
    Rng rng(sub_seed(cfg.seed, "shuffle." + phase, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&data[order[i]]);
      if (hooks.on_step) hooks.on_step(phase, StepEvent::kBefore, net);
      const double l = sgd_step(net, batch, loss, cfg, mask, state, scale);
      if (hooks.on_step) hooks.on_step(phase, StepEvent::kAfter, net);
      report.push_back({phase, step++, l});
    }
  }
}

/// Mask for the staged training phases. `stage` is 1-based; 0 means the base
/// fine-tuning with every stage branch pinned to zero.
inline FreezeMask stage_mask(const StagedNetwork& net, int stage, bool branch_only) {
  FreezeMask m;
  net.for_each_param([&](const std::string& name, const Tensor&) {
    const int s = stage_of(name);
    if (s > stage) {
      m.pin_zero(name);
    } else if (branch_only && s != stage) {
      m.freeze(name);
    }
  });
  return m;
}

inline void randomize_stage(StagedNetwork& net, int stage) {
  init_stage_layers(net.stages[static_cast<std::size_t>(stage - 1)], net.seed,
                    static_cast<std::size_t>(stage - 1), /*round=*/1);
}

/// Stage-by-stage training: fine-tune the base network with every stage pinned to 0, then
/// for each stage t: randomize its hidden layers, train that branch alone with
/// everything earlier frozen, then train jointly.
inline void multistage_train(StagedNetwork& net, const Dataset& data, int T, const LossKind& loss,
                             const SgdConfig& cfg, std::vector<LossRow>& report,
                             const TrainHooks& hooks = {}, const std::string& prefix = "") {
  require(T >= 0 && static_cast<std::size_t>(T) <= net.stages.size(), ErrorCode::kInvalidArgument,
          "multistage_train: T=" + std::to_string(T) + " exceeds the " +
              std::to_string(net.stages.size()) + " built stage branches");
  const auto boundary = [&](const std::string& e) {
    if (hooks.on_boundary) hooks.on_boundary(e, net);
  };
  train_phase(net, data, loss, cfg, stage_mask(net, 0, false), prefix + "base", report, 1.0, hooks);
  boundary("base_done");
  for (int t = 1; t <= T; ++t) {
    const std::string s = "stage" + std::to_string(t);
    boundary(s + "_randomized_before");
    randomize_stage(net, t);
    boundary(s + "_randomized_after");
    train_phase(net, data, loss, cfg, stage_mask(net, t, true), prefix + s + ".branch", report,
                cfg.stage_lr_scale, hooks);
    boundary(s + "_branch_done");
    train_phase(net, data, loss, cfg, stage_mask(net, t, false), prefix + s + ".joint", report, 1.0,
                hooks);
    boundary(s + "_joint_done");
  }
}

// ---------------------------------------------------------------------------
// Schedules

enum class ScheduleKind { kPlain, kMultiStage, kSchemeOne, kSchemeTwo };

inline ScheduleKind parse_schedule(const std::string& s) {
  if (s == "plain") return ScheduleKind::kPlain;
  if (s == "multistage") return ScheduleKind::kMultiStage;
  if (s == "scheme1") return ScheduleKind::kSchemeOne;
  if (s == "scheme2") return ScheduleKind::kSchemeTwo;
  fail(ErrorCode::kInvalidArgument, "unknown schedule '" + s + "' (plain|multistage|scheme1|scheme2)");
}

inline std::string schedule_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::kPlain: return "plain";
    case ScheduleKind::kMultiStage: return "multistage";
    case ScheduleKind::kSchemeOne: return "scheme1";
    case ScheduleKind::kSchemeTwo: return "scheme2";
  }
  return "plain";
}

struct LabeledSet {
  std::string label_set;  // phases with different label sets get a fresh classifier
  int num_classes = 0;
  Dataset samples;
};

/// Datasets a schedule may draw on: whole images with coarse labels, object
/// crops at the source label set, and detection crops (with background) at the
/// target label set.
struct ScheduleData {
  LabeledSet whole_image;
  LabeledSet object_crops;
  LabeledSet detection;
};

struct PhasePlan {
  std::string name;
  const LabeledSet* data;
  LossKind loss;
  bool final_phase;
};

inline std::vector<PhasePlan> plan_phases(ScheduleKind kind, const ScheduleData& d, const LossKind& final_loss) {
  std::vector<PhasePlan> p;
  if (kind == ScheduleKind::kSchemeOne) p.push_back({"image", &d.whole_image, LossKind::softmax(), false});
  if (kind == ScheduleKind::kSchemeOne || kind == ScheduleKind::kSchemeTwo) {
    p.push_back({"object", &d.object_crops, LossKind::softmax(), false});
  }
  p.push_back({"detection", &d.detection, final_loss, true});
  return p;
}

inline void check_labels(const LabeledSet& s, const std::string& phase) {
  for (const Sample& x : s.samples) {
    if (const auto* k = std::get_if<std::size_t>(&x.target)) {
      require(*k < static_cast<std::size_t>(s.num_classes), ErrorCode::kSchemaViolation,
              "phase '" + phase + "': sample " + std::to_string(x.id) + " has label " + std::to_string(*k) +
                  " outside label set '" + s.label_set + "' of size " + std::to_string(s.num_classes));
    } else {
      require(std::get<Tensor>(x.target).size() == static_cast<std::size_t>(s.num_classes),
              ErrorCode::kSchemaViolation,
              "phase '" + phase + "': target vector length does not match label set '" + s.label_set + "'");
    }
  }
}

/// Runs the phases of a schedule in order. Each phase starts from the previous
/// one's parameters; the classifier is re-initialized whenever the label set
/// changes. The last phase uses stage-by-stage training with `stages` branches
/// (0 = plain fine-tuning).
inline void run_schedule(StagedNetwork& net, ScheduleKind kind, int stages, const ScheduleData& data,
                         const SgdConfig& cfg, std::vector<LossRow>& report, const TrainHooks& hooks = {}) {
  if (kind == ScheduleKind::kMultiStage) {
    require(stages >= 1, ErrorCode::kInvalidArgument, "multistage schedule needs T >= 1");
  }
  if (kind == ScheduleKind::kPlain) stages = 0;
  const std::vector<PhasePlan> phases = plan_phases(kind, data, net.config.loss);
  std::string current = "";
  std::uint64_t round = 1;
  for (const PhasePlan& ph : phases) {
    check_labels(*ph.data, ph.name);
    if (ph.data->label_set != current) {
      if (!current.empty() || ph.data->num_classes != net.config.num_classes) {
        reset_classifier(net, ph.data->num_classes, net.seed, round++);
      }
      current = ph.data->label_set;
    } else {
      require(ph.data->num_classes == net.config.num_classes, ErrorCode::kSchemaViolation,
              "phase '" + ph.name + "' keeps label set '" + current + "' but changes its size");
    }
    SgdConfig pc = cfg;
    pc.seed = sub_seed(cfg.seed, "phase." + ph.name);
    if (ph.final_phase) {
      multistage_train(net, ph.data->samples, stages, ph.loss, pc, report, hooks, ph.name + ".");
    } else {
      train_phase(net, ph.data->samples, ph.loss, pc, stage_mask(net, 0, false), ph.name, report, 1.0, hooks);
    }
  }
  net.schedule_id = schedule_name(kind) + (stages > 0 ? "-T" + std::to_string(stages) : "");
}

inline void write_phase_report(const std::vector<LossRow>& rows, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write phase report " + path);
  out << "phase,step,loss\n";
  for (const LossRow& r : rows) out << r.phase << ',' << r.step << ',' << format_double(r.loss) << '\n';
}

}  // namespace defnet
