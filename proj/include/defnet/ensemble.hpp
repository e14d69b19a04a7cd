#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "defnet/eval.hpp"
#include "defnet/parallel.hpp"
#include "defnet/pipeline.hpp"

namespace defnet {

/// Scores of one model on the shared proposal set of a pool.
struct PoolMember {
  std::string id;
  std::vector<Tensor> scores;  // one [K] tensor per pool proposal
  std::string fingerprint;     // config summary, informational
};

/// Models scored on an identical proposal set.
struct ModelPool {
  std::vector<ScoredProposal> proposals;  // boxes only; scores live in the members
  std::vector<PoolMember> members;
  int num_classes = 0;

  void validate() const {
    require(!members.empty(), ErrorCode::kInvalidArgument, "model pool is empty");
    for (const PoolMember& m : members) {
      require(m.scores.size() == proposals.size(), ErrorCode::kShapeMismatch,
              "pool member " + m.id + " was not scored on the pool's proposal set");
      for (const Tensor& s : m.scores) {
        require(s.size() == static_cast<std::size_t>(num_classes), ErrorCode::kShapeMismatch,
                "pool member " + m.id + " has scores of the wrong length");
      }
    }
  }
};

enum class EnsembleMode { kAllClass, kPerClass };

inline std::string ensemble_mode_name(EnsembleMode m) { return m == EnsembleMode::kAllClass ? "all-cls" : "per-cls"; }

inline EnsembleMode parse_ensemble_mode(const std::string& s) {
  if (s == "all-cls") return EnsembleMode::kAllClass;
  if (s == "per-cls") return EnsembleMode::kPerClass;
  fail(ErrorCode::kInvalidArgument, "unknown ensemble mode '" + s + "' (expected all-cls or per-cls)");
}

/// Model subset used for each class (all identical in all-class mode).
/// Subsets hold member indices in ascending order.
struct EnsembleSpec {
  EnsembleMode mode = EnsembleMode::kAllClass;
  std::vector<std::vector<std::size_t>> subsets;  // [K]
  double selection_map = 0.0;

  void validate(std::size_t pool_size) const {
    require(!subsets.empty(), ErrorCode::kSchemaViolation, "ensemble spec has no classes");
    for (const auto& s : subsets) {
      require(!s.empty(), ErrorCode::kSchemaViolation, "ensemble spec has an empty model subset");
      for (std::size_t m : s) {
        require(m < pool_size, ErrorCode::kSchemaViolation, "ensemble spec refers to model " + std::to_string(m) +
                                                                " outside a pool of " + std::to_string(pool_size));
      }
    }
  }
};

inline EnsembleSpec uniform_spec(const std::vector<std::size_t>& subset, int num_classes) {
  std::vector<std::size_t> s = subset;
  std::sort(s.begin(), s.end());
  return {EnsembleMode::kAllClass, std::vector<std::vector<std::size_t>>(static_cast<std::size_t>(num_classes), s), 0.0};
}

/// Mean of the values; summed in sorted order so the result does not depend
/// on member order.
inline double order_free_mean(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Per class k, the mean of member scores over subsets[k].
inline Tensor average_scores(const std::vector<Tensor>& members, const std::vector<std::vector<std::size_t>>& subsets) {
  require(!members.empty(), ErrorCode::kInvalidArgument, "average_scores needs at least one member");
  const std::size_t K = members[0].size();
  for (const Tensor& m : members) {
    require(m.size() == K, ErrorCode::kShapeMismatch, "average_scores: members disagree on the class count");
  }
  require(subsets.size() == K, ErrorCode::kShapeMismatch, "average_scores: need one subset per class");
  Tensor out({K});
  std::vector<double> vals;
  for (std::size_t k = 0; k < K; ++k) {
    require(!subsets[k].empty(), ErrorCode::kInvalidArgument,
            "average_scores: empty model subset for class " + std::to_string(k));
    vals.clear();
    for (std::size_t m : subsets[k]) {
      require(m < members.size(), ErrorCode::kInvalidArgument, "average_scores: member index out of range");
      vals.push_back(members[m][k]);
    }
    out[k] = order_free_mean(vals);
  }
  return out;
}

inline std::vector<Tensor> ensemble_scores(const ModelPool& pool, const EnsembleSpec& spec) {
  spec.validate(pool.members.size());
  std::vector<Tensor> out;
  std::vector<Tensor> row(pool.members.size());
  for (std::size_t p = 0; p < pool.proposals.size(); ++p) {
    for (std::size_t m = 0; m < pool.members.size(); ++m) row[m] = pool.members[m].scores[p];
    out.push_back(average_scores(row, spec.subsets));
  }
  return out;
}

/// Detections of class k from the averaged scores of `subset`, after NMS.
inline std::vector<Detection> class_detections(const ModelPool& pool, int k, const std::vector<std::size_t>& subset,
                                               double nms_iou) {
  std::vector<Detection> dets;
  std::vector<double> vals;
  for (std::size_t p = 0; p < pool.proposals.size(); ++p) {
    vals.clear();
    for (std::size_t m : subset) vals.push_back(pool.members[m].scores[p][static_cast<std::size_t>(k)]);
    dets.push_back({pool.proposals[p].image_id, pool.proposals[p].box, k, order_free_mean(vals), p});
  }
  return nms(dets, nms_iou);
}

inline double class_ap(const ModelPool& pool, int k, const std::vector<std::size_t>& subset,
                       const GroundTruthSet& class_gts, double nms_iou) {
  return average_precision(class_detections(pool, k, subset, nms_iou), class_gts).ap;
}

inline std::map<int, GroundTruthSet> split_by_class(const GroundTruthSet& gts) {
  std::map<int, GroundTruthSet> out;
  for (const GroundTruth& g : gts) out[g.class_id].push_back(g);
  return out;
}

/// Per-class AP of `spec` on the pool, over the classes present in `gts`.
inline MapResult evaluate_spec(const ModelPool& pool, const EnsembleSpec& spec, const GroundTruthSet& gts,
                               double nms_iou = kDefaultNmsIou) {
  spec.validate(pool.members.size());
  MapResult r;
  for (const auto& [k, g] : split_by_class(gts)) {
    if (k < 0 || k >= pool.num_classes) continue;
    r.per_class[k] = class_ap(pool, k, spec.subsets[static_cast<std::size_t>(k)], g, nms_iou);
  }
  for (const auto& [k, ap] : r.per_class) r.map += ap;
  if (!r.per_class.empty()) r.map /= static_cast<double>(r.per_class.size());
  return r;
}

struct GreedyResult {
  EnsembleSpec spec;
  std::vector<double> trace;  // objective after each addition
};

/// Forward greedy search: repeatedly add the candidate with the best objective
/// (lowest index on ties) and stop once no addition strictly improves it.
template <class Objective>
std::pair<std::vector<std::size_t>, std::vector<double>> forward_greedy(std::size_t pool_size, Objective&& objective) {
  std::vector<std::size_t> chosen;
  std::vector<double> trace;
  double current = -1.0;
  while (chosen.size() < pool_size) {
    std::vector<std::size_t> candidates;
    for (std::size_t m = 0; m < pool_size; ++m) {
      if (std::find(chosen.begin(), chosen.end(), m) == chosen.end()) candidates.push_back(m);
    }
    std::vector<double> value(candidates.size());
    parallel_for(candidates.size(), [&](std::size_t i) {
      std::vector<std::size_t> s = chosen;
      s.push_back(candidates[i]);
      std::sort(s.begin(), s.end());
      value[i] = objective(s);
    });
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates.size(); ++i) {
      if (value[i] > value[best]) best = i;
    }
    if (!chosen.empty() && value[best] <= current) break;
    chosen.push_back(candidates[best]);
    std::sort(chosen.begin(), chosen.end());
    current = value[best];
    trace.push_back(current);
  }
  return {chosen, trace};
}

/// One model subset shared by every class, chosen to maximize mAP.
inline GreedyResult greedy_select_all_class(const ModelPool& pool, const GroundTruthSet& gts,
                                            double nms_iou = kDefaultNmsIou) {
  pool.validate();
  const auto by_class = split_by_class(gts);
  require(!by_class.empty(), ErrorCode::kInvalidArgument, "ensemble selection split has no ground truth");
  auto [subset, trace] = forward_greedy(pool.members.size(), [&](const std::vector<std::size_t>& s) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& [k, g] : by_class) {
      if (k < 0 || k >= pool.num_classes) continue;
      total += class_ap(pool, k, s, g, nms_iou);
      ++n;
    }
    return n ? total / static_cast<double>(n) : 0.0;
  });
  GreedyResult r{uniform_spec(subset, pool.num_classes), std::move(trace)};
  r.spec.selection_map = r.trace.back();
  return r;
}

/// Independent greedy search per class. A class keeps the all-class subset
/// when that scores higher, so every per-class AP is at least the all-class
/// AP on the selection split.
inline GreedyResult greedy_select_per_class(const ModelPool& pool, const GroundTruthSet& gts,
                                            double nms_iou = kDefaultNmsIou) {
  const GreedyResult all = greedy_select_all_class(pool, gts, nms_iou);
  GreedyResult r{all.spec, {}};
  r.spec.mode = EnsembleMode::kPerClass;
  for (const auto& [k, g] : split_by_class(gts)) {
    if (k < 0 || k >= pool.num_classes) continue;
    const auto objective = [&](const std::vector<std::size_t>& s) { return class_ap(pool, k, s, g, nms_iou); };
    auto [subset, trace] = forward_greedy(pool.members.size(), objective);
    auto& slot = r.spec.subsets[static_cast<std::size_t>(k)];
    if (objective(subset) >= objective(slot)) slot = subset;
  }
  r.spec.selection_map = evaluate_spec(pool, r.spec, gts, nms_iou).map;
  r.trace.push_back(r.spec.selection_map);
  return r;
}

// EnsembleSpec file: {mode, subsets: {"all": [...]} or {"<class>": [...]}, selection_map},
// with model ids resolved against the pool's member list.

inline nlohmann::json spec_to_json(const EnsembleSpec& spec, const std::vector<std::string>& ids) {
  const auto names = [&](const std::vector<std::size_t>& s) {
    std::vector<std::string> out;
    for (std::size_t m : s) out.push_back(ids.at(m));
    return out;
  };
  nlohmann::json subsets = nlohmann::json::object();
  if (spec.mode == EnsembleMode::kAllClass) {
    subsets["all"] = names(spec.subsets.at(0));
  } else {
    for (std::size_t k = 0; k < spec.subsets.size(); ++k) subsets[std::to_string(k)] = names(spec.subsets[k]);
  }
  return {{"mode", ensemble_mode_name(spec.mode)},
          {"num_classes", spec.subsets.size()},
          {"subsets", subsets},
          {"selection_map", spec.selection_map}};
}

inline EnsembleSpec spec_from_json(const nlohmann::json& j, const std::vector<std::string>& ids) {
  EnsembleSpec spec;
  try {
    spec.mode = parse_ensemble_mode(j.at("mode").get<std::string>());
    const auto K = j.at("num_classes").get<std::size_t>();
    spec.selection_map = j.value("selection_map", 0.0);
    const auto resolve = [&](const nlohmann::json& names) {
      std::vector<std::size_t> s;
      for (const auto& n : names) {
        const auto it = std::find(ids.begin(), ids.end(), n.get<std::string>());
        require(it != ids.end(), ErrorCode::kSchemaViolation,
                "ensemble spec names unknown model '" + n.get<std::string>() + "'");
        s.push_back(static_cast<std::size_t>(it - ids.begin()));
      }
      std::sort(s.begin(), s.end());
      return s;
    };
    const auto& subsets = j.at("subsets");
    if (spec.mode == EnsembleMode::kAllClass) {
      spec.subsets.assign(K, resolve(subsets.at("all")));
    } else {
      for (std::size_t k = 0; k < K; ++k) spec.subsets.push_back(resolve(subsets.at(std::to_string(k))));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchemaViolation, std::string("ensemble spec: ") + e.what());
  }
  spec.validate(ids.size());
  return spec;
}

inline void write_trace(const std::vector<double>& trace, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write trace " + path);
  out << "step,map\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out << i + 1 << ',' << format_double(trace[i]) << '\n';
}

}  // namespace defnet
