#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "defnet/data.hpp"
#include "defnet/eval.hpp"
#include "defnet/image.hpp"
#include "defnet/network.hpp"
#include "defnet/rng.hpp"

namespace defnet {

inline constexpr double kDefaultRejectThreshold = -1.1;
inline constexpr double kDefaultNmsIou = 0.3;

// ---------------------------------------------------------------------------
// Rejection

inline double max_score(const Tensor& s) { return *std::max_element(s.values().begin(), s.values().end()); }

/// True when every class score of the proposal falls below `threshold`.
inline bool is_rejected(const ScoredProposal& p, double threshold) {
  require(!p.scores.empty(), ErrorCode::kInvalidArgument,
          "proposal " + p.image_id + "#" + std::to_string(p.source_id) + " has no scores to reject on");
  return max_score(p.scores) < threshold;
}

struct RejectionSplit {
  std::vector<ScoredProposal> kept;
  std::vector<ScoredProposal> rejected;
};

inline RejectionSplit reject_proposals(const std::vector<ScoredProposal>& proposals,
                                       double threshold = kDefaultRejectThreshold) {
  RejectionSplit r;
  for (const ScoredProposal& p : proposals) (is_rejected(p, threshold) ? r.rejected : r.kept).push_back(p);
  return r;
}

struct SweepRow {
  double threshold = 0.0;
  double rejection_rate = 0.0;
  double recall = 0.0;
};

/// Rejection rate and surviving-proposal recall at each threshold.
inline std::vector<SweepRow> rejection_sweep(const std::vector<ScoredProposal>& proposals, const GroundTruthSet& gts,
                                             std::vector<double> thresholds, double iou_thr = 0.5) {
  std::sort(thresholds.begin(), thresholds.end());
  std::vector<SweepRow> rows;
  for (double t : thresholds) {
    const RejectionSplit s = reject_proposals(proposals, t);
    const double rate =
        proposals.empty() ? 0.0 : static_cast<double>(s.rejected.size()) / static_cast<double>(proposals.size());
    rows.push_back({t, rate, proposal_recall(s.kept, gts, iou_thr)});
  }
  return rows;
}

/// Largest swept threshold whose recall stays within `max_drop` of the
/// unfiltered recall (the lowest candidate when none qualifies).
inline double calibrate_threshold(const std::vector<ScoredProposal>& proposals, const GroundTruthSet& gts,
                                  const std::vector<double>& candidates, double max_drop) {
  require(!candidates.empty(), ErrorCode::kInvalidArgument, "threshold calibration needs candidates");
  const double base = proposal_recall(proposals, gts);
  const auto rows = rejection_sweep(proposals, gts, candidates);
  double best = rows.front().threshold;
  for (const SweepRow& r : rows) {
    if (base - r.recall <= max_drop) best = r.threshold;
  }
  return best;
}

inline void write_sweep_report(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write sweep report " + path);
  out << "threshold,rejection_rate,recall\n";
  for (const SweepRow& r : rows) {
    out << format_double(r.threshold) << ',' << format_double(r.rejection_rate) << ',' << format_double(r.recall)
        << '\n';
  }
}

// ---------------------------------------------------------------------------
// Box scoring

inline Tensor crop_for(const StagedNetwork& net, const Tensor& image, const BoundingBox& box) {
  return crop_and_warp(image, box, static_cast<std::size_t>(net.config.height),
                       static_cast<std::size_t>(net.config.width));
}

struct BoxScore {
  Tensor scores;   // [K]
  Tensor feature;  // [F] penultimate activations
};

inline BoxScore score_box(const StagedNetwork& net, const Tensor& image, const BoundingBox& box) {
  ForwardCache c = forward(net, crop_for(net, image, box));
  return {std::move(c.scores), std::move(c.feature)};
}

// ---------------------------------------------------------------------------
// Sub-box features

/// Features of scored proposals within one image, keyed by proposal id.
using FeatureStore = std::map<int, Tensor>;

struct SubboxFeature {
  std::array<int, 4> selected{};  // proposal id chosen for each corner sub-box
  Tensor combined;                // [f0, elementwise max, elementwise mean]
};

/// For each corner sub-box of `root`, the candidate with the highest IoU
/// (lowest id on ties).
inline std::array<int, 4> select_subbox_proposals(const BoundingBox& root,
                                                  const std::vector<ScoredProposal>& candidates) {
  require(!candidates.empty(), ErrorCode::kInvalidArgument, "sub-box selection needs a non-empty proposal set");
  std::array<int, 4> ids{};
  const auto subs = corner_subboxes(root);
  for (std::size_t s = 0; s < 4; ++s) {
    double best = -1.0;
    int best_id = std::numeric_limits<int>::max();
    for (const ScoredProposal& p : candidates) {
      const double o = iou(subs[s], p.box);
      if (o > best || (o == best && p.source_id < best_id)) {
        best = o;
        best_id = p.source_id;
      }
    }
    ids[s] = best_id;
  }
  return ids;
}

inline const Tensor& stored_feature(const FeatureStore& store, int id) {
  const auto it = store.find(id);
  require(it != store.end(), ErrorCode::kInvalidArgument, "feature store has no entry for proposal " + std::to_string(id));
  return it->second;
}

inline SubboxFeature subbox_features(const ScoredProposal& root, const std::vector<ScoredProposal>& candidates,
                                     const FeatureStore& store) {
  SubboxFeature r;
  r.selected = select_subbox_proposals(root.box, candidates);
  const Tensor& f0 = stored_feature(store, root.source_id);
  const std::size_t F = f0.size();
  Tensor fmax({F}, -std::numeric_limits<double>::infinity()), favg({F});
  for (int id : r.selected) {
    const Tensor& f = stored_feature(store, id);
    require(f.size() == F, ErrorCode::kShapeMismatch, "feature store entries differ in length");
    for (std::size_t i = 0; i < F; ++i) {
      fmax[i] = std::max(fmax[i], f[i]);
      favg[i] += f[i];
    }
  }
  favg *= 0.25;
  r.combined = concat({&f0, &fmax, &favg});
  return r;
}

// ---------------------------------------------------------------------------
// One-vs-all linear classifiers

/// Per-class linear scorers over standardized inputs. Classes without
/// positive training examples are left untrained.
struct LinearClassifier {
  Tensor weights;  // [K, D]
  Tensor bias;     // [K]
  Tensor mean;     // [D]
  Tensor scale;    // [D], multiplies (x - mean)
  std::vector<int> trained;

  std::size_t num_classes() const { return weights.dim(0); }
  std::size_t input_size() const { return weights.dim(1); }
  bool is_trained(std::size_t k) const { return trained.at(k) != 0; }

  Tensor standardize(const Tensor& x) const {
    require(x.size() == input_size(), ErrorCode::kShapeMismatch,
            "linear classifier expects " + std::to_string(input_size()) + " inputs, got " + std::to_string(x.size()));
    Tensor z({x.size()});
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = (x[i] - mean[i]) * scale[i];
    return z;
  }

  Tensor apply(const Tensor& x) const {
    const Tensor z = standardize(x);
    const auto K = static_cast<Eigen::Index>(num_classes()), D = static_cast<Eigen::Index>(input_size());
    Tensor out = bias;
    VecMap(out.data().data(), K).noalias() +=
        ConstMatMap(weights.data().data(), K, D) * ConstVecMap(z.data().data(), D);
    return out;
  }

  /// Weight on raw input `i` for class `k` (standardization folded in).
  double raw_weight(std::size_t k, std::size_t i) const { return weights.at(k, i) * scale[i]; }
};

struct LinearTrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double l2 = 1e-4;
  int epochs = 30;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

struct LinearTrainResult {
  LinearClassifier classifier;
  double final_loss = 0.0;  // mean hinge loss over the training set, regularizer excluded
};

/// Trains a one-vs-all hinge classifier; `labels[i]` is a class id or -1 for
/// background.
inline LinearTrainResult train_linear_ova(const std::vector<Tensor>& inputs, const std::vector<int>& labels,
                                          int num_classes, const LinearTrainConfig& cfg,
                                          const std::string& what = "classifier") {
  require(!inputs.empty() && inputs.size() == labels.size(), ErrorCode::kInvalidArgument,
          what + ": need one label per training input");
  require(num_classes >= 2, ErrorCode::kInvalidArgument, what + ": need at least two classes");
  const std::size_t N = inputs.size(), D = inputs[0].size(), K = static_cast<std::size_t>(num_classes);
  LinearClassifier c{Tensor({K, D}), Tensor({K}), Tensor({D}), Tensor({D}, 1.0), std::vector<int>(K, 0)};
  for (const Tensor& x : inputs) {
    require(x.size() == D && x.all_finite(), ErrorCode::kShapeMismatch, what + ": inputs must be finite and equal length");
    c.mean += x;
  }
  c.mean *= 1.0 / static_cast<double>(N);
  for (std::size_t i = 0; i < D; ++i) {
    double var = 0.0;
    for (const Tensor& x : inputs) var += (x[i] - c.mean[i]) * (x[i] - c.mean[i]);
    const double sd = std::sqrt(var / static_cast<double>(N));
    c.scale[i] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  for (int y : labels) {
    require(y >= -1 && y < num_classes, ErrorCode::kInvalidArgument, what + ": label out of range");
    if (y >= 0) c.trained[static_cast<std::size_t>(y)] = 1;
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (!c.trained[k]) warn(what + ": class " + std::to_string(k) + " has no training examples, classifier skipped");
  }
  std::vector<Tensor> z;
  std::vector<Target> targets;
  z.reserve(N);
  for (std::size_t n = 0; n < N; ++n) {
    z.push_back(c.standardize(inputs[n]));
    Tensor t = background_target(K);
    if (labels[n] >= 0) t[static_cast<std::size_t>(labels[n])] = 1.0;
    targets.emplace_back(std::move(t));
  }
  const LossKind hinge = LossKind::hinge();
  Tensor vw({K, D}), vb({K});
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(cfg.seed);
  const auto Ki = static_cast<Eigen::Index>(K), Di = static_cast<Eigen::Index>(D);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = cfg.learning_rate / (1.0 + epoch);
    for (std::size_t start = 0; start < N; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(N, start + static_cast<std::size_t>(cfg.batch_size));
      RowMatrix gw = RowMatrix::Zero(Ki, Di);
      Eigen::VectorXd gb = Eigen::VectorXd::Zero(Ki);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t n = order[b];
        Tensor s = c.bias;
        VecMap(s.data().data(), Ki).noalias() +=
            ConstMatMap(c.weights.data().data(), Ki, Di) * ConstVecMap(z[n].data().data(), Di);
        const LossResult l = loss_forward_backward(s, targets[n], hinge);
        const ConstVecMap g(l.grad.data().data(), Ki);
        gw.noalias() += g * ConstVecMap(z[n].data().data(), Di).transpose();
        gb += g;
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      MatMap W(c.weights.data().data(), Ki, Di), V(vw.data().data(), Ki, Di);
      VecMap B(c.bias.data().data(), Ki), VB(vb.data().data(), Ki);
      V = cfg.momentum * V - lr * (gw * inv + cfg.l2 * W);
      VB = cfg.momentum * VB - lr * gb * inv;
      W += V;
      B += VB;
      for (std::size_t k = 0; k < K; ++k) {
        if (c.trained[k]) continue;
        W.row(static_cast<Eigen::Index>(k)).setZero();
        B[static_cast<Eigen::Index>(k)] = 0.0;
      }
    }
  }
  require(c.weights.all_finite() && c.bias.all_finite(), ErrorCode::kNonFinite, what + ": training diverged");
  LinearTrainResult r{std::move(c), 0.0};
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) total += loss_forward_backward(r.classifier.apply(inputs[n]), targets[n], hinge).loss;
  r.final_loss = total / static_cast<double>(N);
  return r;
}

/// Classifier output with untrained classes falling back to `fallback`.
inline Tensor apply_or_fallback(const LinearClassifier& c, const Tensor& x, const Tensor& fallback) {
  Tensor s = c.apply(x);
  require(fallback.size() == s.size(), ErrorCode::kShapeMismatch, "fallback scores have the wrong length");
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (!c.is_trained(k)) s[k] = fallback[k];
  }
  return s;
}

inline nlohmann::json classifier_to_json(const LinearClassifier& c) {
  return {{"weights", to_record(c.weights)}, {"bias", to_record(c.bias)}, {"mean", to_record(c.mean)},
          {"scale", to_record(c.scale)}, {"trained", c.trained}};
}

inline LinearClassifier classifier_from_json(const nlohmann::json& j) {
  try {
    LinearClassifier c{from_record(j.at("weights").get<std::string>()), from_record(j.at("bias").get<std::string>()),
                       from_record(j.at("mean").get<std::string>()), from_record(j.at("scale").get<std::string>()),
                       j.at("trained").get<std::vector<int>>()};
    require(c.weights.rank() == 2 && c.bias.size() == c.weights.dim(0) && c.mean.size() == c.weights.dim(1) &&
                c.scale.size() == c.weights.dim(1) && c.trained.size() == c.weights.dim(0),
            ErrorCode::kMalformedFile, "linear classifier tensors have inconsistent shapes");
    return c;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedFile, std::string("linear classifier: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Box regression

/// Offsets (dcx/w, dcy/h, log gw/w, log gh/h) taking `box` to `target`.
inline std::array<double, 4> regression_targets(const BoundingBox& box, const BoundingBox& target) {
  return {(target.cx() - box.cx()) / box.width(), (target.cy() - box.cy()) / box.height(),
          std::log(target.width() / box.width()), std::log(target.height() / box.height())};
}

inline BoundingBox apply_offsets(const BoundingBox& box, const std::array<double, 4>& d) {
  const double cx = box.cx() + d[0] * box.width(), cy = box.cy() + d[1] * box.height();
  const double w = box.width() * std::exp(d[2]), h = box.height() * std::exp(d[3]);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

/// Ridge regression from features to the four box offsets.
struct BoxRegressor {
  Tensor weights;  // [4, D]
  Tensor bias;     // [4]

  std::array<double, 4> predict(const Tensor& feature) const {
    require(feature.size() == weights.dim(1), ErrorCode::kShapeMismatch, "box regressor input has the wrong length");
    std::array<double, 4> d{};
    for (std::size_t r = 0; r < 4; ++r) {
      double s = bias[r];
      for (std::size_t i = 0; i < feature.size(); ++i) s += weights.at(r, i) * feature[i];
      d[r] = s;
    }
    return d;
  }
};

inline BoxRegressor zero_regressor(std::size_t feature_size) { return {Tensor({4, feature_size}), Tensor({4})}; }

/// Fits offsets from `boxes[i]` to `targets[i]`; the intercept is not penalized.
inline BoxRegressor train_box_regressor(const std::vector<Tensor>& features, const std::vector<BoundingBox>& boxes,
                                        const std::vector<BoundingBox>& targets, double ridge = 1.0) {
  require(!features.empty() && features.size() == boxes.size() && boxes.size() == targets.size(),
          ErrorCode::kInvalidArgument, "box regressor needs matching features, boxes and targets");
  require(ridge >= 0.0, ErrorCode::kInvalidArgument, "ridge penalty must be >= 0");
  const auto N = static_cast<Eigen::Index>(features.size()), D = static_cast<Eigen::Index>(features[0].size());
  RowMatrix X(N, D), Y(N, 4);
  for (Eigen::Index n = 0; n < N; ++n) {
    const Tensor& f = features[static_cast<std::size_t>(n)];
    require(static_cast<Eigen::Index>(f.size()) == D, ErrorCode::kShapeMismatch, "box regressor features differ in length");
    X.row(n) = ConstVecMap(f.data().data(), D).transpose();
    const auto t = regression_targets(boxes[static_cast<std::size_t>(n)], targets[static_cast<std::size_t>(n)]);
    for (Eigen::Index r = 0; r < 4; ++r) Y(n, r) = t[static_cast<std::size_t>(r)];
  }
  const Eigen::RowVectorXd xm = X.colwise().mean(), ym = Y.colwise().mean();
  X.rowwise() -= xm;
  Y.rowwise() -= ym;
  Eigen::MatrixXd A = X.transpose() * X;
  A.diagonal().array() += ridge;
  const Eigen::MatrixXd W = A.ldlt().solve(X.transpose() * Y);  // [D, 4]
  BoxRegressor reg = zero_regressor(static_cast<std::size_t>(D));
  for (Eigen::Index r = 0; r < 4; ++r) {
    for (Eigen::Index i = 0; i < D; ++i) reg.weights.at(r, i) = W(i, r);
    reg.bias[static_cast<std::size_t>(r)] = ym[r] - xm.dot(W.col(r));
  }
  require(reg.weights.all_finite() && reg.bias.all_finite(), ErrorCode::kNonFinite, "box regression diverged");
  return reg;
}

/// Moves `box` by the regressed offsets and clamps it to the image. A
/// non-finite or degenerate result leaves the box unchanged.
inline BoundingBox refine_box(const Tensor& feature, const BoundingBox& box, const BoxRegressor& reg, double width,
                              double height) {
  const auto d = reg.predict(feature);
  const BoundingBox moved = clamp_box(apply_offsets(box, d), width, height);
  if (!moved.finite()) {
    warn("refine_box: non-finite regression output for box " + box.str() + ", keeping it");
    return box;
  }
  if (!moved.valid()) {
    warn("refine_box: refined box collapsed for " + box.str() + ", keeping it");
    return box;
  }
  return moved;
}

inline nlohmann::json regressor_to_json(const BoxRegressor& r) {
  return {{"weights", to_record(r.weights)}, {"bias", to_record(r.bias)}};
}

inline BoxRegressor regressor_from_json(const nlohmann::json& j) {
  try {
    BoxRegressor r{from_record(j.at("weights").get<std::string>()), from_record(j.at("bias").get<std::string>())};
    require(r.weights.rank() == 2 && r.weights.dim(0) == 4 && r.bias.size() == 4, ErrorCode::kMalformedFile,
            "box regressor tensors have the wrong shape");
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kMalformedFile, std::string("box regressor: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Non-maximum suppression

/// Greedy suppression in confidence order (id breaks ties): a detection is
/// dropped when it overlaps an already kept one of its class by IoU > thr.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thr = kDefaultNmsIou) {
  std::vector<const Detection*> order;
  for (const Detection& d : dets) order.push_back(&d);
  sort_by_confidence(order);
  std::vector<Detection> kept;
  for (const Detection* d : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d->class_id && k.image_id == d->image_id && iou(k.box, d->box) > iou_thr;
    });
    if (!suppressed) kept.push_back(*d);
  }
  return kept;
}

/// One detection per (box, class), or only the arg-max class per box.
inline std::vector<Detection> to_detections(const std::string& image_id, const std::vector<BoundingBox>& boxes,
                                            const std::vector<Tensor>& scores, bool argmax_only,
                                            std::size_t first_id = 0) {
  std::vector<Detection> out;
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Tensor& s = scores[i];
    require(s.all_finite(), ErrorCode::kNonFinite, "detection scores for " + image_id + " are not finite");
    if (argmax_only) {
      const auto k = static_cast<int>(std::max_element(s.values().begin(), s.values().end()) - s.values().begin());
      out.push_back({image_id, boxes[i], k, s[static_cast<std::size_t>(k)], first_id + out.size()});
    } else {
      for (std::size_t k = 0; k < s.size(); ++k) {
        out.push_back({image_id, boxes[i], static_cast<int>(k), s[k], first_id + out.size()});
      }
    }
  }
  return out;
}

}  // namespace defnet
