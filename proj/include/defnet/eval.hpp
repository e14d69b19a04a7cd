#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "defnet/data.hpp"
#include "defnet/geometry.hpp"

namespace defnet {

struct Detection {
  std::string image_id;
  BoundingBox box;
  int class_id = 0;
  double confidence = 0.0;
  std::size_t id = 0;  // breaks confidence ties (lower first)
};

struct GroundTruth {
  std::string image_id;
  BoundingBox box;
  int class_id = 0;
};
using GroundTruthSet = std::vector<GroundTruth>;

inline GroundTruthSet ground_truth(const DatasetManifest& m, const std::string& split) {
  GroundTruthSet g;
  for (const ImageRecord* r : m.split(split)) {
    for (const ObjectRecord& o : r->objects) g.push_back({r->id, o.box, o.class_id});
  }
  return g;
}

struct PrCurve {
  std::vector<double> recall;
  std::vector<double> precision;
  double ap = 0.0;
};

/// Fraction of ground-truth boxes covered by some proposal at IoU >= thr.
/// With no ground truth the recall is 1 and a warning is emitted.
inline double proposal_recall(const std::vector<ScoredProposal>& proposals, const GroundTruthSet& gts,
                              double iou_thr = 0.5) {
  if (gts.empty()) {
    warn("proposal_recall: no ground-truth boxes, recall defined as 1");
    return 1.0;
  }
  std::map<std::string, std::vector<const BoundingBox*>> by_image;
  for (const ScoredProposal& p : proposals) by_image[p.image_id].push_back(&p.box);
  std::size_t hit = 0;
  for (const GroundTruth& g : gts) {
    const auto it = by_image.find(g.image_id);
    if (it == by_image.end()) continue;
    for (const BoundingBox* b : it->second) {
      if (iou(*b, g.box) >= iou_thr) {
        ++hit;
        break;
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(gts.size());
}

inline void sort_by_confidence(std::vector<const Detection*>& dets) {
  std::sort(dets.begin(), dets.end(), [](const Detection* a, const Detection* b) {
    if (a->confidence != b->confidence) return a->confidence > b->confidence;
    return a->id < b->id;
  });
}

/// Single-class AP. Detections are visited in descending confidence; each is
/// matched to its best-overlapping ground truth in the same image (lowest index
/// on IoU ties) and counts as a true positive if that overlap reaches
/// `iou_thr` and the ground truth is not matched yet. AP is the area under the
/// precision envelope at every recall step (all-points interpolation).
inline PrCurve average_precision(const std::vector<Detection>& dets, const GroundTruthSet& gts,
                                 double iou_thr = 0.5) {
  PrCurve curve;
  std::map<std::string, std::vector<std::size_t>> gt_by_image;
  for (std::size_t i = 0; i < gts.size(); ++i) gt_by_image[gts[i].image_id].push_back(i);
  std::vector<const Detection*> order;
  for (const Detection& d : dets) order.push_back(&d);
  sort_by_confidence(order);

  std::vector<bool> matched(gts.size(), false);
  std::size_t tp = 0;
  const double n_gt = static_cast<double>(gts.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Detection& d = *order[k];
    double best = -1.0;
    std::size_t best_i = 0;
    const auto it = gt_by_image.find(d.image_id);
    if (it != gt_by_image.end()) {
      for (std::size_t gi : it->second) {
        const double o = iou(d.box, gts[gi].box);
        if (o > best) {
          best = o;
          best_i = gi;
        }
      }
    }
    if (best >= iou_thr && !matched[best_i]) {
      matched[best_i] = true;
      ++tp;
    }
    curve.recall.push_back(n_gt > 0 ? static_cast<double>(tp) / n_gt : 0.0);
    curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
  }
  if (gts.empty()) return curve;
  double envelope = 0.0;
  std::vector<double> interp(curve.precision.size());
  for (std::size_t k = curve.precision.size(); k-- > 0;) {
    envelope = std::max(envelope, curve.precision[k]);
    interp[k] = envelope;
  }
  double prev_recall = 0.0;
  for (std::size_t k = 0; k < curve.recall.size(); ++k) {
    curve.ap += (curve.recall[k] - prev_recall) * interp[k];
    prev_recall = curve.recall[k];
  }
  return curve;
}

struct MapResult {
  double map = 0.0;
  std::map<int, double> per_class;
};

/// Unweighted mean of per-class AP over the classes present in the ground
/// truth (optionally restricted to `classes`).
inline MapResult mean_ap(const std::vector<Detection>& dets, const GroundTruthSet& gts,
                         const std::vector<int>& classes = {}, double iou_thr = 0.5) {
  std::map<int, GroundTruthSet> gt_by_class;
  for (const GroundTruth& g : gts) gt_by_class[g.class_id].push_back(g);
  std::map<int, std::vector<Detection>> det_by_class;
  for (const Detection& d : dets) det_by_class[d.class_id].push_back(d);
  MapResult r;
  for (const auto& [k, g] : gt_by_class) {
    if (!classes.empty() && std::find(classes.begin(), classes.end(), k) == classes.end()) continue;
    r.per_class[k] = average_precision(det_by_class[k], g, iou_thr).ap;
  }
  if (r.per_class.empty()) return r;
  for (const auto& [k, ap] : r.per_class) r.map += ap;
  r.map /= static_cast<double>(r.per_class.size());
  return r;
}

inline void write_ap_report(const MapResult& r, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write report " + path);
  out << "class_id,ap\n";
  for (const auto& [k, ap] : r.per_class) out << k << ',' << format_double(ap) << '\n';
  out << "mAP," << format_double(r.map) << '\n';
}

inline void write_pr_curve(const PrCurve& c, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write curve " + path);
  out << "recall,precision\n";
  for (std::size_t i = 0; i < c.recall.size(); ++i) {
    out << format_double(c.recall[i]) << ',' << format_double(c.precision[i]) << '\n';
  }
}

// Detections file: JSON lines {image_id, box, class_id, confidence}.

inline void save_detections(const std::vector<Detection>& dets, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write detections " + path);
  for (const Detection& d : dets) {
    out << nlohmann::json{{"image_id", d.image_id},
                          {"box", box_to_json(d.box)},
                          {"class_id", d.class_id},
                          {"confidence", d.confidence}}
               .dump()
        << '\n';
  }
}

inline std::vector<Detection> load_detections(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kMissingFile, "cannot open detections " + path);
  std::vector<Detection> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = "detections " + path + " line " + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorCode::kMalformedFile, where + ": " + e.what());
    }
    try {
      Detection d{j.at("image_id").get<std::string>(), box_from_json(j.at("box")), j.at("class_id").get<int>(),
                  j.at("confidence").get<double>(), out.size()};
      require(std::isfinite(d.confidence), ErrorCode::kSchemaViolation, where + ": non-finite confidence");
      out.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kSchemaViolation, where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace defnet
