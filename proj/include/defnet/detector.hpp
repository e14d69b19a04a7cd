#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "defnet/ensemble.hpp"
#include "defnet/pipeline.hpp"

namespace defnet {

struct DetectOptions {
  bool rejection = true;
  bool subbox = true;
  bool context = true;
  bool refine = true;
  bool nms = true;
  double reject_threshold = kDefaultRejectThreshold;
  double nms_iou = kDefaultNmsIou;
  bool argmax_only = false;             // one detection per box instead of one per (box, class)
  bool context_after_averaging = false;

  std::string name() const {
    std::string s;
    const auto add = [&](bool on, const char* n) {
      if (on) s += std::string(s.empty() ? "" : "+") + n;
    };
    add(rejection, "rejection");
    add(subbox, "subbox");
    add(context, "context");
    add(refine, "refine");
    add(nms, "nms");
    return s.empty() ? "scoring" : s;
  }
};

/// A trained network together with the linear models stacked on its outputs.
struct DetectorMember {
  std::string id;
  StagedNetwork net;
  std::optional<LinearClassifier> subbox;          // on [f0, fmax, favg]
  std::optional<LinearClassifier> context_raw;     // on [network scores, context scores]
  std::optional<LinearClassifier> context_subbox;  // on [sub-box scores, context scores]
  std::optional<BoxRegressor> regressor;
};

struct Detector {
  std::vector<DetectorMember> members;
  std::optional<StagedNetwork> first_pass;   // cheap scorer used for rejection
  std::optional<StagedNetwork> context_net;  // whole-image scene classifier
  std::optional<EnsembleSpec> ensemble;      // default: plain mean over all members

  int num_classes() const { return members.at(0).net.config.num_classes; }

  /// Turns off stages whose models are missing (with a warning) so a partial
  /// detector still runs.
  DetectOptions supported(DetectOptions o) const {
    const auto drop = [](bool& flag, bool available, const char* what) {
      if (flag && !available) {
        warn(std::string("detector has no ") + what + " model, stage disabled");
        flag = false;
      }
    };
    bool sub = true, ctx = context_net.has_value(), reg = true;
    for (const DetectorMember& m : members) {
      sub = sub && m.subbox.has_value();
      ctx = ctx && m.context_raw.has_value() && (!o.subbox || !sub || m.context_subbox.has_value());
      reg = reg && m.regressor.has_value();
    }
    drop(o.rejection, first_pass.has_value(), "first-pass");
    drop(o.subbox, sub, "sub-box");
    drop(o.context, ctx, "context");
    drop(o.refine, reg, "box regression");
    return o;
  }
};

/// Everything computed for one image.
struct ImageResult {
  std::vector<Detection> detections;
  std::vector<ScoredProposal> first_pass;            // all proposals with first-pass scores (empty if unused)
  std::vector<ScoredProposal> kept;                  // proposals that reached the detector
  std::vector<std::vector<Tensor>> member_scores;    // [member][kept] final per-member scores
  std::vector<Tensor> scores;                        // [kept] combined scores
};

inline Tensor whole_image_input(const StagedNetwork& net, const Tensor& image) {
  return crop_for(net, image, {0.0, 0.0, static_cast<double>(image.dim(2)), static_cast<double>(image.dim(1))});
}

inline std::vector<ScoredProposal> score_with(const StagedNetwork& net, const Tensor& image,
                                              std::vector<ScoredProposal> proposals) {
  for (ScoredProposal& p : proposals) p.scores = predict(net, crop_for(net, image, p.box));
  return proposals;
}

inline Tensor fuse_context(const LinearClassifier& fuser, const Tensor& scores, const Tensor& context) {
  return apply_or_fallback(fuser, concat({&scores, &context}), scores);
}

/// Runs the detection stages on one image: rejection, scoring, sub-box
/// re-scoring, context fusion, averaging over members, box refinement, NMS.
inline ImageResult detect(const Detector& det, const Tensor& image, const std::string& image_id,
                          const std::vector<ScoredProposal>& proposals, const DetectOptions& opt) {
  require(!det.members.empty(), ErrorCode::kInvalidArgument, "detector has no models");
  ImageResult r;
  if (opt.rejection) {
    require(det.first_pass.has_value(), ErrorCode::kInvalidArgument, "rejection needs a first-pass model");
    r.first_pass = score_with(*det.first_pass, image, proposals);
    for (const ScoredProposal& p : r.first_pass) {
      if (!is_rejected(p, opt.reject_threshold)) r.kept.push_back(p);
    }
  } else {
    r.kept = proposals;
  }
  Tensor context;
  if (opt.context) {
    require(det.context_net.has_value(), ErrorCode::kInvalidArgument, "context fusion needs a context model");
    context = predict(*det.context_net, whole_image_input(*det.context_net, image));
  }
  const double W = static_cast<double>(image.dim(2)), H = static_cast<double>(image.dim(1));
  std::vector<BoundingBox> boxes;
  for (const ScoredProposal& p : r.kept) boxes.push_back(p.box);

  FeatureStore lead_features;
  for (std::size_t m = 0; m < det.members.size(); ++m) {
    const DetectorMember& member = det.members[m];
    FeatureStore store;
    std::vector<Tensor> scores;
    for (const ScoredProposal& p : r.kept) {
      BoxScore b = score_box(member.net, image, p.box);
      scores.push_back(std::move(b.scores));
      store.emplace(p.source_id, std::move(b.feature));
    }
    if (opt.subbox) {
      // Sub-boxes are matched against the full proposal set, so rejection never
      // changes a survivor's score; rejected matches are featurized on demand.
      require(member.subbox.has_value(), ErrorCode::kInvalidArgument, "sub-box scoring needs a sub-box classifier");
      std::map<int, const ScoredProposal*> by_id;
      for (const ScoredProposal& p : proposals) by_id.emplace(p.source_id, &p);
      for (std::size_t i = 0; i < r.kept.size(); ++i) {
        for (int id : select_subbox_proposals(r.kept[i].box, proposals)) {
          if (!store.count(id)) store.emplace(id, score_box(member.net, image, by_id.at(id)->box).feature);
        }
        scores[i] = apply_or_fallback(*member.subbox, subbox_features(r.kept[i], proposals, store).combined, scores[i]);
      }
    }
    if (opt.context && !opt.context_after_averaging) {
      const auto& fuser = opt.subbox ? member.context_subbox : member.context_raw;
      require(fuser.has_value(), ErrorCode::kInvalidArgument, "context fusion needs a fusion classifier");
      for (Tensor& s : scores) s = fuse_context(*fuser, s, context);
    }
    r.member_scores.push_back(std::move(scores));
    if (m == 0) lead_features = std::move(store);
  }

  const EnsembleSpec spec = det.ensemble ? *det.ensemble
                                         : [&] {
                                             std::vector<std::size_t> all(det.members.size());
                                             for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
                                             return uniform_spec(all, det.num_classes());
                                           }();
  spec.validate(det.members.size());
  std::vector<Tensor> row(det.members.size());
  for (std::size_t i = 0; i < r.kept.size(); ++i) {
    for (std::size_t m = 0; m < det.members.size(); ++m) row[m] = r.member_scores[m][i];
    r.scores.push_back(det.members.size() == 1 ? row[0] : average_scores(row, spec.subsets));
  }
  if (opt.context && opt.context_after_averaging) {
    const auto& fuser = opt.subbox ? det.members[0].context_subbox : det.members[0].context_raw;
    require(fuser.has_value(), ErrorCode::kInvalidArgument, "context fusion needs a fusion classifier");
    for (Tensor& s : r.scores) s = fuse_context(*fuser, s, context);
  }
  if (opt.refine) {
    const auto& reg = det.members[0].regressor;
    require(reg.has_value(), ErrorCode::kInvalidArgument, "box refinement needs a regressor");
    for (std::size_t i = 0; i < r.kept.size(); ++i) {
      boxes[i] = refine_box(lead_features.at(r.kept[i].source_id), boxes[i], *reg, W, H);
    }
  }
  r.detections = to_detections(image_id, boxes, r.scores, opt.argmax_only);
  if (opt.nms) r.detections = nms(r.detections, opt.nms_iou);
  return r;
}

// ---------------------------------------------------------------------------
// Detector files: one directory with model.json plus optional side models.

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path);
  out << j.dump(1) << '\n';
  require(static_cast<bool>(out), ErrorCode::kIo, "failed writing " + path);
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kMissingFile, "cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kMalformedFile, path + ": " + e.what());
  }
}

inline void save_member_extras(const DetectorMember& m, const std::string& path) {
  nlohmann::json j = nlohmann::json::object();
  if (m.subbox) j["subbox"] = classifier_to_json(*m.subbox);
  if (m.context_raw) j["context_raw"] = classifier_to_json(*m.context_raw);
  if (m.context_subbox) j["context_subbox"] = classifier_to_json(*m.context_subbox);
  if (m.regressor) j["regressor"] = regressor_to_json(*m.regressor);
  write_json_file(j, path);
}

inline void load_member_extras(DetectorMember& m, const std::string& path) {
  const nlohmann::json j = read_json_file(path);
  if (j.contains("subbox")) m.subbox = classifier_from_json(j["subbox"]);
  if (j.contains("context_raw")) m.context_raw = classifier_from_json(j["context_raw"]);
  if (j.contains("context_subbox")) m.context_subbox = classifier_from_json(j["context_subbox"]);
  if (j.contains("regressor")) m.regressor = regressor_from_json(j["regressor"]);
}

/// Writes model.json, and when present first_pass.json, context.json and
/// scorers.json into `dir`.
inline void save_detector_dir(const Detector& det, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const DetectorMember& m = det.members.at(0);
  save_model(m.net, dir + "/model.json");
  if (det.first_pass) save_model(*det.first_pass, dir + "/first_pass.json");
  if (det.context_net) save_model(*det.context_net, dir + "/context.json");
  if (m.subbox || m.context_raw || m.context_subbox || m.regressor) save_member_extras(m, dir + "/scorers.json");
}

/// Loads one member from each directory; side models come from the first.
inline Detector load_detector_dirs(const std::vector<std::string>& dirs) {
  require(!dirs.empty(), ErrorCode::kInvalidArgument, "no model directories given");
  Detector det;
  for (const std::string& dir : dirs) {
    DetectorMember m;
    m.id = std::filesystem::path(dir).lexically_normal().string();
    while (m.id.size() > 1 && m.id.back() == '/') m.id.pop_back();
    m.net = load_model(dir + "/model.json");
    if (std::filesystem::exists(dir + "/scorers.json")) load_member_extras(m, dir + "/scorers.json");
    if (!det.members.empty()) {
      require(m.net.config.num_classes == det.num_classes(), ErrorCode::kSchemaViolation,
              "model " + dir + " has a different class count");
    }
    det.members.push_back(std::move(m));
  }
  const std::string& lead = dirs.front();
  if (std::filesystem::exists(lead + "/first_pass.json")) det.first_pass = load_model(lead + "/first_pass.json");
  if (std::filesystem::exists(lead + "/context.json")) det.context_net = load_model(lead + "/context.json");
  return det;
}

}  // namespace defnet
