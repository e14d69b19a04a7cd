#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "defnet/detector.hpp"
#include "defnet/trainer.hpp"

namespace defnet {

/// How training crops are drawn from the proposals of one image.
struct SamplingConfig {
  int positives_per_image = 3;  // proposals overlapping an object, besides the object box itself
  int negatives_per_image = 4;
  double positive_iou = 0.5;
  double negative_iou = 0.3;
};

/// Everything the synthetic benchmark needs: data, networks, optimizers and
/// the linear models fitted on top.
struct BenchmarkConfig {
  SceneSpec scene;
  int train_images = 2000;
  int val_images = 500;
  ProposalPolicy proposals;
  NetworkConfig network;     // detector trunk; def_branch settings describe the def-pooling variant
  NetworkConfig first_pass;  // cheap scorer for rejection
  NetworkConfig context;     // whole-image scene classifier
  SgdConfig sgd;
  SgdConfig side_sgd;        // first-pass and context networks
  ScheduleKind schedule = ScheduleKind::kMultiStage;
  int stages = 1;
  SamplingConfig sampling;
  LinearTrainConfig linear;
  double ridge = 10.0;
  int fit_images = 500;      // training images used to fit the linear models and calibrate rejection
  double max_recall_drop = 0.05;
  std::vector<double> thresholds;  // rejection sweep grid

  BenchmarkConfig() {
    network.num_classes = scene.num_classes;
    network.def_branch.enabled = true;
    network.def_branch.part_filter_sizes = {3, 5};
    network.def_branch.part_channels = 4;
    // One block over the 8x8 part maps: a single placement score per part
    // channel with a learned displacement cost.
    network.def_branch.radius = 3;
    network.def_branch.stride = 8;
    first_pass.trunk = {{8, 3, 1, -1, 4}};
    first_pass.fc_width = 32;
    first_pass.num_classes = scene.num_classes;
    context.trunk = {{8, 3, 1, -1, 2}, {8, 3, 1, -1, 2}};
    context.fc_width = 32;
    context.num_classes = scene.num_scene_types;
    context.loss = LossKind::softmax();
    sgd.learning_rate = 0.02;
    sgd.epochs = 3;
    sgd.last_epoch_lr_scale = 0.1;
    side_sgd = sgd;
    for (int i = -60; i <= 20; ++i) thresholds.push_back(i * 0.05);
  }

  void validate() const {
    scene.validate();
    network.validate();
    first_pass.validate();
    context.validate();
    sgd.validate();
    side_sgd.validate();
    require(train_images > 0 && val_images > 0 && fit_images > 0, ErrorCode::kInvalidArgument,
            "image counts must be positive");
    require(network.num_classes == scene.num_classes && first_pass.num_classes == scene.num_classes,
            ErrorCode::kInvalidArgument, "detector networks need one output per object class");
    require(context.num_classes == scene.num_scene_types, ErrorCode::kInvalidArgument,
            "the context network needs one output per scene type");
    require(first_pass.channels == network.channels && first_pass.height == network.height &&
                first_pass.width == network.width,
            ErrorCode::kInvalidArgument, "first-pass and detector networks must share the input size");
    require(network.channels == scene.channels && context.channels == scene.channels, ErrorCode::kInvalidArgument,
            "network input channels must match the scene channels");
    require(stages >= 0, ErrorCode::kInvalidArgument, "stages must be >= 0");
    require(!thresholds.empty(), ErrorCode::kInvalidArgument, "rejection sweep needs thresholds");
  }
};

inline nlohmann::json sgd_to_json(const SgdConfig& s) {
  return {{"learning_rate", s.learning_rate}, {"momentum", s.momentum}, {"weight_decay", s.weight_decay},
          {"batch_size", s.batch_size},       {"epochs", s.epochs},     {"stage_lr_scale", s.stage_lr_scale},
          {"last_epoch_lr_scale", s.last_epoch_lr_scale}};
}

inline SgdConfig sgd_from_json(const nlohmann::json& j, SgdConfig s) {
  s.learning_rate = j.value("learning_rate", s.learning_rate);
  s.momentum = j.value("momentum", s.momentum);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.epochs = j.value("epochs", s.epochs);
  s.stage_lr_scale = j.value("stage_lr_scale", s.stage_lr_scale);
  s.last_epoch_lr_scale = j.value("last_epoch_lr_scale", s.last_epoch_lr_scale);
  return s;
}

inline nlohmann::json benchmark_to_json(const BenchmarkConfig& c) {
  return {{"scene", scene_to_json(c.scene)},
          {"train_images", c.train_images},
          {"val_images", c.val_images},
          {"proposals", c.proposals.to_json()},
          {"network", config_to_json(c.network)},
          {"first_pass", config_to_json(c.first_pass)},
          {"context", config_to_json(c.context)},
          {"sgd", sgd_to_json(c.sgd)},
          {"side_sgd", sgd_to_json(c.side_sgd)},
          {"schedule", schedule_name(c.schedule)},
          {"stages", c.stages},
          {"sampling",
           {{"positives_per_image", c.sampling.positives_per_image},
            {"negatives_per_image", c.sampling.negatives_per_image},
            {"positive_iou", c.sampling.positive_iou},
            {"negative_iou", c.sampling.negative_iou}}},
          {"linear",
           {{"learning_rate", c.linear.learning_rate},
            {"momentum", c.linear.momentum},
            {"l2", c.linear.l2},
            {"epochs", c.linear.epochs},
            {"batch_size", c.linear.batch_size}}},
          {"ridge", c.ridge},
          {"fit_images", c.fit_images},
          {"max_recall_drop", c.max_recall_drop},
          {"thresholds", c.thresholds}};
}

/// Keys absent from `j` keep their defaults. Network sections are merged over
/// the defaults key by key.
inline BenchmarkConfig benchmark_from_json(const nlohmann::json& j) {
  BenchmarkConfig c;
  try {
    require(j.is_object(), ErrorCode::kSchemaViolation, "config must be a JSON object");
    if (j.contains("scene")) c.scene = scene_from_json(j["scene"]);
    c.network.num_classes = c.first_pass.num_classes = c.scene.num_classes;
    c.context.num_classes = c.scene.num_scene_types;
    c.network.channels = c.first_pass.channels = c.context.channels = c.scene.channels;
    c.train_images = j.value("train_images", c.train_images);
    c.val_images = j.value("val_images", c.val_images);
    if (j.contains("proposals")) c.proposals = ProposalPolicy::from_json(j["proposals"]);
    const auto merge = [&](const char* key, NetworkConfig& n) {
      if (!j.contains(key)) return;
      nlohmann::json base = config_to_json(n);
      base.merge_patch(j[key]);
      n = config_from_json(base);
    };
    merge("network", c.network);
    merge("first_pass", c.first_pass);
    merge("context", c.context);
    if (j.contains("sgd")) c.sgd = sgd_from_json(j["sgd"], c.sgd);
    c.side_sgd = j.contains("side_sgd") ? sgd_from_json(j["side_sgd"], c.side_sgd) : c.sgd;
    if (j.contains("schedule")) c.schedule = parse_schedule(j["schedule"].get<std::string>());
    c.stages = j.value("stages", c.stages);
    if (j.contains("sampling")) {
      const auto& s = j["sampling"];
      c.sampling.positives_per_image = s.value("positives_per_image", c.sampling.positives_per_image);
      c.sampling.negatives_per_image = s.value("negatives_per_image", c.sampling.negatives_per_image);
      c.sampling.positive_iou = s.value("positive_iou", c.sampling.positive_iou);
      c.sampling.negative_iou = s.value("negative_iou", c.sampling.negative_iou);
    }
    if (j.contains("linear")) {
      const auto& l = j["linear"];
      c.linear.learning_rate = l.value("learning_rate", c.linear.learning_rate);
      c.linear.momentum = l.value("momentum", c.linear.momentum);
      c.linear.l2 = l.value("l2", c.linear.l2);
      c.linear.epochs = l.value("epochs", c.linear.epochs);
      c.linear.batch_size = l.value("batch_size", c.linear.batch_size);
    }
    c.ridge = j.value("ridge", c.ridge);
    c.fit_images = j.value("fit_images", c.fit_images);
    c.max_recall_drop = j.value("max_recall_drop", c.max_recall_drop);
    c.thresholds = j.value("thresholds", c.thresholds);
    for (const auto& [key, value] : j.items()) {
      static const std::set<std::string> known{"scene",    "train_images", "val_images", "proposals", "network",
                                               "first_pass", "context",    "sgd",        "side_sgd",  "schedule",
                                               "stages",   "sampling",     "linear",     "ridge",     "fit_images",
                                               "max_recall_drop", "thresholds"};
      require(known.count(key) > 0, ErrorCode::kSchemaViolation, "unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchemaViolation, std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline BenchmarkConfig load_benchmark_config(const std::string& path) {
  return benchmark_from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// Data

inline std::string manifest_path(const std::string& dir) { return dir + "/manifest.jsonl"; }
inline std::string proposals_path(const std::string& dir) { return dir + "/proposals.jsonl"; }

/// Generates the train/val images, manifest and proposal file under `dir`.
inline DatasetManifest generate_benchmark_data(const BenchmarkConfig& cfg, std::uint64_t seed, const std::string& dir) {
  DatasetManifest m = generate_dataset(cfg.scene, {{"train", cfg.train_images}, {"val", cfg.val_images}},
                                       sub_seed(seed, "data"), dir);
  m.generator["proposals"] = cfg.proposals.to_json();
  save_manifest(m, manifest_path(dir));
  save_proposals(generate_proposals(m, cfg.proposals, cfg.scene.image_size, sub_seed(seed, "proposals")),
                 proposals_path(dir));
  return m;
}

/// Images of one split in memory, with their proposals and ground truth.
struct SplitData {
  std::vector<const ImageRecord*> records;
  std::vector<Tensor> images;
  std::vector<std::vector<ScoredProposal>> proposals;  // per record
  GroundTruthSet gts;

  std::size_t size() const { return records.size(); }
  std::vector<ScoredProposal> all_proposals() const {
    std::vector<ScoredProposal> out;
    for (const auto& p : proposals) out.insert(out.end(), p.begin(), p.end());
    return out;
  }
  SplitData head(std::size_t n) const {
    SplitData s;
    n = std::min(n, size());
    s.records.assign(records.begin(), records.begin() + static_cast<std::ptrdiff_t>(n));
    s.images.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(n));
    s.proposals.assign(proposals.begin(), proposals.begin() + static_cast<std::ptrdiff_t>(n));
    for (const ImageRecord* r : s.records) {
      for (const ObjectRecord& o : r->objects) s.gts.push_back({r->id, o.box, o.class_id});
    }
    return s;
  }
};

/// Loads a split (the manifest must outlive the result).
inline SplitData load_split(const DatasetManifest& m, const std::vector<ScoredProposal>& proposals,
                            const std::string& split, int channels) {
  SplitData s;
  s.records = m.split(split);
  require(!s.records.empty(), ErrorCode::kInvalidArgument, "split '" + split + "' has no images");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < s.records.size(); ++i) index[s.records[i]->id] = i;
  s.proposals.resize(s.records.size());
  for (const ScoredProposal& p : proposals) {
    const auto it = index.find(p.image_id);
    if (it != index.end()) s.proposals[it->second].push_back(p);
  }
  s.images.resize(s.records.size());
  parallel_for(s.records.size(), [&](std::size_t i) {
    s.images[i] = image_to_tensor(read_ppm(m.image_path(*s.records[i])), channels);
  });
  for (const ImageRecord* r : s.records) {
    for (const ObjectRecord& o : r->objects) s.gts.push_back({r->id, o.box, o.class_id});
  }
  return s;
}

struct BoxMatch {
  double iou = 0.0;
  int class_id = -1;
  BoundingBox box;
};

/// Best-overlapping object of the image (first on ties).
inline BoxMatch best_match(const BoundingBox& b, const ImageRecord& r) {
  BoxMatch m;
  for (const ObjectRecord& o : r.objects) {
    const double v = iou(b, o.box);
    if (v > m.iou) m = {v, o.class_id, o.box};
  }
  return m;
}

/// Training crops: each object box, then up to the configured number of
/// positive and background proposals per image (drawn at random).
/// Background samples get an all-negative target when `background` is set and
/// are skipped otherwise.
inline LabeledSet crop_set(const SplitData& s, const NetworkConfig& net, const SamplingConfig& cfg, bool background,
                           const std::string& label_set, int num_classes, std::uint64_t seed) {
  LabeledSet out{label_set, num_classes, {}};
  const auto H = static_cast<std::size_t>(net.height), W = static_cast<std::size_t>(net.width);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const ImageRecord& r = *s.records[i];
    Rng rng(sub_seed(seed, "crops." + r.id));
    std::vector<std::pair<BoundingBox, int>> picks;
    for (const ObjectRecord& o : r.objects) picks.push_back({o.box, o.class_id});
    std::vector<std::pair<BoundingBox, int>> pos, neg;
    for (const ScoredProposal& p : s.proposals[i]) {
      const BoxMatch m = best_match(p.box, r);
      if (m.iou >= cfg.positive_iou) pos.push_back({p.box, m.class_id});
      else if (m.iou < cfg.negative_iou) neg.push_back({p.box, -1});
    }
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    for (std::size_t k = 0; k < pos.size() && k < static_cast<std::size_t>(cfg.positives_per_image); ++k) {
      picks.push_back(pos[k]);
    }
    if (background) {
      for (std::size_t k = 0; k < neg.size() && k < static_cast<std::size_t>(cfg.negatives_per_image); ++k) {
        picks.push_back(neg[k]);
      }
    }
    for (const auto& [box, label] : picks) {
      Target t = label >= 0 ? Target(static_cast<std::size_t>(label))
                            : Target(background_target(static_cast<std::size_t>(num_classes)));
      out.samples.push_back({crop_and_warp(s.images[i], box, H, W), std::move(t), out.samples.size()});
    }
  }
  return out;
}

/// Whole images labeled with their scene type.
inline LabeledSet scene_set(const SplitData& s, const NetworkConfig& net, int num_scene_types) {
  LabeledSet out{"scene", num_scene_types, {}};
  for (std::size_t i = 0; i < s.size(); ++i) {
    const Tensor& img = s.images[i];
    out.samples.push_back(
        {crop_and_warp(img, {0, 0, static_cast<double>(img.dim(2)), static_cast<double>(img.dim(1))},
                       static_cast<std::size_t>(net.height), static_cast<std::size_t>(net.width)),
         Target(static_cast<std::size_t>(s.records[i]->scene_type)), i});
  }
  return out;
}

inline ScheduleData schedule_data(const SplitData& train, const BenchmarkConfig& cfg, std::uint64_t seed) {
  ScheduleData d;
  const int K = cfg.scene.num_classes;
  d.detection = crop_set(train, cfg.network, cfg.sampling, true, "detection", K, sub_seed(seed, "detection"));
  if (cfg.schedule == ScheduleKind::kSchemeOne || cfg.schedule == ScheduleKind::kSchemeTwo) {
    d.object_crops = crop_set(train, cfg.network, cfg.sampling, false, "object", K, sub_seed(seed, "object"));
  }
  if (cfg.schedule == ScheduleKind::kSchemeOne) d.whole_image = scene_set(train, cfg.network, cfg.scene.num_scene_types);
  return d;
}

// ---------------------------------------------------------------------------
// Training

/// Trains a detector network with the configured schedule. `base_snapshot`,
/// when given, receives the network as it stands after stage-free fine-tuning.
inline StagedNetwork train_detector_net(NetworkConfig net_cfg, ScheduleKind kind, int stages,
                                        const ScheduleData& data, const SgdConfig& sgd, std::uint64_t seed,
                                        std::vector<LossRow>& report, StagedNetwork* base_snapshot = nullptr) {
  if (kind == ScheduleKind::kPlain) stages = 0;
  if (kind == ScheduleKind::kMultiStage && stages == 0) kind = ScheduleKind::kPlain;
  net_cfg.stages = stages;
  StagedNetwork net = build_network(net_cfg, sub_seed(seed, "init"));
  SgdConfig s = sgd;
  s.seed = sub_seed(seed, "sgd");
  TrainHooks hooks;
  if (base_snapshot) {
    hooks.on_boundary = [&](const std::string& e, const StagedNetwork& n) {
      if (e == "base_done") *base_snapshot = n;
    };
  }
  run_schedule(net, kind, stages, data, s, report, hooks);
  if (base_snapshot && stages == 0) *base_snapshot = net;
  return net;
}

inline StagedNetwork train_first_pass(const BenchmarkConfig& cfg, const LabeledSet& detection, std::uint64_t seed,
                                      std::vector<LossRow>& report) {
  StagedNetwork net = build_network(cfg.first_pass, sub_seed(seed, "first_pass.init"));
  SgdConfig s = cfg.side_sgd;
  s.seed = sub_seed(seed, "first_pass.sgd");
  train_phase(net, detection.samples, cfg.first_pass.loss, s, stage_mask(net, 0, false), "first_pass", report);
  net.schedule_id = "first-pass";
  return net;
}

inline StagedNetwork train_context_net(const BenchmarkConfig& cfg, const SplitData& train, std::uint64_t seed,
                                       std::vector<LossRow>& report) {
  StagedNetwork net = build_network(cfg.context, sub_seed(seed, "context.init"));
  const LabeledSet scenes = scene_set(train, cfg.context, cfg.scene.num_scene_types);
  SgdConfig s = cfg.side_sgd;
  s.seed = sub_seed(seed, "context.sgd");
  s.epochs = std::max(s.epochs, 4);
  train_phase(net, scenes.samples, cfg.context.loss, s, stage_mask(net, 0, false), "context", report);
  net.schedule_id = "context";
  return net;
}

/// Per-proposal outputs of one network over a split, for fitting linear models.
struct ScoredSplit {
  std::vector<std::vector<Tensor>> scores;    // [image][proposal]
  std::vector<std::vector<Tensor>> features;  // [image][proposal]
  std::vector<std::vector<Tensor>> subbox;    // [image][proposal] combined sub-box features
  std::vector<Tensor> context;                // [image]
};

inline ScoredSplit score_split(const StagedNetwork& net, const StagedNetwork* context_net, const SplitData& s) {
  ScoredSplit out;
  out.scores.resize(s.size());
  out.features.resize(s.size());
  out.subbox.resize(s.size());
  out.context.resize(s.size());
  parallel_for(s.size(), [&](std::size_t i) {
    FeatureStore store;
    for (const ScoredProposal& p : s.proposals[i]) {
      BoxScore b = score_box(net, s.images[i], p.box);
      out.scores[i].push_back(std::move(b.scores));
      out.features[i].push_back(b.feature);
      store.emplace(p.source_id, std::move(b.feature));
    }
    for (const ScoredProposal& p : s.proposals[i]) {
      out.subbox[i].push_back(subbox_features(p, s.proposals[i], store).combined);
    }
    if (context_net) out.context[i] = predict(*context_net, whole_image_input(*context_net, s.images[i]));
  });
  return out;
}

/// Fits the sub-box classifier, both context fusers and the box regressor of
/// `member` on proposals from `fit`.
inline void fit_scorers(DetectorMember& member, const StagedNetwork* context_net, const SplitData& fit,
                        const BenchmarkConfig& cfg, std::uint64_t seed) {
  const ScoredSplit sc = score_split(member.net, context_net, fit);
  const int K = member.net.config.num_classes;
  std::vector<int> labels;
  std::vector<const Tensor*> raw, sub, ctx;
  std::vector<Tensor> reg_features;
  std::vector<BoundingBox> reg_boxes, reg_targets;
  for (std::size_t i = 0; i < fit.size(); ++i) {
    for (std::size_t j = 0; j < fit.proposals[i].size(); ++j) {
      const BoxMatch m = best_match(fit.proposals[i][j].box, *fit.records[i]);
      if (m.iou >= cfg.sampling.positive_iou) {
        reg_features.push_back(sc.features[i][j]);
        reg_boxes.push_back(fit.proposals[i][j].box);
        reg_targets.push_back(m.box);
      }
      if (m.iou >= cfg.sampling.positive_iou) labels.push_back(m.class_id);
      else if (m.iou < cfg.sampling.negative_iou) labels.push_back(-1);
      else continue;
      raw.push_back(&sc.scores[i][j]);
      sub.push_back(&sc.subbox[i][j]);
      ctx.push_back(&sc.context[i]);
    }
  }
  LinearTrainConfig lc = cfg.linear;
  std::vector<Tensor> inputs;
  for (const Tensor* t : sub) inputs.push_back(*t);
  lc.seed = sub_seed(seed, "subbox");
  member.subbox = train_linear_ova(inputs, labels, K, lc, "sub-box classifier").classifier;
  if (context_net) {
    inputs.clear();
    for (std::size_t n = 0; n < raw.size(); ++n) inputs.push_back(concat({raw[n], ctx[n]}));
    lc.seed = sub_seed(seed, "context.raw");
    member.context_raw = train_linear_ova(inputs, labels, K, lc, "context fuser").classifier;
    inputs.clear();
    for (std::size_t n = 0; n < raw.size(); ++n) {
      const Tensor s = apply_or_fallback(*member.subbox, *sub[n], *raw[n]);
      inputs.push_back(concat({&s, ctx[n]}));
    }
    lc.seed = sub_seed(seed, "context.subbox");
    member.context_subbox = train_linear_ova(inputs, labels, K, lc, "context fuser").classifier;
  }
  if (!reg_features.empty()) {
    member.regressor = train_box_regressor(reg_features, reg_boxes, reg_targets, cfg.ridge);
  } else {
    warn("no proposals overlap an object well enough to fit box regression");
  }
}

/// First-pass scores for every proposal of a split.
inline std::vector<ScoredProposal> first_pass_scores(const StagedNetwork& net, const SplitData& s) {
  std::vector<std::vector<ScoredProposal>> per(s.size());
  parallel_for(s.size(), [&](std::size_t i) { per[i] = score_with(net, s.images[i], s.proposals[i]); });
  std::vector<ScoredProposal> out;
  for (auto& p : per) out.insert(out.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  return out;
}

// ---------------------------------------------------------------------------
// Running a detector over a split

struct RunStats {
  std::size_t proposals = 0;  // proposals offered
  std::size_t scored = 0;     // proposals that reached the detector networks
  double recall_all = 0.0;    // proposal recall before rejection
  double recall_kept = 0.0;   // proposal recall of the survivors
};

struct DetectionRun {
  std::vector<Detection> detections;
  std::vector<ScoredProposal> first_pass;  // first-pass scored proposals (rejection runs)
  std::vector<ScoredProposal> kept;
  std::vector<std::vector<Tensor>> member_scores;  // [member][kept], in kept order
  RunStats stats;
};

inline DetectionRun run_detector(const Detector& det, const SplitData& s, const DetectOptions& opt) {
  std::vector<ImageResult> per(s.size());
  parallel_for(s.size(), [&](std::size_t i) { per[i] = detect(det, s.images[i], s.records[i]->id, s.proposals[i], opt); });
  DetectionRun run;
  run.member_scores.resize(det.members.size());
  for (ImageResult& r : per) {
    for (Detection& d : r.detections) {
      d.id = run.detections.size();
      run.detections.push_back(std::move(d));
    }
    run.first_pass.insert(run.first_pass.end(), r.first_pass.begin(), r.first_pass.end());
    run.kept.insert(run.kept.end(), r.kept.begin(), r.kept.end());
    for (std::size_t m = 0; m < r.member_scores.size(); ++m) {
      run.member_scores[m].insert(run.member_scores[m].end(), r.member_scores[m].begin(), r.member_scores[m].end());
    }
  }
  const std::vector<ScoredProposal> all = s.all_proposals();
  run.stats = {all.size(), run.kept.size(), proposal_recall(all, s.gts), proposal_recall(run.kept, s.gts)};
  return run;
}

// ---------------------------------------------------------------------------
// Full training and the component sweep

/// Calibrated rejection threshold plus the sweep it was chosen from.
struct Calibration {
  double threshold = kDefaultRejectThreshold;
  std::vector<SweepRow> sweep;
};

inline Calibration calibrate_rejection(const StagedNetwork& first_pass, const SplitData& fit,
                                       const BenchmarkConfig& cfg) {
  const auto scored = first_pass_scores(first_pass, fit);
  return {calibrate_threshold(scored, fit.gts, cfg.thresholds, cfg.max_recall_drop),
          rejection_sweep(scored, fit.gts, cfg.thresholds)};
}

inline nlohmann::json calibration_to_json(const Calibration& c) {
  nlohmann::json sweep = nlohmann::json::array();
  for (const SweepRow& r : c.sweep) sweep.push_back({r.threshold, r.rejection_rate, r.recall});
  return {{"reject_threshold", c.threshold}, {"sweep", sweep}};
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

inline void log_line(std::ostream* log, const std::string& msg) {
  if (log) *log << msg << std::endl;
}

struct AblationRow {
  std::string config;
  double map = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  double map_trunk = 0.0;    // baseline trunk, scoring only
  double map_def = 0.0;      // def-pooling network, scoring only
  double map_scoring = 0.0;  // final network, scoring only
  double map_full = 0.0;     // final network, every stage on
  RunStats rejection;        // from the full run at the calibrated threshold
  Calibration calibration;   // chosen on training images
  std::vector<SweepRow> val_sweep;
  std::vector<std::vector<double>> context_weights;  // [class][scene type], raw-score fuser
};

inline DetectOptions scoring_only() {
  DetectOptions o;
  o.rejection = o.subbox = o.context = o.refine = false;
  return o;
}

inline double detection_map(const Detector& det, const SplitData& s, const DetectOptions& o, DetectionRun* keep = nullptr) {
  DetectionRun run = run_detector(det, s, o);
  const double m = mean_ap(run.detections, s.gts).map;
  if (keep) *keep = std::move(run);
  return m;
}

/// Trains the baseline, def-pooling and staged networks plus the side models on
/// a freshly generated benchmark under `work_dir`, then measures mAP on val as
/// components are added one at a time.
inline AblationResult run_ablation(const BenchmarkConfig& cfg, std::uint64_t seed, const std::string& work_dir,
                                   std::ostream* log = nullptr) {
  cfg.validate();
  Timer clock;
  const std::string data_dir = work_dir + "/data";
  generate_benchmark_data(cfg, seed, data_dir);
  const auto proposals = load_proposals(proposals_path(data_dir));
  const DatasetManifest manifest = load_manifest(manifest_path(data_dir));
  const SplitData train = load_split(manifest, proposals, "train", cfg.scene.channels);
  const SplitData val = load_split(manifest, proposals, "val", cfg.scene.channels);
  const SplitData fit = train.head(static_cast<std::size_t>(cfg.fit_images));
  log_line(log, "data ready " + format_double(clock.seconds()) + "s");

  std::vector<LossRow> report;
  const ScheduleData data = schedule_data(train, cfg, seed);
  log_line(log, "detection samples " + std::to_string(data.detection.samples.size()));

  NetworkConfig trunk_cfg = cfg.network;
  trunk_cfg.def_branch.enabled = false;
  const StagedNetwork trunk = train_detector_net(trunk_cfg, cfg.schedule, 0, data, cfg.sgd, sub_seed(seed, "trunk"), report);
  log_line(log, "trunk trained " + format_double(clock.seconds()) + "s");

  NetworkConfig def_cfg = cfg.network;
  def_cfg.def_branch.enabled = true;
  StagedNetwork def_plain;
  const StagedNetwork staged =
      train_detector_net(def_cfg, cfg.schedule, cfg.stages, data, cfg.sgd, sub_seed(seed, "def"), report, &def_plain);
  log_line(log, "def-pooling network trained " + format_double(clock.seconds()) + "s");

  Detector det;
  det.first_pass = train_first_pass(cfg, data.detection, seed, report);
  det.context_net = train_context_net(cfg, train, seed, report);
  log_line(log, "side networks trained " + format_double(clock.seconds()) + "s");

  AblationResult res;
  res.calibration = calibrate_rejection(*det.first_pass, fit, cfg);
  DetectorMember member{"final", staged, {}, {}, {}, {}};
  fit_scorers(member, &*det.context_net, fit, cfg, sub_seed(seed, "scorers"));
  log_line(log, "linear models fitted " + format_double(clock.seconds()) + "s");

  const auto single = [](const StagedNetwork& n) {
    Detector d;
    d.members.push_back({"net", n, {}, {}, {}, {}});
    return d;
  };
  res.map_trunk = detection_map(single(trunk), val, scoring_only());
  res.rows.push_back({"trunk", res.map_trunk});
  res.map_def = detection_map(single(def_plain), val, scoring_only());
  res.rows.push_back({"+def-pooling", res.map_def});
  det.members.push_back(std::move(member));
  res.map_scoring = detection_map(det, val, scoring_only());
  if (cfg.stages > 0 && cfg.schedule != ScheduleKind::kPlain) {
    res.rows.push_back({"+multi-stage(T=" + std::to_string(cfg.stages) + ")", res.map_scoring});
  }
  DetectOptions o = scoring_only();
  o.rejection = true;
  o.reject_threshold = res.calibration.threshold;
  DetectionRun rejection_run;
  res.rows.push_back({"+rejection", detection_map(det, val, o, &rejection_run)});
  res.rejection = rejection_run.stats;
  res.val_sweep = rejection_sweep(rejection_run.first_pass, val.gts, cfg.thresholds);
  o.subbox = true;
  res.rows.push_back({"+sub-box", detection_map(det, val, o)});
  o.context = true;
  res.rows.push_back({"+context", detection_map(det, val, o)});
  o.refine = true;
  res.map_full = detection_map(det, val, o);
  res.rows.push_back({"+box-regression", res.map_full});
  log_line(log, "evaluation done " + format_double(clock.seconds()) + "s");

  const LinearClassifier& fuser = *det.members[0].context_raw;
  const std::size_t K = static_cast<std::size_t>(cfg.scene.num_classes);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> row;
    for (std::size_t s = 0; s < static_cast<std::size_t>(cfg.scene.num_scene_types); ++s) {
      row.push_back(fuser.raw_weight(k, K + s));
    }
    res.context_weights.push_back(std::move(row));
  }
  return res;
}

inline void write_ablation_csv(const AblationResult& r, const std::string& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path);
  out << "config,mAP\n";
  for (const AblationRow& row : r.rows) out << row.config << ',' << format_double(row.map) << '\n';
}

inline nlohmann::json ablation_to_json(const AblationResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const AblationRow& row : r.rows) rows.push_back({{"config", row.config}, {"map", row.map}});
  nlohmann::json sweep = nlohmann::json::array();
  for (const SweepRow& s : r.val_sweep) sweep.push_back({s.threshold, s.rejection_rate, s.recall});
  return {{"rows", rows},
          {"map_trunk", r.map_trunk},
          {"map_def", r.map_def},
          {"map_scoring", r.map_scoring},
          {"map_full", r.map_full},
          {"rejection",
           {{"threshold", r.calibration.threshold},
            {"proposals", r.rejection.proposals},
            {"scored", r.rejection.scored},
            {"recall_all", r.rejection.recall_all},
            {"recall_kept", r.rejection.recall_kept}}},
          {"val_sweep", sweep},
          {"context_weights", r.context_weights}};
}

// ---------------------------------------------------------------------------
// Training a complete detector from a data directory

struct TrainedDetector {
  Detector detector;
  Calibration calibration;
  std::vector<LossRow> report;
};

/// Trains the detector network with `cfg.schedule`, then (unless
/// `network_only`) the first-pass and context networks, the rejection
/// threshold and the linear models.
inline TrainedDetector train_detector(const BenchmarkConfig& cfg, const std::string& data_dir, std::uint64_t seed,
                                      bool network_only = false, std::ostream* log = nullptr) {
  cfg.validate();
  Timer clock;
  const auto proposals = load_proposals(proposals_path(data_dir));
  const DatasetManifest manifest = load_manifest(manifest_path(data_dir));
  const SplitData train = load_split(manifest, proposals, "train", cfg.scene.channels);
  log_line(log, "loaded " + std::to_string(train.size()) + " training images " + format_double(clock.seconds()) + "s");
  TrainedDetector out;
  const ScheduleData data = schedule_data(train, cfg, seed);
  DetectorMember member;
  member.id = "model";
  member.net = train_detector_net(cfg.network, cfg.schedule, cfg.stages, data, cfg.sgd, sub_seed(seed, "def"), out.report);
  log_line(log, "detector network trained " + format_double(clock.seconds()) + "s");
  if (!network_only) {
    out.detector.first_pass = train_first_pass(cfg, data.detection, seed, out.report);
    out.detector.context_net = train_context_net(cfg, train, seed, out.report);
    const SplitData fit = train.head(static_cast<std::size_t>(cfg.fit_images));
    out.calibration = calibrate_rejection(*out.detector.first_pass, fit, cfg);
    fit_scorers(member, &*out.detector.context_net, fit, cfg, sub_seed(seed, "scorers"));
    log_line(log, "side models fitted " + format_double(clock.seconds()) + "s");
  }
  out.detector.members.push_back(std::move(member));
  return out;
}

/// Writes the detector files plus phase_report.csv and, when side models were
/// trained, calibration.json.
inline void save_trained_detector(const TrainedDetector& t, const std::string& dir) {
  save_detector_dir(t.detector, dir);
  write_phase_report(t.report, dir + "/phase_report.csv");
  if (t.detector.first_pass) write_json_file(calibration_to_json(t.calibration), dir + "/calibration.json");
}

/// Rejection threshold stored next to a trained detector, if any.
inline std::optional<double> stored_threshold(const std::string& dir) {
  const std::string path = dir + "/calibration.json";
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    return read_json_file(path).at("reject_threshold").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchemaViolation, path + ": " + e.what());
  }
}

}  // namespace defnet
