#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "defnet/checks.hpp"
#include "defnet/experiment.hpp"

using namespace defnet;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool seed_required, bool out_required) {
  cmd->add_option("--config", c.config, "benchmark config (JSON)");
  auto* seed = cmd->add_option("--seed", c.seed, "master seed");
  if (seed_required) seed->required();
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (out_required) out->required();
}

// Command-line scalars that override the config file.
struct Overrides {
  std::optional<int> train_images, val_images, fit_images, epochs, stages;
  std::optional<std::string> schedule;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--train-images", o.train_images);
  cmd->add_option("--val-images", o.val_images);
  cmd->add_option("--fit-images", o.fit_images);
  cmd->add_option("--epochs", o.epochs, "SGD epochs per phase");
  cmd->add_option("--stages", o.stages, "extra classifier stages T");
  cmd->add_option("--schedule", o.schedule, "plain | multistage | scheme1 | scheme2");
}

BenchmarkConfig load_config(const Common& c, const Overrides& o) {
  BenchmarkConfig cfg = c.config.empty() ? BenchmarkConfig() : load_benchmark_config(c.config);
  if (o.train_images) cfg.train_images = *o.train_images;
  if (o.val_images) cfg.val_images = *o.val_images;
  if (o.fit_images) cfg.fit_images = *o.fit_images;
  if (o.epochs) cfg.sgd.epochs = cfg.side_sgd.epochs = *o.epochs;
  if (o.stages) cfg.stages = *o.stages;
  if (o.schedule) cfg.schedule = parse_schedule(*o.schedule);
  cfg.validate();
  return cfg;
}

void make_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::kIo, "cannot create output directory " + dir + ": " + ec.message());
}

struct Toggles {
  bool no_rejection = false, no_subbox = false, no_context = false, no_refine = false, no_nms = false;
  bool argmax_only = false, context_after_averaging = false;
  std::optional<double> threshold;
};

void add_toggles(CLI::App* cmd, Toggles& t) {
  cmd->add_flag("--no-rejection", t.no_rejection, "score every proposal");
  cmd->add_flag("--no-subbox", t.no_subbox, "skip sub-box re-scoring");
  cmd->add_flag("--no-context", t.no_context, "skip context fusion");
  cmd->add_flag("--no-refine", t.no_refine, "skip box regression");
  cmd->add_flag("--no-nms", t.no_nms, "keep overlapping detections");
  cmd->add_flag("--argmax-only", t.argmax_only, "one detection per box (highest class)");
  cmd->add_flag("--context-after-averaging", t.context_after_averaging, "fuse context once, after model averaging");
  cmd->add_option("--threshold", t.threshold, "rejection threshold (default: calibrated, else -1.1)");
}

DetectOptions detect_options(const Toggles& t, const Detector& det, const std::string& lead_dir) {
  DetectOptions o;
  o.rejection = !t.no_rejection;
  o.subbox = !t.no_subbox;
  o.context = !t.no_context;
  o.refine = !t.no_refine;
  o.nms = !t.no_nms;
  o.argmax_only = t.argmax_only;
  o.context_after_averaging = t.context_after_averaging;
  o.reject_threshold = t.threshold ? *t.threshold : stored_threshold(lead_dir).value_or(kDefaultRejectThreshold);
  return det.supported(o);
}

struct LoadedData {
  DatasetManifest manifest;
  std::vector<ScoredProposal> proposals;
};

LoadedData load_data(const std::string& dir) {
  LoadedData d{load_manifest(manifest_path(dir)), load_proposals(proposals_path(dir))};
  return d;
}

nlohmann::json stats_json(const RunStats& s) {
  return {{"proposals", s.proposals},
          {"scored", s.scored},
          {"scored_fraction", s.proposals ? static_cast<double>(s.scored) / static_cast<double>(s.proposals) : 0.0},
          {"recall_all", s.recall_all},
          {"recall_kept", s.recall_kept}};
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c, const Overrides& o) {
  const BenchmarkConfig cfg = load_config(c, o);
  make_out_dir(c.out);
  const DatasetManifest m = generate_benchmark_data(cfg, *c.seed, c.out);
  write_json_file(benchmark_to_json(cfg), c.out + "/config.json");
  std::cout << "generated " << m.records.size() << " images in " << c.out << '\n';
  return 0;
}

int cmd_train(const Common& c, const Overrides& o, const std::string& data, bool no_def, bool network_only) {
  BenchmarkConfig cfg = load_config(c, o);
  if (no_def) cfg.network.def_branch.enabled = false;
  make_out_dir(c.out);
  std::ofstream log(c.out + "/train.log");
  const TrainedDetector t = train_detector(cfg, data, *c.seed, network_only, &log);
  save_trained_detector(t, c.out);
  write_json_file(benchmark_to_json(cfg), c.out + "/config.json");
  std::cout << "trained " << t.detector.members[0].net.schedule_id << " model in " << c.out << '\n';
  if (t.detector.first_pass) std::cout << "rejection threshold " << format_double(t.calibration.threshold) << '\n';
  return 0;
}

int cmd_detect(const Common& c, const std::vector<std::string>& models, const std::string& data,
               const std::string& split, const Toggles& tg, const std::string& ensemble_file) {
  Detector det = load_detector_dirs(models);
  if (!ensemble_file.empty()) {
    std::vector<std::string> ids;
    for (const DetectorMember& m : det.members) ids.push_back(m.id);
    det.ensemble = spec_from_json(read_json_file(ensemble_file), ids);
  }
  const DetectOptions opt = detect_options(tg, det, models.front());
  const LoadedData d = load_data(data);
  const SplitData s = load_split(d.manifest, d.proposals, split, det.members[0].net.config.channels);
  make_out_dir(c.out);
  const DetectionRun run = run_detector(det, s, opt);
  save_detections(run.detections, c.out + "/detections.jsonl");
  if (opt.rejection) save_proposals(run.first_pass, c.out + "/first_pass.jsonl");
  nlohmann::json stats = stats_json(run.stats);
  stats["options"] = opt.name();
  stats["reject_threshold"] = opt.rejection ? nlohmann::json(opt.reject_threshold) : nlohmann::json(nullptr);
  stats["detections"] = run.detections.size();
  write_json_file(stats, c.out + "/stats.json");
  std::cout << run.detections.size() << " detections, " << run.stats.scored << "/" << run.stats.proposals
            << " proposals scored (" << opt.name() << ")\n";
  return 0;
}

int cmd_eval(const Common& c, const Overrides& o, const std::string& dets_file, const std::string& data,
             const std::string& split, const std::string& first_pass_file) {
  const BenchmarkConfig cfg = load_config(c, o);
  const DatasetManifest m = load_manifest(manifest_path(data));
  const GroundTruthSet gts = ground_truth(m, split);
  const std::vector<Detection> dets = load_detections(dets_file);
  make_out_dir(c.out);
  const MapResult r = mean_ap(dets, gts);
  write_ap_report(r, c.out + "/ap.csv");
  for (const auto& [k, g] : split_by_class(gts)) {
    std::vector<Detection> mine;
    for (const Detection& d : dets) {
      if (d.class_id == k) mine.push_back(d);
    }
    write_pr_curve(average_precision(mine, g), c.out + "/pr_class" + std::to_string(k) + ".csv");
  }
  nlohmann::json summary = {{"map", r.map}, {"detections", dets.size()}, {"ground_truth", gts.size()}};
  if (!first_pass_file.empty()) {
    const auto scored = load_proposals(first_pass_file);
    write_sweep_report(rejection_sweep(scored, gts, cfg.thresholds), c.out + "/rejection_sweep.csv");
    summary["proposal_recall"] = proposal_recall(scored, gts);
  }
  write_json_file(summary, c.out + "/summary.json");
  std::cout << "mAP " << format_double(r.map) << '\n';
  return 0;
}

int cmd_ensemble(const Common& c, const std::vector<std::string>& models, const std::string& data,
                 const std::string& split, const std::string& eval_split, const std::string& mode_name,
                 const Toggles& tg) {
  const EnsembleMode mode = parse_ensemble_mode(mode_name);
  const Detector det = load_detector_dirs(models);
  DetectOptions opt = detect_options(tg, det, models.front());
  opt.context_after_averaging = false;  // pool scores are per member, after context fusion
  const LoadedData d = load_data(data);
  const int channels = det.members[0].net.config.channels;
  const SplitData sel = load_split(d.manifest, d.proposals, split, channels);
  const DetectionRun run = run_detector(det, sel, opt);
  ModelPool pool{run.kept, {}, det.num_classes()};
  std::vector<std::string> ids;
  for (std::size_t m = 0; m < det.members.size(); ++m) {
    ids.push_back(det.members[m].id);
    pool.members.push_back({det.members[m].id, run.member_scores[m], det.members[m].net.schedule_id});
  }
  const GreedyResult g = mode == EnsembleMode::kAllClass ? greedy_select_all_class(pool, sel.gts, opt.nms_iou)
                                                         : greedy_select_per_class(pool, sel.gts, opt.nms_iou);
  make_out_dir(c.out);
  write_json_file(spec_to_json(g.spec, ids), c.out + "/ensemble.json");
  write_trace(g.trace, c.out + "/trace.csv");
  nlohmann::json report = {{"mode", ensemble_mode_name(mode)}, {"selection_split", split},
                           {"selection_map", g.spec.selection_map}};
  if (!eval_split.empty()) {
    Detector held = det;
    held.ensemble = g.spec;
    const SplitData ev = load_split(d.manifest, d.proposals, eval_split, channels);
    const double m = detection_map(held, ev, opt);
    report["heldout_split"] = eval_split;
    report["heldout_map"] = m;
  }
  write_json_file(report, c.out + "/report.json");
  std::cout << ensemble_mode_name(mode) << " selection mAP " << format_double(g.spec.selection_map) << '\n';
  return 0;
}

int cmd_grad_check(const Common& c) {
  const std::vector<LayerCheck> checks = gradient_suite(c.seed.value_or(0));
  bool ok = true;
  std::ofstream csv;
  if (!c.out.empty()) {
    make_out_dir(c.out);
    csv.open(c.out + "/grad_check.csv");
    csv << "layer,max_rel_err,max_abs_err,cases\n";
  }
  for (const LayerCheck& l : checks) {
    std::cout << l.name << " max_rel_err=" << format_double(l.max_rel_err) << " cases=" << l.cases
              << (l.passed() ? " ok" : " FAILED") << '\n';
    if (csv.is_open()) {
      csv << l.name << ',' << format_double(l.max_rel_err) << ',' << format_double(l.max_abs_err) << ',' << l.cases
          << '\n';
    }
    ok = ok && l.passed();
  }
  require(ok, ErrorCode::kCheckFailed, "gradient check exceeded relative error 1e-4");
  return 0;
}

int cmd_oracle_check(const Common& c) {
  const OracleCheck r = dpm_oracle_check(c.seed.value_or(0));
  std::cout << "max |defpool - dpm| over " << r.maps << " maps: " << format_double(r.max_abs_diff) << '\n';
  if (!c.out.empty()) {
    make_out_dir(c.out);
    write_json_file({{"maps", r.maps}, {"max_abs_diff", r.max_abs_diff}}, c.out + "/oracle_check.json");
  }
  require(r.max_abs_diff <= 1e-9, ErrorCode::kCheckFailed, "def-pooling disagrees with the DPM oracle");
  return 0;
}

int cmd_ablate(const Common& c, const Overrides& o, int runs, bool keep_data) {
  require(runs >= 1, ErrorCode::kInvalidArgument, "--runs must be >= 1");
  const BenchmarkConfig cfg = load_config(c, o);
  make_out_dir(c.out);
  std::ofstream log(c.out + "/ablate.log");
  std::vector<AblationResult> results;
  nlohmann::json per_seed = nlohmann::json::array();
  for (int r = 0; r < runs; ++r) {
    const std::uint64_t seed = *c.seed + static_cast<std::uint64_t>(r);
    const std::string dir = c.out + "/seed" + std::to_string(seed);
    make_out_dir(dir);
    log << "seed " << seed << std::endl;
    results.push_back(run_ablation(cfg, seed, dir, &log));
    write_ablation_csv(results.back(), dir + "/ablate.csv");
    nlohmann::json j = ablation_to_json(results.back());
    j["seed"] = seed;
    write_json_file(j, dir + "/ablation.json");
    per_seed.push_back(j);
    if (!keep_data) std::filesystem::remove_all(dir + "/data");
  }
  AblationResult mean = results.front();
  for (std::size_t i = 0; i < mean.rows.size(); ++i) {
    double sum = 0.0;
    for (const AblationResult& r : results) sum += r.rows.at(i).map;
    mean.rows[i].map = sum / static_cast<double>(results.size());
  }
  write_ablation_csv(mean, c.out + "/ablate.csv");
  write_json_file({{"runs", per_seed}, {"config", benchmark_to_json(cfg)}}, c.out + "/ablation.json");
  for (const AblationRow& row : mean.rows) std::cout << row.config << ',' << format_double(row.map) << '\n';
  return 0;
}

void print_error(ErrorCode code, const std::string& message) {
  std::string flat = message;
  for (char& ch : flat) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  std::cerr << nlohmann::json{{"error", error_code_name(code)}, {"code", static_cast<int>(code)}, {"message", flat}}
                   .dump()
            << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deformable-pooling detector toolkit"};
  app.require_subcommand(1);

  Common common;
  Overrides over;
  Toggles toggles;
  std::string data, split = "val", eval_split, ensemble_file, mode = "all-cls", dets_file, first_pass_file;
  std::vector<std::string> models;
  bool no_def = false, network_only = false, keep_data = false;
  int runs = 1;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  add_common(gen, common, true, true);
  add_overrides(gen, over);

  auto* train = app.add_subcommand("train", "train a detector on a generated data directory");
  add_common(train, common, true, true);
  add_overrides(train, over);
  train->add_option("--data", data, "data directory from gen-data")->required();
  train->add_flag("--no-def-pooling", no_def, "train the plain trunk");
  train->add_flag("--model-only", network_only, "skip the side networks and linear models");

  auto* detect = app.add_subcommand("detect", "run detection over a split");
  add_common(detect, common, false, true);
  detect->add_option("--model", models, "model directory (repeat to average)")->required();
  detect->add_option("--data", data, "data directory from gen-data")->required();
  detect->add_option("--split", split, "split to detect on (default val)");
  detect->add_option("--ensemble", ensemble_file, "ensemble spec from the ensemble command");
  add_toggles(detect, toggles);

  auto* eval = app.add_subcommand("eval", "per-class AP and mAP of a detections file");
  add_common(eval, common, false, true);
  eval->add_option("--detections", dets_file, "detections.jsonl from detect")->required();
  eval->add_option("--data", data, "data directory holding the ground truth")->required();
  eval->add_option("--split", split, "split to score against (default val)");
  eval->add_option("--first-pass", first_pass_file, "first-pass scored proposals, for the rejection sweep");

  auto* ens = app.add_subcommand("ensemble", "greedy model selection for score averaging");
  add_common(ens, common, false, true);
  ens->add_option("--model", models, "model directory (repeat for each pool member)")->required();
  ens->add_option("--data", data, "data directory from gen-data")->required();
  ens->add_option("--split", split, "selection split");
  ens->add_option("--eval-split", eval_split, "held-out split to report");
  ens->add_option("--mode", mode, "all-cls | per-cls");
  add_toggles(ens, toggles);

  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every layer");
  add_common(grad, common, false, false);

  auto* oracle = app.add_subcommand("oracle-check", "def-pooling against the exhaustive DPM score");
  add_common(oracle, common, false, false);

  auto* ablate = app.add_subcommand("ablate", "component sweep on a freshly generated benchmark");
  add_common(ablate, common, true, true);
  add_overrides(ablate, over);
  ablate->add_option("--runs", runs, "consecutive seeds to average");
  ablate->add_flag("--keep-data", keep_data, "keep the generated images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ExtrasError& e) {
    print_error(ErrorCode::kUnknownFlag, e.what());
    return static_cast<int>(ErrorCode::kUnknownFlag);
  } catch (const CLI::ParseError& e) {
    print_error(ErrorCode::kInvalidArgument, e.what());
    return static_cast<int>(ErrorCode::kInvalidArgument);
  }

  try {
    if (*gen) return cmd_gen_data(common, over);
    if (*train) return cmd_train(common, over, data, no_def, network_only);
    if (*detect) return cmd_detect(common, models, data, split, toggles, ensemble_file);
    if (*eval) return cmd_eval(common, over, dets_file, data, split, first_pass_file);
    if (*ens) return cmd_ensemble(common, models, data, split, eval_split, mode, toggles);
    if (*grad) return cmd_grad_check(common);
    if (*oracle) return cmd_oracle_check(common);
    if (*ablate) return cmd_ablate(common, over, runs, keep_data);
  } catch (const Error& e) {
    print_error(e.code(), e.what());
    return static_cast<int>(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    print_error(ErrorCode::kIo, e.what());
    return static_cast<int>(ErrorCode::kIo);
  }
  return 0;
}
