#include <gtest/gtest.h>

#include <cstdlib>
#include <limits>

#include "defnet/trainer.hpp"
#include "test_util.hpp"

using namespace defnet;
using namespace defnet::testing;

namespace {

NetworkConfig tiny_config(int stages, bool def_branch = false) {
  NetworkConfig cfg;
  cfg.height = 8;
  cfg.width = 8;
  cfg.trunk = {{3, 3, 1, -1, 2}, {4, 3, 1, -1, 2}};
  cfg.fc_width = 6;
  cfg.num_classes = 3;
  cfg.stages = stages;
  cfg.stage_width = 5;
  cfg.def_branch.enabled = def_branch;
  cfg.def_branch.part_filter_sizes = {1, 3};
  cfg.def_branch.part_channels = 2;
  return cfg;
}

// Class k images are brighter in channel k, with hinge targets and a few
// background samples.
Dataset toy_data(std::size_t n, std::uint64_t seed, bool hinge = true) {
  Rng rng(seed);
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor img = uniform_tensor({3, 8, 8}, rng, 0.0, 0.5);
    const std::size_t k = i % 4;
    if (k < 3) {
      for (std::size_t p = 0; p < 64; ++p) img[k * 64 + p] += 1.0;
      d.push_back({img, k, i});
    } else if (hinge) {
      d.push_back({img, background_target(3), i});
    }
  }
  return d;
}

SgdConfig small_sgd() {
  SgdConfig c;
  c.learning_rate = 0.05;
  c.batch_size = 4;
  c.epochs = 2;
  c.seed = 5;
  return c;
}

std::vector<const Sample*> pointers(const Dataset& d) {
  std::vector<const Sample*> p;
  for (const Sample& s : d) p.push_back(&s);
  return p;
}

std::vector<Tensor> probe(const StagedNetwork& net, const Dataset& d) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < 4; ++i) out.push_back(predict(net, d[i].image));
  return out;
}

std::map<std::string, Tensor> params(const StagedNetwork& net) {
  std::map<std::string, Tensor> m;
  net.for_each_param([&](const std::string& n, const Tensor& t) { m[n] = t; });
  return m;
}

}  // namespace

TEST(Sgd, ZeroLearningRateLeavesParameters) {
  StagedNetwork net = build_network(tiny_config(0), 1);
  const auto before = params(net);
  const Dataset d = toy_data(8, 1);
  SgdConfig cfg = small_sgd();
  cfg.learning_rate = 0.0;
  SgdState st;
  const double loss = sgd_step(net, pointers(d), LossKind::hinge(), cfg, {}, st);
  EXPECT_GT(loss, 0.0);
  EXPECT_EQ(params(net), before);
}

TEST(Sgd, FullyFrozenMaskLeavesParameters) {
  StagedNetwork net = build_network(tiny_config(1, true), 1);
  const auto before = params(net);
  FreezeMask mask;
  net.for_each_param([&](const std::string& n, const Tensor&) { mask.freeze(n); });
  SgdState st;
  const Dataset d = toy_data(8, 1);
  sgd_step(net, pointers(d), LossKind::hinge(), small_sgd(), mask, st);
  EXPECT_EQ(params(net), before);
}

TEST(Sgd, FreezingIsExactUnderWeightDecay) {
  StagedNetwork net = build_network(tiny_config(1), 2);
  SgdConfig cfg = small_sgd();
  cfg.weight_decay = 0.5;
  FreezeMask mask;
  mask.freeze("fc6.w");
  mask.pin_zero("stage1.w8");
  const Tensor fc6 = net.fc6.weights;
  SgdState st;
  const Dataset d = toy_data(8, 3);
  for (int i = 0; i < 5; ++i) sgd_step(net, pointers(d), LossKind::hinge(), cfg, mask, st);
  EXPECT_EQ(net.fc6.weights, fc6);
  EXPECT_TRUE(net.stages[0].w8.all_zero());
  EXPECT_FALSE(net.fc7.weights == build_network(tiny_config(1), 2).fc7.weights);
}

TEST(Sgd, LinearLeastSquaresLossDecreases) {
  // Full-batch gradient descent on 0.5*||Wx+b - y||^2 averaged over samples.
  Rng rng(9);
  FcLayer layer{Tensor({2, 3}), Tensor({2})};
  const Tensor truth = uniform_tensor({2, 3}, rng, -1, 1);
  std::vector<Tensor> xs, ys;
  for (int i = 0; i < 20; ++i) {
    xs.push_back(uniform_tensor({3}, rng, -1, 1));
    ys.push_back(fully_connected(xs.back(), {truth, Tensor({2})}));
  }
  SgdConfig cfg;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  Tensor vw({2, 3}), vb({2});
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 100; ++step) {
    double loss = 0.0;
    Tensor gw({2, 3}), gb({2});
    for (std::size_t i = 0; i < xs.size(); ++i) {
      Tensor r = fully_connected(xs[i], layer);
      for (std::size_t k = 0; k < 2; ++k) r[k] -= ys[i][k];
      loss += 0.5 * (r[0] * r[0] + r[1] * r[1]) / 20.0;
      const FcGrads g = fully_connected_backward(xs[i], layer, r);
      gw += g.weights;
      gb += g.bias;
    }
    gw *= 1.0 / 20.0;
    gb *= 1.0 / 20.0;
    EXPECT_LT(loss, prev) << "step " << step;
    prev = loss;
    sgd_apply(layer.weights, gw, vw, cfg, 0.01);
    sgd_apply(layer.bias, gb, vb, cfg, 0.01);
  }
}

TEST(Sgd, NonFiniteLossNamesBatch) {
  StagedNetwork net = build_network(tiny_config(0), 1);
  net.head.bias[0] = std::numeric_limits<double>::infinity();
  Dataset d = toy_data(2, 1);
  d[1].id = 42;
  SgdState st;
  try {
    sgd_step(net, pointers(d), LossKind::softmax(), small_sgd(), {}, st);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFinite);
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("lr="), std::string::npos);
  }
}

TEST(Sgd, LastEpochScaleOnlyTouchesTheFinalEpoch) {
  const Dataset d = toy_data(24, 6);
  SgdConfig cfg = small_sgd();
  cfg.epochs = 3;
  const auto run = [&](double scale, int epochs) {
    StagedNetwork net = build_network(tiny_config(0), 3);
    SgdConfig c = cfg;
    c.epochs = epochs;
    c.last_epoch_lr_scale = scale;
    std::vector<LossRow> rows;
    train_phase(net, d, LossKind::hinge(), c, {}, "p", rows);
    return std::make_pair(rows, params(net));
  };
  const auto [plain_rows, plain] = run(1.0, 3);
  const auto [decayed_rows, decayed] = run(0.1, 3);
  const std::size_t per_epoch = plain_rows.size() / 3;
  // Losses are taken before each update, so the first step of the last epoch still matches.
  for (std::size_t i = 0; i <= 2 * per_epoch; ++i) EXPECT_EQ(plain_rows[i].loss, decayed_rows[i].loss) << i;
  EXPECT_NE(plain.at("fc6.w"), decayed.at("fc6.w"));
  // A single-epoch phase is not decayed.
  EXPECT_EQ(run(1.0, 1).second.at("fc6.w"), run(0.1, 1).second.at("fc6.w"));
}

TEST(Sgd, TrainingReducesLoss) {
  StagedNetwork net = build_network(tiny_config(0), 3);
  const Dataset d = toy_data(40, 4);
  std::vector<LossRow> rows;
  SgdConfig cfg = small_sgd();
  cfg.epochs = 15;
  train_phase(net, d, LossKind::hinge(), cfg, {}, "p", rows);
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += rows[i].loss;
    last += rows[rows.size() - 1 - i].loss;
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(MultiStage, StagedTrainingInvariants) {
  const int T = 2;
  StagedNetwork net = build_network(tiny_config(T, true), 6);
  const Dataset d = toy_data(24, 6);
  std::vector<Tensor> before_randomize;
  std::map<std::string, Tensor> step_snapshot;
  int branch_steps = 0;
  TrainHooks hooks;
  hooks.on_boundary = [&](const std::string& e, const StagedNetwork& n) {
    if (e == "base_done") {
      n.for_each_param([&](const std::string& name, const Tensor& t) {
        if (stage_of(name) > 0) {
          EXPECT_TRUE(t.all_zero()) << name;
        }
      });
    }
    if (e.ends_with("_randomized_before")) before_randomize = probe(n, d);
    if (e.ends_with("_randomized_after")) {
      EXPECT_EQ(probe(n, d), before_randomize) << e;
      const std::size_t t = static_cast<std::size_t>(e[5] - '1');
      EXPECT_FALSE(n.stages[t].fc6.weights.all_zero());
      EXPECT_TRUE(n.stages[t].w8.all_zero());
    }
  };
  hooks.on_step = [&](const std::string& phase, StepEvent ev, const StagedNetwork& n) {
    if (!phase.ends_with("branch")) return;
    const int t = phase[5] - '0';
    if (ev == StepEvent::kBefore) {
      step_snapshot = params(n);
      return;
    }
    ++branch_steps;
    n.for_each_param([&](const std::string& name, const Tensor& w) {
      if (stage_of(name) != t) {
        EXPECT_EQ(w, step_snapshot.at(name)) << phase << " " << name;
      }
    });
  };
  std::vector<LossRow> rows;
  multistage_train(net, d, T, LossKind::hinge(), small_sgd(), rows, hooks);
  EXPECT_GT(branch_steps, 0);
  EXPECT_FALSE(net.stages[1].w8.all_zero());
  std::set<std::string> phases;
  for (const LossRow& r : rows) phases.insert(r.phase);
  EXPECT_EQ(phases, (std::set<std::string>{"base", "stage1.branch", "stage1.joint", "stage2.branch",
                                            "stage2.joint"}));
}

TEST(MultiStage, LaterStagesStayPinnedDuringEarlierOnes) {
  StagedNetwork net = build_network(tiny_config(2), 7);
  TrainHooks hooks;
  hooks.on_boundary = [&](const std::string& e, const StagedNetwork& n) {
    if (e == "stage1_joint_done") {
      n.for_each_param([&](const std::string& name, const Tensor& t) {
        if (stage_of(name) == 2) {
          EXPECT_TRUE(t.all_zero()) << name;
        }
      });
    }
  };
  std::vector<LossRow> rows;
  multistage_train(net, toy_data(12, 7), 2, LossKind::hinge(), small_sgd(), rows, hooks);
}

TEST(MultiStage, ZeroStagesEqualsPlainFineTune) {
  const Dataset d = toy_data(16, 8);
  StagedNetwork a = build_network(tiny_config(2), 8);
  StagedNetwork b = a;
  std::vector<LossRow> ra, rb;
  multistage_train(a, d, 0, LossKind::hinge(), small_sgd(), ra);
  train_phase(b, d, LossKind::hinge(), small_sgd(), stage_mask(b, 0, false), "base", rb);
  EXPECT_EQ(model_to_json(a), model_to_json(b));
}

TEST(MultiStage, RejectsTooManyStages) {
  StagedNetwork net = build_network(tiny_config(1), 1);
  std::vector<LossRow> rows;
  try {
    multistage_train(net, toy_data(4, 1), 2, LossKind::hinge(), small_sgd(), rows);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
}

TEST(MultiStage, DeterministicAcrossRunsAndThreadCounts) {
  const Dataset d = toy_data(16, 9);
  std::string reference;
  for (const char* threads : {"1", "3", "1"}) {
    setenv("DEFNET_THREADS", threads, 1);
    StagedNetwork net = build_network(tiny_config(1, true), 9);
    std::vector<LossRow> rows;
    multistage_train(net, d, 1, LossKind::hinge(), small_sgd(), rows);
    const std::string j = model_to_json(net).dump();
    if (reference.empty()) reference = j;
    EXPECT_EQ(j, reference) << "threads=" << threads;
  }
  unsetenv("DEFNET_THREADS");
}

namespace {

ScheduleData schedule_data() {
  ScheduleData s;
  s.whole_image = {"scene", 2, {}};
  for (const Sample& x : toy_data(8, 10, false)) {
    s.whole_image.samples.push_back({x.image, std::get<std::size_t>(x.target) % 2, x.id});
  }
  s.object_crops = {"object", 3, toy_data(12, 11, false)};
  s.detection = {"detection", 3, toy_data(16, 12)};
  return s;
}

}  // namespace

TEST(Schedule, SchemeTwoDropsOnlyTheWholeImagePhase) {
  const ScheduleData d = schedule_data();
  std::vector<std::string> one, two;
  for (const PhasePlan& p : plan_phases(ScheduleKind::kSchemeOne, d, LossKind::hinge())) one.push_back(p.name);
  for (const PhasePlan& p : plan_phases(ScheduleKind::kSchemeTwo, d, LossKind::hinge())) two.push_back(p.name);
  EXPECT_EQ(one, (std::vector<std::string>{"image", "object", "detection"}));
  one.erase(one.begin());
  EXPECT_EQ(one, two);
}

TEST(Schedule, SchemeOneRunsAllPhasesAndResetsClassifier) {
  const ScheduleData d = schedule_data();
  StagedNetwork net = build_network(tiny_config(1), 11);
  std::vector<LossRow> rows;
  run_schedule(net, ScheduleKind::kSchemeOne, 1, d, small_sgd(), rows);
  std::set<std::string> phases;
  for (const LossRow& r : rows) phases.insert(r.phase);
  EXPECT_TRUE(phases.count("image"));
  EXPECT_TRUE(phases.count("object"));
  EXPECT_TRUE(phases.count("detection.stage1.joint"));
  EXPECT_EQ(net.config.num_classes, 3);
  EXPECT_EQ(net.schedule_id, "scheme1-T1");
}

TEST(Schedule, SinglePhaseEqualsPlainTraining) {
  const ScheduleData d = schedule_data();
  StagedNetwork a = build_network(tiny_config(0), 12);
  StagedNetwork b = a;
  std::vector<LossRow> ra, rb;
  run_schedule(a, ScheduleKind::kPlain, 0, d, small_sgd(), ra);
  SgdConfig cfg = small_sgd();
  cfg.seed = sub_seed(cfg.seed, "phase.detection");
  train_phase(b, d.detection.samples, LossKind::hinge(), cfg, stage_mask(b, 0, false), "detection.base", rb);
  EXPECT_EQ(model_to_json(a)["tensors"], model_to_json(b)["tensors"]);
}

TEST(Schedule, LabelOutsideLabelSetIsRejected) {
  ScheduleData d = schedule_data();
  d.object_crops.samples[0].target = std::size_t{7};
  StagedNetwork net = build_network(tiny_config(0), 1);
  std::vector<LossRow> rows;
  try {
    run_schedule(net, ScheduleKind::kSchemeTwo, 0, d, small_sgd(), rows);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSchemaViolation);
  }
}

TEST(Schedule, ParseNames) {
  EXPECT_EQ(parse_schedule("scheme2"), ScheduleKind::kSchemeTwo);
  EXPECT_EQ(schedule_name(parse_schedule("multistage")), "multistage");
  EXPECT_THROW(parse_schedule("cascade"), Error);
}
