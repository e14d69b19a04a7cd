#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "defnet/detector.hpp"
#include "defnet/experiment.hpp"
#include "test_util.hpp"

using namespace defnet;

namespace {

ScoredProposal scored(std::vector<double> s, int id = 0) {
  return {"img", id, {0, 0, 10, 10}, Tensor::vector(std::move(s))};
}

BoundingBox random_box(Rng& rng, double size = 48.0) {
  const double w = uniform(rng, 2.0, size / 2), h = uniform(rng, 2.0, size / 2);
  const double x = uniform(rng, 0.0, size - w), y = uniform(rng, 0.0, size - h);
  return {x, y, x + w, y + h};
}

std::vector<ScoredProposal> random_proposals(Rng& rng, int n, std::size_t K) {
  std::vector<ScoredProposal> out;
  for (int i = 0; i < n; ++i) out.push_back({"img", i, random_box(rng), uniform_tensor({K}, rng, -2.5, 0.5)});
  return out;
}

struct WarningCapture {
  std::vector<std::string> seen;
  std::function<void(const std::string&)> saved = warning_sink();
  WarningCapture() {
    warning_sink() = [this](const std::string& m) { seen.push_back(m); };
  }
  ~WarningCapture() { warning_sink() = saved; }
};

NetworkConfig small_net(int K, bool def_branch = false) {
  NetworkConfig c;
  c.height = c.width = 8;
  c.trunk = {{4, 3, 1, -1, 2}, {4, 3, 1, -1, 2}};
  c.fc_width = 8;
  c.num_classes = K;
  c.def_branch.enabled = def_branch;
  c.def_branch.part_filter_sizes = {3};
  c.def_branch.part_channels = 2;
  return c;
}

LinearClassifier random_classifier(Rng& rng, std::size_t K, std::size_t D) {
  return {uniform_tensor({K, D}, rng, -1, 1), uniform_tensor({K}, rng, -1, 1), uniform_tensor({D}, rng, -0.1, 0.1),
          uniform_tensor({D}, rng, 0.5, 2.0), std::vector<int>(K, 1)};
}

// A detector with random weights and every side model present.
Detector random_detector(std::uint64_t seed, int K = 3) {
  Rng rng(seed);
  Detector d;
  DetectorMember m;
  m.id = "m";
  m.net = build_network(small_net(K, true), seed);
  const std::size_t F = m.net.feature_size();
  m.subbox = random_classifier(rng, static_cast<std::size_t>(K), 3 * F);
  m.context_raw = random_classifier(rng, static_cast<std::size_t>(K), static_cast<std::size_t>(K) + 2);
  m.context_subbox = random_classifier(rng, static_cast<std::size_t>(K), static_cast<std::size_t>(K) + 2);
  m.regressor = BoxRegressor{uniform_tensor({4, F}, rng, -0.01, 0.01), uniform_tensor({4}, rng, -0.05, 0.05)};
  d.members.push_back(std::move(m));
  d.first_pass = build_network(small_net(K), seed + 1);
  NetworkConfig ctx = small_net(2);
  d.context_net = build_network(ctx, seed + 2);
  return d;
}

Tensor random_image(std::uint64_t seed, std::size_t size = 48) {
  Rng rng(seed);
  return uniform_tensor({3, size, size}, rng, -0.5, 0.5);
}

// Brute-force suppression: scan the survivors repeatedly for the best-ranked
// detection not yet decided, keep it, and delete everything it covers.
std::vector<Detection> nms_oracle(std::vector<Detection> dets, double thr) {
  std::vector<Detection> kept;
  while (!dets.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < dets.size(); ++i) {
      const bool higher = dets[i].confidence > dets[best].confidence ||
                          (dets[i].confidence == dets[best].confidence && dets[i].id < dets[best].id);
      if (higher) best = i;
    }
    const Detection top = dets[best];
    kept.push_back(top);
    std::vector<Detection> rest;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (i == best) continue;
      if (dets[i].class_id == top.class_id && iou(dets[i].box, top.box) > thr) continue;
      rest.push_back(dets[i]);
    }
    dets = std::move(rest);
  }
  return kept;
}

}  // namespace

// ---------------------------------------------------------------------------
// Rejection

TEST(Rejection, Examples) {
  EXPECT_TRUE(is_rejected(scored({-1.2, -1.5}), -1.1));
  EXPECT_FALSE(is_rejected(scored({-1.0, -3.0}), -1.1));
  EXPECT_FALSE(is_rejected(scored({-1.1, -3.0}), -1.1));  // equality is kept
}

TEST(Rejection, PartitionFollowsPredicate) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const auto props = random_proposals(rng, 40, 3);
    const RejectionSplit s = reject_proposals(props);
    ASSERT_EQ(s.kept.size() + s.rejected.size(), props.size());
    std::set<int> kept, rejected;
    for (const auto& p : s.kept) kept.insert(p.source_id);
    for (const auto& p : s.rejected) rejected.insert(p.source_id);
    for (const auto& p : props) {
      const bool below = max_score(p.scores) < kDefaultRejectThreshold;
      EXPECT_EQ(rejected.count(p.source_id), below ? 1u : 0u);
      EXPECT_EQ(kept.count(p.source_id), below ? 0u : 1u);
    }
  }
}

TEST(Rejection, UnscoredProposalIsAnError) {
  ScoredProposal p{"img", 0, {0, 0, 5, 5}, Tensor()};
  EXPECT_THROW(reject_proposals({p}), Error);
}

TEST(Rejection, SweepIsMonotone) {
  Rng rng(2);
  GroundTruthSet gts;
  std::vector<ScoredProposal> props;
  for (int i = 0; i < 30; ++i) {
    const BoundingBox b = random_box(rng);
    gts.push_back({"img", b, 0});
    props.push_back({"img", i, b, uniform_tensor({3}, rng, -2.5, 0.5)});
  }
  auto more = random_proposals(rng, 60, 3);
  for (auto& p : more) p.source_id += 100;
  props.insert(props.end(), more.begin(), more.end());
  std::vector<double> ts;
  for (int i = -30; i <= 6; ++i) ts.push_back(i * 0.1);
  const auto rows = rejection_sweep(props, gts, ts);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_GE(rows[i].rejection_rate, rows[i - 1].rejection_rate);
    EXPECT_LE(rows[i].recall, rows[i - 1].recall);
  }
  EXPECT_EQ(rows.front().rejection_rate, 0.0);
  EXPECT_EQ(rows.front().recall, 1.0);
  const double t = calibrate_threshold(props, gts, ts, 0.1);
  EXPECT_GE(proposal_recall(reject_proposals(props, t).kept, gts), 0.9);
}

// ---------------------------------------------------------------------------
// Scoring

TEST(ScoreBox, Deterministic) {
  const StagedNetwork net = build_network(small_net(3, true), 4);
  const Tensor img = random_image(5);
  const BoundingBox b{3.5, 2, 17, 20.25};
  const BoxScore a = score_box(net, img, b), c = score_box(net, img, b);
  EXPECT_EQ(a.scores, c.scores);
  EXPECT_EQ(a.feature, c.feature);
  EXPECT_EQ(a.feature.size(), net.feature_size());
}

TEST(ScoreBox, DegenerateBoxIsAGeometryError) {
  const StagedNetwork net = build_network(small_net(3), 4);
  try {
    score_box(net, random_image(5, 24), {30, 30, 40, 40});  // entirely outside a 24-pixel image
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kGeometry);
  }
}

TEST(ScoreBox, CropOfNetworkSizedRegionIsIdentity) {
  const StagedNetwork net = build_network(small_net(3), 4);
  const Tensor img = random_image(6);
  const Tensor crop = crop_for(net, img, {5, 7, 13, 15});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < 8; ++y) {
      for (std::size_t x = 0; x < 8; ++x) EXPECT_EQ(crop.at(c, y, x), img.at(c, y + 7, x + 5));
    }
  }
}

// ---------------------------------------------------------------------------
// Sub-box features

TEST(SubboxGeometry, HalfSizeCornerAnchored) {
  Rng rng(7);
  for (int t = 0; t < 1000; ++t) {
    const BoundingBox r = random_box(rng);
    const auto subs = corner_subboxes(r);
    std::set<std::pair<double, double>> corners;
    for (const BoundingBox& s : subs) {
      EXPECT_NEAR(s.width(), r.width() / 2, 1e-12);
      EXPECT_NEAR(s.height(), r.height() / 2, 1e-12);
      // Exactly one corner of the sub-box coincides with a root corner.
      int shared = 0;
      for (double x : {s.x1, s.x2}) {
        for (double y : {s.y1, s.y2}) {
          if ((x == r.x1 || x == r.x2) && (y == r.y1 || y == r.y2)) {
            ++shared;
            corners.insert({x, y});
          }
        }
      }
      EXPECT_EQ(shared, 1);
    }
    EXPECT_EQ(corners.size(), 4u);
  }
}

TEST(SubboxFeatures, ExactSubboxesAreSelected) {
  const BoundingBox root{4, 6, 20, 18};
  std::vector<ScoredProposal> props{{"img", 10, root, {}}};
  int id = 20;
  for (const BoundingBox& s : corner_subboxes(root)) props.push_back({"img", id++, s, {}});
  FeatureStore store;
  store[10] = Tensor::vector({0, 0, 0});
  store[20] = Tensor::vector({1, 5, -1});
  store[21] = Tensor::vector({2, 4, -2});
  store[22] = Tensor::vector({3, 3, -3});
  store[23] = Tensor::vector({4, 2, -4});
  const SubboxFeature f = subbox_features(props[0], props, store);
  EXPECT_EQ(f.selected, (std::array<int, 4>{20, 21, 22, 23}));
  EXPECT_EQ(f.combined, Tensor::vector({0, 0, 0, 4, 5, -1, 2.5, 3.5, -2.5}));
}

TEST(SubboxFeatures, SingleCandidateGivesEqualMaxAndMean) {
  const ScoredProposal root{"img", 3, {0, 0, 16, 16}, {}};
  FeatureStore store{{3, Tensor::vector({0.25, -7, 3})}};
  const SubboxFeature f = subbox_features(root, {root}, store);
  EXPECT_EQ(f.selected, (std::array<int, 4>{3, 3, 3, 3}));
  EXPECT_EQ(f.combined, Tensor::vector({0.25, -7, 3, 0.25, -7, 3, 0.25, -7, 3}));
}

TEST(SubboxFeatures, IouTiesPickLowestId) {
  const BoundingBox root{0, 0, 20, 20};
  // Two copies of the top-left sub-box under different ids.
  std::vector<ScoredProposal> props{{"img", 9, {0, 0, 10, 10}, {}}, {"img", 4, {0, 0, 10, 10}, {}}};
  EXPECT_EQ(select_subbox_proposals(root, props)[0], 4);
}

TEST(SubboxFeatures, EmptyProposalSetIsAnError) {
  FeatureStore store{{0, Tensor::vector({1})}};
  EXPECT_THROW(subbox_features({"img", 0, {0, 0, 4, 4}, {}}, {}, store), Error);
}

TEST(SubboxFeatures, MatchesBruteForceOnRandomStores) {
  Rng rng(8);
  for (int t = 0; t < 200; ++t) {
    const int n = uniform_int(rng, 1, 25);
    auto props = random_proposals(rng, n, 2);
    FeatureStore store;
    for (const auto& p : props) store[p.source_id] = uniform_tensor({6}, rng, -3, 3);
    const ScoredProposal& root = props[static_cast<std::size_t>(uniform_int(rng, 0, n - 1))];
    const SubboxFeature f = subbox_features(root, props, store);
    const auto subs = corner_subboxes(root.box);
    for (std::size_t s = 0; s < 4; ++s) {
      // Selection oracle: the chosen proposal's IoU is maximal and no smaller id ties it.
      const double chosen = iou(subs[s], props[static_cast<std::size_t>(f.selected[s])].box);
      for (const auto& p : props) {
        const double o = iou(subs[s], p.box);
        EXPECT_LE(o, chosen);
        if (o == chosen) {
          EXPECT_GE(p.source_id, f.selected[s]);
        }
      }
    }
    for (std::size_t i = 0; i < 6; ++i) {
      double mean = 0.0, lo = 1e300, hi = -1e300;
      for (int id : f.selected) {
        mean += store[id][i] / 4.0;
        lo = std::min(lo, store[id][i]);
        hi = std::max(hi, store[id][i]);
      }
      EXPECT_EQ(f.combined[i], store[root.source_id][i]);
      EXPECT_EQ(f.combined[6 + i], hi);
      EXPECT_NEAR(f.combined[12 + i], mean, 1e-12);
      EXPECT_LE(lo, f.combined[12 + i]);
      EXPECT_LE(f.combined[12 + i], f.combined[6 + i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Linear classifiers and context fusion

TEST(LinearClassifier, SeparableToyReachesZeroHingeLoss) {
  // K=2 detection scores plus one context score; class 0 iff x0 > x1,
  // background when both are low.
  Rng rng(9);
  std::vector<Tensor> x;
  std::vector<int> y;
  for (int i = 0; i < 120; ++i) {
    const int label = i % 3 - 1;
    const double a = label == 0 ? 2.0 : label == 1 ? -2.0 : -2.0;
    const double b = label == 1 ? 2.0 : -2.0;
    x.push_back(Tensor::vector({a + uniform(rng, -0.3, 0.3), b + uniform(rng, -0.3, 0.3), uniform(rng, -1, 1)}));
    y.push_back(label);
  }
  LinearTrainConfig cfg;
  cfg.l2 = 0.0;
  cfg.epochs = 200;
  const LinearTrainResult r = train_linear_ova(x, y, 2, cfg);
  EXPECT_EQ(r.final_loss, 0.0);
}

TEST(LinearClassifier, AbsentClassIsSkippedWithWarning) {
  WarningCapture w;
  std::vector<Tensor> x{Tensor::vector({1, 0}), Tensor::vector({0, 1}), Tensor::vector({-1, -1})};
  const LinearTrainResult r = train_linear_ova(x, {0, 0, -1}, 3, {});
  EXPECT_TRUE(r.classifier.is_trained(0));
  EXPECT_FALSE(r.classifier.is_trained(1));
  EXPECT_FALSE(r.classifier.is_trained(2));
  ASSERT_EQ(w.seen.size(), 2u);
  EXPECT_NE(w.seen[0].find("class 1"), std::string::npos);
  const Tensor fb = Tensor::vector({7, 8, 9});
  const Tensor s = apply_or_fallback(r.classifier, Tensor::vector({0.5, 0.5}), fb);
  EXPECT_EQ(s[1], 8.0);
  EXPECT_EQ(s[2], 9.0);
}

TEST(LinearClassifier, SaveLoadRoundTrip) {
  Rng rng(10);
  const LinearClassifier c = random_classifier(rng, 3, 5);
  const LinearClassifier back = classifier_from_json(nlohmann::json::parse(classifier_to_json(c).dump()));
  const Tensor x = uniform_tensor({5}, rng, -1, 1);
  EXPECT_EQ(back.apply(x), c.apply(x));
  EXPECT_THROW(classifier_from_json(nlohmann::json{{"weights", "x"}}), Error);
}

TEST(ContextFusion, ZeroContextIsAffineInDetectionScores) {
  Rng rng(11);
  std::vector<Tensor> x;
  std::vector<int> y;
  for (int i = 0; i < 90; ++i) {
    const int label = i % 3 - 1;
    Tensor s = uniform_tensor({2}, rng, -1, 1);
    if (label >= 0) s[static_cast<std::size_t>(label)] += 2.0;
    const Tensor none({1});
    x.push_back(concat({&s, &none}));
    y.push_back(label);
  }
  const LinearClassifier c = train_linear_ova(x, y, 2, {}).classifier;
  const Tensor zero({1});
  const auto f = [&](double a, double b) { return fuse_context(c, Tensor::vector({a, b}), zero); };
  for (int t = 0; t < 20; ++t) {
    const double a = uniform(rng, -3, 3), b = uniform(rng, -3, 3), d = uniform(rng, -3, 3), e = uniform(rng, -3, 3);
    const Tensor lhs = f(a + d, b + e), p = f(a, b), q = f(d, e), o = f(0, 0);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(lhs[k], p[k] + q[k] - o[k], 1e-9);
  }
}

TEST(ContextFusion, ZeroContextWeightsKeepPerClassAp) {
  Rng rng(12);
  const std::size_t K = 3;
  // Fuser: positive diagonal on the detection scores, zero on context.
  LinearClassifier c{Tensor({K, K + 2}), uniform_tensor({K}, rng, -1, 1), uniform_tensor({K + 2}, rng, -1, 1),
                     uniform_tensor({K + 2}, rng, 0.5, 2), std::vector<int>(K, 1)};
  for (std::size_t k = 0; k < K; ++k) c.weights.at(k, k) = uniform(rng, 0.1, 3.0);
  GroundTruthSet gts;
  std::vector<Detection> raw, fused;
  for (int i = 0; i < 60; ++i) {
    const std::string im = "im" + std::to_string(i % 6);
    const BoundingBox b = random_box(rng);
    if (i % 4 == 0) gts.push_back({im, b, i % 3});
    const Tensor s = uniform_tensor({K}, rng, -2, 2), ctx = uniform_tensor({2}, rng, -5, 5);
    const Tensor f = fuse_context(c, s, ctx);
    for (std::size_t k = 0; k < K; ++k) {
      raw.push_back({im, b, static_cast<int>(k), s[k], raw.size()});
      fused.push_back({im, b, static_cast<int>(k), f[k], fused.size()});
    }
  }
  const MapResult a = mean_ap(raw, gts), b = mean_ap(fused, gts);
  EXPECT_EQ(a.per_class, b.per_class);
}

// ---------------------------------------------------------------------------
// Box regression

TEST(BoxRegression, ZeroRegressorKeepsBox) {
  const BoundingBox b{3, 4.5, 20, 30};
  EXPECT_EQ(refine_box(Tensor({5}, 1.0), b, zero_regressor(5), 48, 48), b);
}

TEST(BoxRegression, TargetsInvertOffsets) {
  Rng rng(13);
  for (int t = 0; t < 100; ++t) {
    const BoundingBox a = random_box(rng), b = random_box(rng);
    const BoundingBox back = apply_offsets(a, regression_targets(a, b));
    EXPECT_NEAR(back.x1, b.x1, 1e-9);
    EXPECT_NEAR(back.y2, b.y2, 1e-9);
  }
}

TEST(BoxRegression, RidgeRecoversOffsetsAndImprovesIou) {
  // Features encode the true offsets through a fixed random linear map plus
  // nuisance dimensions.
  Rng rng(14);
  const std::size_t D = 10;
  const Tensor mix = uniform_tensor({D, 4}, rng, -1, 1);
  const auto make = [&](std::vector<Tensor>& f, std::vector<BoundingBox>& boxes, std::vector<BoundingBox>& gts) {
    const BoundingBox gt = random_box(rng);
    const std::array<double, 4> d{uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2), uniform(rng, -0.3, 0.3),
                                  uniform(rng, -0.3, 0.3)};
    // Proposal p such that applying d to p gives gt.
    const double w = gt.width() / std::exp(d[2]), h = gt.height() / std::exp(d[3]);
    const double cx = gt.cx() - d[0] * w, cy = gt.cy() - d[1] * h;
    boxes.push_back({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
    gts.push_back(gt);
    Tensor x({D});
    for (std::size_t i = 0; i < D; ++i) {
      for (std::size_t r = 0; r < 4; ++r) x[i] += mix.at(i, r) * d[r];
    }
    f.push_back(std::move(x));
  };
  std::vector<Tensor> f, tf;
  std::vector<BoundingBox> b, g, tb, tg;
  for (int i = 0; i < 300; ++i) make(f, b, g);
  for (int i = 0; i < 100; ++i) make(tf, tb, tg);
  const BoxRegressor reg = train_box_regressor(f, b, g, 1e-6);
  for (std::size_t i = 0; i < tf.size(); ++i) {
    const auto want = regression_targets(tb[i], tg[i]);
    const auto got = reg.predict(tf[i]);
    for (std::size_t r = 0; r < 4; ++r) EXPECT_NEAR(got[r], want[r], 1e-4);
    // Wide bounds so clamping does not interfere.
    const BoundingBox refined = refine_box(tf[i], tb[i], reg, 1e3, 1e3);
    EXPECT_GE(iou(refined, tg[i]), iou(tb[i], tg[i]));
  }
}

TEST(BoxRegression, OutwardRefinementIsClamped) {
  BoxRegressor reg = zero_regressor(1);
  reg.bias[0] = -0.5;        // move left by half a width
  reg.bias[2] = std::log(2);  // and double the width
  const BoundingBox b = refine_box(Tensor({1}), {0, 10, 10, 20}, reg, 48, 48);
  EXPECT_EQ(b.x1, 0.0);
  EXPECT_GE(b.x2, 0.0);
  EXPECT_TRUE(b.valid());
}

TEST(BoxRegression, NonFiniteOutputKeepsBoxAndWarns) {
  WarningCapture w;
  BoxRegressor reg = zero_regressor(2);
  reg.weights.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const BoundingBox b{1, 2, 9, 12};
  EXPECT_EQ(refine_box(Tensor({2}, 1.0), b, reg, 48, 48), b);
  ASSERT_EQ(w.seen.size(), 1u);
  EXPECT_NE(w.seen[0].find("non-finite"), std::string::npos);
}

// ---------------------------------------------------------------------------
// NMS

TEST(Nms, Examples) {
  const BoundingBox b{0, 0, 10, 10};
  auto kept = nms({{"a", b, 0, 0.8, 0}, {"a", b, 0, 0.9, 1}});
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].confidence, 0.9);
  EXPECT_EQ(nms({{"a", b, 0, 0.8, 0}, {"a", {20, 20, 30, 30}, 0, 0.9, 1}}).size(), 2u);
  // Different classes or images never suppress each other.
  EXPECT_EQ(nms({{"a", b, 0, 0.8, 0}, {"a", b, 1, 0.9, 1}, {"b", b, 0, 0.7, 2}}).size(), 3u);
}

TEST(Nms, ChainOfFiveMatchesOracle) {
  std::vector<Detection> chain;
  for (int i = 0; i < 5; ++i) chain.push_back({"a", {i * 4.0, 0, i * 4.0 + 10, 10}, 0, 1.0 - 0.1 * i, static_cast<std::size_t>(i)});
  const auto kept = nms(chain);
  const auto want = nms_oracle(chain, kDefaultNmsIou);
  ASSERT_EQ(kept.size(), want.size());
  for (std::size_t i = 0; i < kept.size(); ++i) EXPECT_EQ(kept[i].id, want[i].id);
}

TEST(Nms, RandomCasesMatchOracleAndFormAntichain) {
  Rng rng(15);
  for (int t = 0; t < 300; ++t) {
    std::vector<Detection> dets;
    const int n = uniform_int(rng, 0, 25);
    for (int i = 0; i < n; ++i) {
      dets.push_back({"a", random_box(rng, 30), uniform_int(rng, 0, 1), uniform_int(rng, 0, 5) * 0.2,
                      static_cast<std::size_t>(i)});
    }
    const double thr = uniform(rng, 0.1, 0.7);
    const auto kept = nms(dets, thr);
    const auto want = nms_oracle(dets, thr);
    ASSERT_EQ(kept.size(), want.size());
    for (std::size_t i = 0; i < kept.size(); ++i) EXPECT_EQ(kept[i].id, want[i].id);
    for (std::size_t i = 0; i < kept.size(); ++i) {
      for (std::size_t j = i + 1; j < kept.size(); ++j) {
        if (kept[i].class_id == kept[j].class_id) {
          EXPECT_LE(iou(kept[i].box, kept[j].box), thr);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Detection pass

TEST(Detect, ScoringOnlyIsArgmaxAfterNms) {
  const Detector det = random_detector(16);
  const Tensor img = random_image(17);
  Rng rng(18);
  const auto props = random_proposals(rng, 12, 3);
  DetectOptions o;
  o.rejection = o.subbox = o.context = o.refine = false;
  o.argmax_only = true;
  const ImageResult r = detect(det, img, "img", props, o);
  std::vector<Detection> want;
  for (const auto& p : props) {
    const Tensor s = predict(det.members[0].net, crop_for(det.members[0].net, img, p.box));
    const auto k = static_cast<std::size_t>(std::max_element(s.values().begin(), s.values().end()) - s.values().begin());
    want.push_back({"img", p.box, static_cast<int>(k), s[k], want.size()});
  }
  want = nms_oracle(want, kDefaultNmsIou);
  ASSERT_EQ(r.detections.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(r.detections[i].box, want[i].box);
    EXPECT_EQ(r.detections[i].class_id, want[i].class_id);
    EXPECT_EQ(r.detections[i].confidence, want[i].confidence);
  }
}

TEST(Detect, RejectionNeverChangesSurvivorScores) {
  const Detector det = random_detector(19);
  const Tensor img = random_image(20);
  Rng rng(21);
  const auto props = random_proposals(rng, 20, 3);
  // Threshold at the median first-pass score so both sides are non-empty.
  std::vector<double> peaks;
  for (const auto& p : score_with(*det.first_pass, img, props)) peaks.push_back(max_score(p.scores));
  std::sort(peaks.begin(), peaks.end());
  DetectOptions on;
  on.reject_threshold = peaks[peaks.size() / 2];
  on.nms = false;
  DetectOptions off = on;
  off.rejection = false;
  const ImageResult a = detect(det, img, "img", props, on), b = detect(det, img, "img", props, off);
  ASSERT_EQ(b.kept.size(), props.size());
  ASSERT_LT(a.kept.size(), props.size());
  ASSERT_GT(a.kept.size(), 0u);
  for (std::size_t i = 0, j = 0; i < a.kept.size(); ++i) {
    while (b.kept[j].source_id != a.kept[i].source_id) ++j;
    EXPECT_EQ(a.scores[i], b.scores[j]);
  }
}

TEST(Detect, RejectionKeepsExactlyThePredicate) {
  const Detector det = random_detector(22);
  const Tensor img = random_image(23);
  Rng rng(24);
  const auto props = random_proposals(rng, 25, 3);
  DetectOptions o;
  o.reject_threshold = -0.05;
  const ImageResult r = detect(det, img, "img", props, o);
  const RejectionSplit s = reject_proposals(r.first_pass, o.reject_threshold);
  ASSERT_EQ(r.kept.size(), s.kept.size());
  for (std::size_t i = 0; i < s.kept.size(); ++i) EXPECT_EQ(r.kept[i].source_id, s.kept[i].source_id);
}

TEST(Detect, SingleMemberContextOrderDoesNotMatter) {
  const Detector det = random_detector(25);
  const Tensor img = random_image(26);
  Rng rng(27);
  const auto props = random_proposals(rng, 10, 3);
  DetectOptions a;
  a.rejection = false;
  DetectOptions b = a;
  b.context_after_averaging = true;
  EXPECT_EQ(detect(det, img, "img", props, a).scores, detect(det, img, "img", props, b).scores);
}

TEST(Detect, MissingStageModelIsReported) {
  Detector det = random_detector(28);
  det.context_net.reset();
  WarningCapture w;
  const DetectOptions o = det.supported({});
  EXPECT_FALSE(o.context);
  EXPECT_TRUE(o.subbox);
  EXPECT_EQ(w.seen.size(), 1u);
  EXPECT_THROW(detect(det, random_image(29), "img", {}, DetectOptions{}), Error);
}

TEST(Detect, AveragingTwoCopiesEqualsOneMember) {
  Detector one = random_detector(30);
  Detector two = one;
  two.members.push_back(two.members[0]);
  const Tensor img = random_image(31);
  Rng rng(32);
  const auto props = random_proposals(rng, 8, 3);
  DetectOptions o;
  o.rejection = false;
  const auto a = detect(one, img, "img", props, o), b = detect(two, img, "img", props, o);
  EXPECT_EQ(a.scores, b.scores);
}

TEST(DetectorFiles, SaveLoadRoundTrip) {
  const Detector det = random_detector(33);
  const std::string dir = (std::filesystem::temp_directory_path() / "defnet_detector_rt").string();
  std::filesystem::remove_all(dir);
  save_detector_dir(det, dir);
  const Detector back = load_detector_dirs({dir + "/"});
  EXPECT_EQ(back.members[0].id, dir);
  const Tensor img = random_image(34);
  Rng rng(35);
  const auto props = random_proposals(rng, 10, 3);
  const auto a = detect(det, img, "img", props, {}), b = detect(back, img, "img", props, {});
  ASSERT_EQ(a.detections.size(), b.detections.size());
  for (std::size_t i = 0; i < a.detections.size(); ++i) {
    EXPECT_EQ(a.detections[i].box, b.detections[i].box);
    EXPECT_EQ(a.detections[i].confidence, b.detections[i].confidence);
  }
  std::filesystem::remove(dir + "/model.json");
  try {
    load_detector_dirs({dir});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingFile);
  }
  std::filesystem::remove_all(dir);
}

TEST(BenchmarkConfigFile, RoundTrip) {
  BenchmarkConfig c;
  c.train_images = 37;
  c.scene.jitter = 3;
  c.sgd.last_epoch_lr_scale = 0.25;
  c.side_sgd.epochs = 2;
  c.network.def_branch.radius = 2;
  c.stages = 2;
  const nlohmann::json j = benchmark_to_json(c);
  EXPECT_EQ(benchmark_to_json(benchmark_from_json(nlohmann::json::parse(j.dump()))), j);
  EXPECT_EQ(benchmark_from_json(j).sgd.last_epoch_lr_scale, 0.25);
}
