#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "defnet/data.hpp"
#include "defnet/eval.hpp"
#include "test_util.hpp"

using namespace defnet;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("defnet_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool is_ink(const Image& img, int x, int y) { return img.at(x, y, 0) == 40; }

}  // namespace

TEST(Scene, DisksAreSharedByTwoClasses) {
  int classes_with_disks = 0;
  for (int k = 0; k < kNumShapeClasses; ++k) {
    for (const Part& p : nominal_parts(k, 2)) {
      if (p.shape == PartShape::kDisk) {
        ++classes_with_disks;
        break;
      }
    }
  }
  EXPECT_GE(classes_with_disks, 2);
}

TEST(Scene, JitterIsBoundedByRadius) {
  SceneSpec spec;
  spec.jitter = 3;
  Rng rng(1);
  int max_seen = 0;
  for (int i = 0; i < 1000; ++i) {
    const ObjectLayout o = compose_object(i % kNumShapeClasses, spec, rng);
    for (const Part& p : o.parts) {
      EXPECT_LE(std::abs(p.dx), 3);
      EXPECT_LE(std::abs(p.dy), 3);
      max_seen = std::max({max_seen, std::abs(p.dx), std::abs(p.dy)});
    }
  }
  EXPECT_EQ(max_seen, 3);
}

TEST(Scene, SameSeedSameImage) {
  const SceneSpec spec;
  const GeneratedImage a = generate_image(spec, 17), b = generate_image(spec, 17), c = generate_image(spec, 18);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.record, b.record);
  EXPECT_FALSE(a.image == c.image);
}

TEST(Scene, ObjectsInsideImageAndBoxesTight) {
  SceneSpec spec;
  spec.noise = 0.0;
  spec.clutter_parts = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const GeneratedImage g = generate_image(spec, seed);
    ASSERT_FALSE(g.record.objects.empty());
    for (const ObjectRecord& o : g.record.objects) {
      ASSERT_GE(o.box.x1, 0);
      ASSERT_GE(o.box.y1, spec.band_height);
      ASSERT_LE(o.box.x2, spec.image_size);
      ASSERT_LE(o.box.y2, spec.image_size - spec.band_height);
      // Every edge row/column of the box carries ink.
      const int x1 = static_cast<int>(o.box.x1), y1 = static_cast<int>(o.box.y1);
      const int x2 = static_cast<int>(o.box.x2) - 1, y2 = static_cast<int>(o.box.y2) - 1;
      bool top = false, bottom = false, left = false, right = false;
      for (int x = x1; x <= x2; ++x) {
        top |= is_ink(g.image, x, y1);
        bottom |= is_ink(g.image, x, y2);
      }
      for (int y = y1; y <= y2; ++y) {
        left |= is_ink(g.image, x1, y);
        right |= is_ink(g.image, x2, y);
      }
      EXPECT_TRUE(top && bottom && left && right) << "seed " << seed;
    }
    // No ink outside the boxes.
    for (int y = 0; y < spec.image_size; ++y) {
      for (int x = 0; x < spec.image_size; ++x) {
        if (!is_ink(g.image, x, y)) continue;
        bool covered = false;
        for (const ObjectRecord& o : g.record.objects) {
          covered |= x >= o.box.x1 && x < o.box.x2 && y >= o.box.y1 && y < o.box.y2;
        }
        ASSERT_TRUE(covered) << "seed " << seed << " pixel " << x << "," << y;
      }
    }
  }
}

TEST(Scene, NoNoiseNoJitterObjectsAreTranslates) {
  SceneSpec spec;
  spec.noise = 0.0;
  spec.jitter = 0;
  spec.bulbs_min = spec.bulbs_max = 3;
  std::map<int, std::vector<bool>> reference;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const GeneratedImage g = generate_image(spec, seed);
    for (const ObjectRecord& o : g.record.objects) {
      std::vector<bool> mask;
      for (int y = static_cast<int>(o.box.y1); y < static_cast<int>(o.box.y2); ++y) {
        for (int x = static_cast<int>(o.box.x1); x < static_cast<int>(o.box.x2); ++x) {
          mask.push_back(is_ink(g.image, x, y));
        }
      }
      const auto [it, fresh] = reference.emplace(o.class_id, mask);
      if (!fresh) {
        EXPECT_EQ(it->second, mask) << "class " << o.class_id << " seed " << seed;
      }
    }
  }
  EXPECT_EQ(reference.size(), 4u);
}

TEST(Scene, SceneTypeExcludesItsClass) {
  const SceneSpec spec;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const GeneratedImage g = generate_image(spec, seed);
    for (const ObjectRecord& o : g.record.objects) EXPECT_NE(o.class_id, g.record.scene_type);
  }
}

TEST(Scene, GrayscaleChannelsAgree) {
  SceneSpec spec;
  spec.channels = 1;
  const GeneratedImage g = generate_image(spec, 3);
  for (int y = 0; y < spec.image_size; ++y) {
    for (int x = 0; x < spec.image_size; ++x) {
      ASSERT_EQ(g.image.at(x, y, 0), g.image.at(x, y, 1));
      ASSERT_EQ(g.image.at(x, y, 0), g.image.at(x, y, 2));
    }
  }
}

TEST(Dataset, ByteIdenticalAcrossRuns) {
  const std::vector<SplitCount> splits{{"train", 12}, {"val", 5}};
  const std::string a = fresh_dir("det_a"), b = fresh_dir("det_b");
  save_manifest(generate_dataset(SceneSpec{}, splits, 99, a), a + "/manifest.jsonl");
  save_manifest(generate_dataset(SceneSpec{}, splits, 99, b), b + "/manifest.jsonl");
  EXPECT_EQ(slurp(a + "/manifest.jsonl"), slurp(b + "/manifest.jsonl"));
  EXPECT_EQ(slurp(a + "/generator.json"), slurp(b + "/generator.json"));
  for (const auto& e : fs::directory_iterator(fs::path(a) / "images")) {
    EXPECT_EQ(slurp(e.path().string()), slurp((fs::path(b) / "images" / e.path().filename()).string()));
  }
}

TEST(Dataset, CountsSplitsAndInstances) {
  const std::string dir = fresh_dir("counts");
  const DatasetManifest m = generate_dataset(SceneSpec{}, {{"train", 20}, {"val", 7}}, 3, dir);
  EXPECT_EQ(m.split("train").size(), 20u);
  EXPECT_EQ(m.split("val").size(), 7u);
  std::map<int, int> per_class;
  for (const ImageRecord& r : m.records) {
    for (const ObjectRecord& o : r.objects) ++per_class[o.class_id];
  }
  for (const auto& [k, n] : per_class) EXPECT_EQ(m.generator["class_instances"][std::to_string(k)].get<int>(), n);
}

TEST(Manifest, RoundTrip) {
  const std::string dir = fresh_dir("roundtrip");
  const DatasetManifest m = generate_dataset(SceneSpec{}, {{"train", 6}}, 4, dir);
  save_manifest(m, dir + "/manifest.jsonl");
  const DatasetManifest back = load_manifest(dir + "/manifest.jsonl");
  EXPECT_EQ(back.records, m.records);
  EXPECT_EQ(back.generator, m.generator);
}

TEST(Manifest, MissingImageNamesPath) {
  const std::string dir = fresh_dir("missing");
  const DatasetManifest m = generate_dataset(SceneSpec{}, {{"train", 3}}, 4, dir);
  save_manifest(m, dir + "/manifest.jsonl");
  fs::remove(m.image_path(m.records[1]));
  try {
    load_manifest(dir + "/manifest.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingFile);
    EXPECT_NE(std::string(e.what()).find(m.records[1].path), std::string::npos);
  }
}

TEST(Manifest, OverlappingSplitsRejected) {
  const std::string dir = fresh_dir("overlap");
  DatasetManifest m = generate_dataset(SceneSpec{}, {{"train", 2}, {"val", 2}}, 4, dir);
  m.records[2].id = m.records[0].id;
  save_manifest(m, dir + "/manifest.jsonl");
  try {
    load_manifest(dir + "/manifest.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSchemaViolation);
  }
}

TEST(Manifest, MalformedRecord) {
  const std::string dir = fresh_dir("malformed");
  std::ofstream(dir + "/manifest.jsonl") << "{\"id\": \"x\", \"path\": \n";
  try {
    load_manifest(dir + "/manifest.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMalformedFile);
  }
  std::ofstream(dir + "/manifest.jsonl") << "{\"id\": \"x\"}\n";
  try {
    load_manifest(dir + "/manifest.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSchemaViolation);
  }
}

TEST(Proposals, ExactCopiesGiveFullRecall) {
  const std::string dir = fresh_dir("exact");
  const DatasetManifest m = generate_dataset(SceneSpec{}, {{"val", 30}}, 5, dir);
  ProposalPolicy p;
  p.exact_copies = true;
  p.per_gt = 0;
  p.subboxes_per_gt = 0;
  EXPECT_DOUBLE_EQ(proposal_recall(generate_proposals(m, p, 48, 1), ground_truth(m, "val")), 1.0);
}

TEST(Proposals, NegativesOnlyGiveZeroRecall) {
  ImageRecord r{"im", "im.ppm", "val", 0, {{{10, 10, 24, 27}, 0}}};
  DatasetManifest m;
  m.records = {r};
  ProposalPolicy p;
  p.per_gt = 0;
  p.subboxes_per_gt = 0;
  p.negatives = 0;
  EXPECT_DOUBLE_EQ(proposal_recall(generate_proposals(m, p, 48, 1), ground_truth(m, "val")), 0.0);
}

TEST(Proposals, DefaultPolicyRecallNearNinety) {
  const std::string dir = fresh_dir("calib");
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const DatasetManifest m = generate_dataset(SceneSpec{}, {{"val", 300}}, seed, dir);
    const double r = proposal_recall(generate_proposals(m, ProposalPolicy{}, 48, seed), ground_truth(m, "val"));
    EXPECT_NEAR(r, 0.9, 0.03) << "seed " << seed;
  }
}

TEST(Proposals, CornerSubboxesAreHalfSize) {
  const BoundingBox r{2, 4, 12, 20};
  const auto s = corner_subboxes(r);
  for (const BoundingBox& b : s) {
    EXPECT_DOUBLE_EQ(b.width(), 5);
    EXPECT_DOUBLE_EQ(b.height(), 8);
  }
  EXPECT_EQ(s[0].x1, r.x1);
  EXPECT_EQ(s[0].y1, r.y1);
  EXPECT_EQ(s[3].x2, r.x2);
  EXPECT_EQ(s[3].y2, r.y2);
}

TEST(Proposals, FileRoundTrip) {
  std::vector<ScoredProposal> ps{{"a", 0, {1, 2, 3, 4}, Tensor::vector({-1.2, 0.5})}, {"a", 1, {0, 0, 9, 9}, {}}};
  const std::string path = ::testing::TempDir() + "props.jsonl";
  save_proposals(ps, path);
  const auto back = load_proposals(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].scores, ps[0].scores);
  EXPECT_TRUE(back[1].scores.empty());
  EXPECT_EQ(back[1].source_id, 1);
}

TEST(Image, PpmRoundTripAndErrors) {
  const GeneratedImage g = generate_image(SceneSpec{}, 1);
  const std::string path = ::testing::TempDir() + "img.ppm";
  write_ppm(g.image, path);
  EXPECT_EQ(read_ppm(path), g.image);
  const std::string text = slurp(path);
  std::ofstream(path, std::ios::binary) << text.substr(0, text.size() - 10);
  try {
    read_ppm(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMalformedFile);
  }
}

TEST(Image, WarpOfFullSizeCropIsIdentity) {
  Rng rng(2);
  const Tensor img = uniform_tensor({3, 16, 16}, rng, -1, 1);
  EXPECT_EQ(crop_and_warp(img, {0, 0, 16, 16}, 16, 16), img);
  // An integer-aligned sub-window at its own size copies the pixels.
  const Tensor sub = crop_and_warp(img, {3, 5, 11, 9}, 4, 8);
  EXPECT_EQ(sub.at(1, 2, 3), img.at(1, 7, 6));
}

TEST(Image, DegenerateCropRejected) {
  const Tensor img({3, 8, 8});
  try {
    crop_and_warp(img, {9, 9, 12, 12}, 4, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kGeometry);
  }
}
