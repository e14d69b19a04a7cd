#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "defnet/geometry.hpp"
#include "defnet/image.hpp"
#include "defnet/parallel.hpp"
#include "defnet/rng.hpp"

namespace defnet {

// ---------------------------------------------------------------------------
// Scene specification

enum class PartShape { kBar, kDisk };

/// One drawn part: a filled rectangle or a disk inscribed in its w x h cell.
/// (x, y) is the top-left corner relative to the object origin; (dx, dy) is
/// the jitter applied to the nominal position.
struct Part {
  PartShape shape = PartShape::kBar;
  int x = 0, y = 0, w = 1, h = 1;
  int dx = 0, dy = 0;
};

struct ObjectLayout {
  int class_id = 0;
  std::vector<Part> parts;
  int min_x = 0, min_y = 0, max_x = 0, max_y = 0;  // extent of drawn parts, max exclusive
};

inline constexpr int kNumShapeClasses = 4;
inline const char* const kClassNames[kNumShapeClasses] = {"light", "cart", "frame", "tee"};

struct SceneSpec {
  int image_size = 48;
  int channels = 3;  // 1 draws gray scenes
  int num_classes = kNumShapeClasses;
  int num_scene_types = kNumShapeClasses;
  int max_objects = 2;
  int clutter_parts = 2;  // maximum loose parts per image
  int jitter = 2;         // per-part displacement bound in pixels
  double noise = 8.0;     // pixel noise std-dev (0-255 scale)
  int bulbs_min = 1;      // disks on a "light"
  int bulbs_max = 4;
  int band_height = 4;    // scene-type color bands at top and bottom
  /// weight[s][k]: relative frequency of class k in scene type s. Empty
  /// selects the default rule "scene s never contains class s".
  std::vector<std::vector<double>> cooccurrence;

  void validate() const {
    require(num_classes >= 2 && num_classes <= kNumShapeClasses, ErrorCode::kInvalidArgument,
            "scene num_classes must be in [2, 4]");
    require(num_scene_types >= 1 && max_objects >= 1 && clutter_parts >= 0 && jitter >= 0 && noise >= 0,
            ErrorCode::kInvalidArgument, "scene spec counts must be non-negative");
    require(channels == 1 || channels == 3, ErrorCode::kInvalidArgument, "scene channels must be 1 or 3");
    require(bulbs_min >= 1 && bulbs_max >= bulbs_min && bulbs_max <= 4, ErrorCode::kInvalidArgument,
            "bulb counts must satisfy 1 <= min <= max <= 4");
    require(image_size >= 32, ErrorCode::kInvalidArgument, "image_size must be >= 32");
    const auto w = weights();
    for (const auto& row : w) {
      require(static_cast<int>(row.size()) == num_classes, ErrorCode::kInvalidArgument,
              "cooccurrence rows need one weight per class");
      double s = 0.0;
      for (double v : row) {
        require(v >= 0.0, ErrorCode::kInvalidArgument, "cooccurrence weights must be >= 0");
        s += v;
      }
      require(s > 0.0, ErrorCode::kInvalidArgument, "every scene type needs some allowed class");
    }
  }

  std::vector<std::vector<double>> weights() const {
    if (!cooccurrence.empty()) return cooccurrence;
    std::vector<std::vector<double>> w(static_cast<std::size_t>(num_scene_types),
                                       std::vector<double>(static_cast<std::size_t>(num_classes), 1.0));
    for (int s = 0; s < num_scene_types; ++s) {
      if (num_classes > 1) w[static_cast<std::size_t>(s)][static_cast<std::size_t>(s % num_classes)] = 0.0;
    }
    return w;
  }
};

inline nlohmann::json scene_to_json(const SceneSpec& s) {
  return {{"image_size", s.image_size}, {"channels", s.channels},     {"num_classes", s.num_classes},
          {"num_scene_types", s.num_scene_types}, {"max_objects", s.max_objects},
          {"clutter_parts", s.clutter_parts},     {"jitter", s.jitter}, {"noise", s.noise},
          {"bulbs_min", s.bulbs_min},             {"bulbs_max", s.bulbs_max},
          {"band_height", s.band_height},         {"cooccurrence", s.weights()}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  try {
    s.image_size = j.value("image_size", s.image_size);
    s.channels = j.value("channels", s.channels);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.num_scene_types = j.value("num_scene_types", s.num_scene_types);
    s.max_objects = j.value("max_objects", s.max_objects);
    s.clutter_parts = j.value("clutter_parts", s.clutter_parts);
    s.jitter = j.value("jitter", s.jitter);
    s.noise = j.value("noise", s.noise);
    s.bulbs_min = j.value("bulbs_min", s.bulbs_min);
    s.bulbs_max = j.value("bulbs_max", s.bulbs_max);
    s.band_height = j.value("band_height", s.band_height);
    s.cooccurrence = j.value("cooccurrence", s.cooccurrence);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchemaViolation, std::string("scene spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Object composition and rendering

/// Nominal part layouts. Disks appear in "light" and "cart"; bars everywhere.
inline std::vector<Part> nominal_parts(int class_id, int bulbs) {
  using enum PartShape;
  switch (class_id) {
    case 0: {  // vertical pole with 1-4 lamps on its right
      std::vector<Part> p{{kBar, 0, 0, 3, 17}};
      for (int b = 0; b < bulbs; ++b) p.push_back({kDisk, 4, 1 + 4 * b, 5, 5});
      return p;
    }
    case 1:  // platform on two wheels
      return {{kBar, 0, 5, 15, 3}, {kDisk, 1, 9, 5, 5}, {kDisk, 9, 9, 5, 5}};
    case 2:  // hollow square
      return {{kBar, 0, 0, 13, 2}, {kBar, 0, 11, 13, 2}, {kBar, 0, 2, 2, 9}, {kBar, 11, 2, 2, 9}};
    case 3:  // cross-bar on a stem
      return {{kBar, 0, 0, 15, 3}, {kBar, 6, 4, 3, 12}};
    default:
      fail(ErrorCode::kInvalidArgument, "unknown shape class " + std::to_string(class_id));
  }
}

inline void update_extent(ObjectLayout& o) {
  o.min_x = o.min_y = 1 << 20;
  o.max_x = o.max_y = -(1 << 20);
  for (const Part& p : o.parts) {
    o.min_x = std::min(o.min_x, p.x);
    o.min_y = std::min(o.min_y, p.y);
    o.max_x = std::max(o.max_x, p.x + p.w);
    o.max_y = std::max(o.max_y, p.y + p.h);
  }
}

/// Samples an instance: part count (for lights) and per-part jitter in
/// [-jitter, jitter] on each axis.
inline ObjectLayout compose_object(int class_id, const SceneSpec& spec, Rng& rng) {
  ObjectLayout o;
  o.class_id = class_id;
  const int bulbs = class_id == 0 ? uniform_int(rng, spec.bulbs_min, spec.bulbs_max) : 0;
  o.parts = nominal_parts(class_id, bulbs);
  for (Part& p : o.parts) {
    p.dx = spec.jitter > 0 ? uniform_int(rng, -spec.jitter, spec.jitter) : 0;
    p.dy = spec.jitter > 0 ? uniform_int(rng, -spec.jitter, spec.jitter) : 0;
    p.x += p.dx;
    p.y += p.dy;
  }
  update_extent(o);
  return o;
}

inline bool inside_disk(int px, int py, const Part& p) {
  const double cx = p.w / 2.0, cy = p.h / 2.0;
  const double dx = px + 0.5 - cx, dy = py + 0.5 - cy;
  const double r = std::min(p.w, p.h) / 2.0;
  return dx * dx + dy * dy <= r * r;
}

inline void draw_part(Image& img, const Part& p, int ox, int oy, const std::uint8_t (&color)[3]) {
  for (int y = 0; y < p.h; ++y) {
    for (int x = 0; x < p.w; ++x) {
      if (p.shape == PartShape::kDisk && !inside_disk(x, y, p)) continue;
      img.set(ox + p.x + x, oy + p.y + y, color);
    }
  }
}

inline const std::uint8_t (&scene_color(int s))[3] {
  static const std::uint8_t palette[8][3] = {{200, 60, 60},  {60, 170, 60},  {70, 90, 210},  {210, 190, 50},
                                             {170, 70, 190}, {50, 180, 190}, {230, 130, 40}, {120, 120, 120}};
  return palette[s % 8];
}

// ---------------------------------------------------------------------------
// Manifest

struct ObjectRecord {
  BoundingBox box;
  int class_id = 0;
  bool operator==(const ObjectRecord&) const = default;
};

struct ImageRecord {
  std::string id;
  std::string path;  // relative to the manifest directory
  std::string split;
  int scene_type = 0;
  std::vector<ObjectRecord> objects;
  bool operator==(const ImageRecord&) const = default;
};

struct DatasetManifest {
  std::vector<ImageRecord> records;
  std::string base_dir;          // directory the relative paths resolve against
  nlohmann::json generator;      // config echo, written as a sidecar file

  std::string image_path(const ImageRecord& r) const { return (std::filesystem::path(base_dir) / r.path).string(); }

  std::vector<const ImageRecord*> split(const std::string& name) const {
    std::vector<const ImageRecord*> out;
    for (const ImageRecord& r : records) {
      if (r.split == name) out.push_back(&r);
    }
    return out;
  }
};

inline nlohmann::json record_to_json(const ImageRecord& r) {
  nlohmann::json objs = nlohmann::json::array();
  for (const ObjectRecord& o : r.objects) objs.push_back({{"box", box_to_json(o.box)}, {"class_id", o.class_id}});
  return {{"id", r.id}, {"path", r.path}, {"split", r.split}, {"scene_type", r.scene_type}, {"objects", objs}};
}

inline ImageRecord record_from_json(const nlohmann::json& j) {
  ImageRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.path = j.at("path").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.scene_type = j.at("scene_type").get<int>();
    for (const auto& o : j.at("objects")) {
      r.objects.push_back({box_from_json(o.at("box")), o.at("class_id").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchemaViolation, std::string("manifest record: ") + e.what());
  }
  return r;
}

inline std::string generator_sidecar(const std::string& manifest_path) {
  return (std::filesystem::path(manifest_path).parent_path() / "generator.json").string();
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write manifest " + path);
  for (const ImageRecord& r : m.records) out << record_to_json(r).dump() << '\n';
  require(static_cast<bool>(out), ErrorCode::kIo, "failed writing manifest " + path);
  if (!m.generator.is_null()) {
    std::ofstream side(generator_sidecar(path), std::ios::binary);
    side << m.generator.dump(1) << '\n';
  }
}

/// Validates record schema, that each split is disjoint from the others (no
/// id appears twice), and that every referenced image exists.
inline void validate_manifest(const DatasetManifest& m) {
  std::map<std::string, std::string> seen;
  for (const ImageRecord& r : m.records) {
    const auto [it, fresh] = seen.emplace(r.id, r.split);
    if (!fresh) {
      fail(ErrorCode::kSchemaViolation, "image id '" + r.id + "' appears in splits '" + it->second + "' and '" +
                                            r.split + "'");
    }
    for (const ObjectRecord& o : r.objects) {
      require(o.class_id >= 0, ErrorCode::kSchemaViolation, "negative class id in record " + r.id);
    }
    const std::string p = m.image_path(r);
    require(std::filesystem::exists(p), ErrorCode::kMissingFile, "manifest references missing image " + p);
  }
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kMissingFile, "cannot open manifest " + path);
  DatasetManifest m;
  m.base_dir = std::filesystem::path(path).parent_path().string();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorCode::kMalformedFile, "manifest " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
    m.records.push_back(record_from_json(j));
  }
  const std::string side = generator_sidecar(path);
  if (std::filesystem::exists(side)) {
    std::ifstream s(side);
    try {
      m.generator = nlohmann::json::parse(s);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorCode::kMalformedFile, "generator sidecar " + side + ": " + e.what());
    }
  }
  validate_manifest(m);
  return m;
}

// ---------------------------------------------------------------------------
// Generation

struct GeneratedImage {
  Image image;
  ImageRecord record;
  std::vector<ObjectLayout> layouts;  // absolute part coordinates
};

inline bool boxes_clear(const std::vector<std::array<int, 4>>& taken, const std::array<int, 4>& b, int gap) {
  for (const auto& t : taken) {
    if (b[0] < t[2] + gap && t[0] < b[2] + gap && b[1] < t[3] + gap && t[1] < b[3] + gap) return false;
  }
  return true;
}

/// Renders one scene. Deterministic in (spec, seed).
inline GeneratedImage generate_image(const SceneSpec& spec, std::uint64_t seed, int scene_type = -1) {
  Rng rng(seed);
  const int S = spec.image_size;
  GeneratedImage g;
  g.image = Image(S, S, 160);
  const int scene = scene_type >= 0 ? scene_type : uniform_int(rng, 0, spec.num_scene_types - 1);
  g.record.scene_type = scene;
  std::uint8_t band[3];
  for (int c = 0; c < 3; ++c) band[c] = scene_color(scene)[c];
  if (spec.channels == 1) {
    const auto gray = static_cast<std::uint8_t>((band[0] + band[1] + band[2]) / 3);
    band[0] = band[1] = band[2] = gray;
  }
  for (int y = 0; y < spec.band_height; ++y) {
    for (int x = 0; x < S; ++x) {
      g.image.set(x, y, band);
      g.image.set(x, S - 1 - y, band);
    }
  }

  const auto weights = spec.weights()[static_cast<std::size_t>(scene)];
  std::discrete_distribution<int> pick_class(weights.begin(), weights.end());
  const int n_objects = uniform_int(rng, 1, spec.max_objects);
  const int top = spec.band_height + 1, bottom = S - spec.band_height - 1;
  std::vector<std::array<int, 4>> taken;
  static const std::uint8_t ink[3] = {40, 40, 40};
  for (int k = 0; k < n_objects; ++k) {
    const int cls = pick_class(rng);
    ObjectLayout o = compose_object(cls, spec, rng);
    const int w = o.max_x - o.min_x, h = o.max_y - o.min_y;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const int x0 = uniform_int(rng, 1, S - 1 - w);
      const int y0 = uniform_int(rng, top, bottom - h);
      const std::array<int, 4> b{x0, y0, x0 + w, y0 + h};
      if (!boxes_clear(taken, b, 3)) continue;
      taken.push_back(b);
      // Shift parts so the layout's extent starts at (x0, y0).
      for (Part& p : o.parts) {
        p.x += x0 - o.min_x;
        p.y += y0 - o.min_y;
      }
      update_extent(o);
      placed = true;
    }
    require(placed || k > 0, ErrorCode::kGeometry, "could not place an object after 200 attempts");
    if (!placed) break;
    for (const Part& p : o.parts) draw_part(g.image, p, 0, 0, ink);
    g.record.objects.push_back({BoundingBox{static_cast<double>(o.min_x), static_cast<double>(o.min_y),
                                            static_cast<double>(o.max_x), static_cast<double>(o.max_y)},
                                cls});
    g.layouts.push_back(std::move(o));
  }

  // Loose parts: the same disks and bars, never overlapping an object.
  const int clutter = spec.clutter_parts > 0 ? uniform_int(rng, 0, spec.clutter_parts) : 0;
  for (int k = 0; k < clutter; ++k) {
    const bool disk = uniform(rng, 0.0, 1.0) < 0.5;
    const bool vertical = uniform(rng, 0.0, 1.0) < 0.5;
    Part p{disk ? PartShape::kDisk : PartShape::kBar, 0, 0, disk ? 5 : (vertical ? 3 : 12), disk ? 5 : (vertical ? 12 : 3)};
    for (int attempt = 0; attempt < 50; ++attempt) {
      const int x0 = uniform_int(rng, 1, S - 1 - p.w);
      const int y0 = uniform_int(rng, top, bottom - p.h);
      const std::array<int, 4> b{x0, y0, x0 + p.w, y0 + p.h};
      if (!boxes_clear(taken, b, 2)) continue;
      taken.push_back(b);
      p.x = x0;
      p.y = y0;
      draw_part(g.image, p, 0, 0, ink);
      break;
    }
  }

  if (spec.noise > 0.0) {
    std::normal_distribution<double> n(0.0, spec.noise);
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        const double d = n(rng);
        for (int c = 0; c < 3; ++c) {
          const double v = g.image.at(x, y, c) + (spec.channels == 1 ? d : d + n(rng) * 0.25);
          g.image.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
    }
  }
  if (spec.channels == 1) {
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) g.image.at(x, y, 1) = g.image.at(x, y, 2) = g.image.at(x, y, 0);
    }
  }
  return g;
}

struct SplitCount {
  std::string name;
  int count = 0;
};

inline std::string image_id(const std::string& split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05d", index);
  return split + "_" + buf;
}

/// Writes images under out_dir/images and returns the manifest (not yet
/// saved). Images are generated in parallel from per-image seeds.
inline DatasetManifest generate_dataset(const SceneSpec& spec, const std::vector<SplitCount>& splits,
                                        std::uint64_t seed, const std::string& out_dir) {
  spec.validate();
  std::set<std::string> names;
  for (const SplitCount& s : splits) {
    require(s.count > 0, ErrorCode::kInvalidArgument, "split '" + s.name + "' needs a positive count");
    require(names.insert(s.name).second, ErrorCode::kInvalidArgument, "split '" + s.name + "' listed twice");
  }
  std::filesystem::create_directories(std::filesystem::path(out_dir) / "images");
  DatasetManifest m;
  m.base_dir = out_dir;
  for (const SplitCount& s : splits) {
    for (int i = 0; i < s.count; ++i) {
      ImageRecord r;
      r.id = image_id(s.name, i);
      r.split = s.name;
      r.path = "images/" + r.id + ".ppm";
      m.records.push_back(std::move(r));
    }
  }
  parallel_for(m.records.size(), [&](std::size_t i) {
    ImageRecord& r = m.records[i];
    GeneratedImage g = generate_image(spec, sub_seed(seed, "image." + r.id));
    write_ppm(g.image, m.image_path(r));
    r.scene_type = g.record.scene_type;
    r.objects = std::move(g.record.objects);
  });
  std::map<int, int> per_class;
  for (const ImageRecord& r : m.records) {
    for (const ObjectRecord& o : r.objects) ++per_class[o.class_id];
  }
  nlohmann::json counts = nlohmann::json::object();
  for (const SplitCount& s : splits) counts[s.name] = s.count;
  nlohmann::json instances = nlohmann::json::object();
  for (const auto& [k, n] : per_class) instances[std::to_string(k)] = n;
  m.generator = {{"seed", seed}, {"scene", scene_to_json(spec)}, {"splits", counts}, {"class_instances", instances}};
  return m;
}

// ---------------------------------------------------------------------------
// Proposals

/// A candidate box; `scores` is empty until a model has scored it.
struct ScoredProposal {
  std::string image_id;
  int source_id = 0;  // index within its image
  BoundingBox box;
  Tensor scores;
};

struct ProposalPolicy {
  int per_gt = 3;              // perturbed copies of each ground-truth box
  double jitter_min = 0.04;    // perturbation std-dev as a fraction of box size,
  double jitter_max = 0.50;    // drawn uniformly per copy
  int subboxes_per_gt = 1;     // perturbed GTs whose four half-size corners are added
  int negatives = 14;          // uniform random boxes
  double negative_min = 8.0;   // negative side length range (pixels)
  double negative_max = 28.0;
  bool exact_copies = false;   // also add each GT box verbatim

  nlohmann::json to_json() const {
    return {{"per_gt", per_gt},     {"jitter_min", jitter_min}, {"jitter_max", jitter_max},
            {"subboxes_per_gt", subboxes_per_gt}, {"negatives", negatives}, {"negative_min", negative_min},
            {"negative_max", negative_max}, {"exact_copies", exact_copies}};
  }
  static ProposalPolicy from_json(const nlohmann::json& j) {
    ProposalPolicy p;
    try {
      p.per_gt = j.value("per_gt", p.per_gt);
      p.jitter_min = j.value("jitter_min", p.jitter_min);
      p.jitter_max = j.value("jitter_max", p.jitter_max);
      p.subboxes_per_gt = j.value("subboxes_per_gt", p.subboxes_per_gt);
      p.negatives = j.value("negatives", p.negatives);
      p.negative_min = j.value("negative_min", p.negative_min);
      p.negative_max = j.value("negative_max", p.negative_max);
      p.exact_copies = j.value("exact_copies", p.exact_copies);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kSchemaViolation, std::string("proposal policy: ") + e.what());
    }
    return p;
  }
};

/// The four half-width, half-height boxes anchored at the corners of `r`
/// (top-left, top-right, bottom-left, bottom-right).
inline std::array<BoundingBox, 4> corner_subboxes(const BoundingBox& r) {
  const double mx = r.x1 + 0.5 * r.width(), my = r.y1 + 0.5 * r.height();
  return {BoundingBox{r.x1, r.y1, mx, my}, BoundingBox{mx, r.y1, r.x2, my}, BoundingBox{r.x1, my, mx, r.y2},
          BoundingBox{mx, my, r.x2, r.y2}};
}

inline BoundingBox perturb_box(const BoundingBox& b, double sigma, Rng& rng, double size) {
  std::normal_distribution<double> n(0.0, sigma);
  for (int attempt = 0; attempt < 20; ++attempt) {
    const BoundingBox p = clamp_box({b.x1 + n(rng) * b.width(), b.y1 + n(rng) * b.height(),
                                     b.x2 + n(rng) * b.width(), b.y2 + n(rng) * b.height()},
                                    size, size);
    if (p.width() >= 2.0 && p.height() >= 2.0) return p;
  }
  return b;
}

inline std::vector<ScoredProposal> proposals_for_image(const ImageRecord& r, const ProposalPolicy& policy,
                                                       double image_size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<BoundingBox> boxes;
  for (const ObjectRecord& o : r.objects) {
    if (policy.exact_copies) boxes.push_back(o.box);
    for (int i = 0; i < policy.per_gt; ++i) {
      boxes.push_back(perturb_box(o.box, uniform(rng, policy.jitter_min, policy.jitter_max), rng, image_size));
    }
    for (int i = 0; i < policy.subboxes_per_gt; ++i) {
      const BoundingBox root = perturb_box(o.box, policy.jitter_min, rng, image_size);
      for (const BoundingBox& s : corner_subboxes(root)) boxes.push_back(s);
    }
  }
  for (int i = 0; i < policy.negatives; ++i) {
    const double w = uniform(rng, policy.negative_min, policy.negative_max);
    const double h = uniform(rng, policy.negative_min, policy.negative_max);
    const double x = uniform(rng, 0.0, image_size - w);
    const double y = uniform(rng, 0.0, image_size - h);
    boxes.push_back({x, y, x + w, y + h});
  }
  std::vector<ScoredProposal> out;
  for (std::size_t i = 0; i < boxes.size(); ++i) out.push_back({r.id, static_cast<int>(i), boxes[i], Tensor()});
  return out;
}

inline std::vector<ScoredProposal> generate_proposals(const DatasetManifest& m, const ProposalPolicy& policy,
                                                      double image_size, std::uint64_t seed) {
  std::vector<ScoredProposal> all;
  for (const ImageRecord& r : m.records) {
    auto p = proposals_for_image(r, policy, image_size, sub_seed(seed, "proposals." + r.id));
    all.insert(all.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  }
  return all;
}

inline nlohmann::json proposal_to_json(const ScoredProposal& p) {
  nlohmann::json j = {{"image_id", p.image_id}, {"id", p.source_id}, {"box", box_to_json(p.box)}};
  if (!p.scores.empty()) j["scores"] = p.scores.values();
  return j;
}

inline void save_proposals(const std::vector<ScoredProposal>& ps, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write proposals " + path);
  for (const ScoredProposal& p : ps) out << proposal_to_json(p).dump() << '\n';
}

inline std::vector<ScoredProposal> load_proposals(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kMissingFile, "cannot open proposals " + path);
  std::vector<ScoredProposal> out;
  std::map<std::string, int> next_id;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = "proposals " + path + " line " + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorCode::kMalformedFile, where + ": " + e.what());
    }
    ScoredProposal p;
    try {
      p.image_id = j.at("image_id").get<std::string>();
      p.source_id = j.contains("id") ? j["id"].get<int>() : next_id[p.image_id];
      p.box = box_from_json(j.at("box"));
      if (j.contains("scores")) {
        const auto s = j["scores"].get<std::vector<double>>();
        require(!s.empty(), ErrorCode::kSchemaViolation, where + ": empty scores");
        p.scores = Tensor::vector(s);
        require(p.scores.all_finite(), ErrorCode::kSchemaViolation, where + ": non-finite scores");
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kSchemaViolation, where + ": " + e.what());
    }
    next_id[p.image_id] = p.source_id + 1;
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace defnet
