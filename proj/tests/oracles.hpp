#pragma once

// Reference implementations shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <string>
#include <vector>

#include "defnet/ensemble.hpp"
#include "defnet/eval.hpp"
#include "defnet/rng.hpp"

namespace defnet::testing {

// Independent AP: every prefix of the confidence ranking is re-matched from
// scratch, then AP sums, at each recall increase, the best precision reached
// at that recall or beyond.
inline double oracle_ap(const std::vector<Detection>& dets, const GroundTruthSet& gts, double thr = 0.5) {
  if (gts.empty()) return 0.0;
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].confidence != dets[b].confidence) return dets[a].confidence > dets[b].confidence;
    return dets[a].id < dets[b].id;
  });
  const std::size_t n = order.size();
  std::vector<double> prec(n), rec(n);
  for (std::size_t k = 1; k <= n; ++k) {
    std::vector<bool> used(gts.size(), false);
    std::size_t tp = 0;
    for (std::size_t r = 0; r < k; ++r) {
      const Detection& d = dets[order[r]];
      int best = -1;
      double best_iou = -1.0;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].image_id != d.image_id) continue;
        const double o = iou(d.box, gts[g].box);
        if (o > best_iou) {
          best_iou = o;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0 && best_iou >= thr && !used[static_cast<std::size_t>(best)]) {
        used[static_cast<std::size_t>(best)] = true;
        ++tp;
      }
    }
    prec[k - 1] = static_cast<double>(tp) / static_cast<double>(k);
    rec[k - 1] = static_cast<double>(tp) / static_cast<double>(gts.size());
  }
  double ap = 0.0, last = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (rec[k] <= last) continue;
    double p = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (rec[j] >= rec[k]) p = std::max(p, prec[j]);
    }
    ap += (rec[k] - last) * p;
    last = rec[k];
  }
  return ap;
}

// Boxes from a small lattice so exact matches, partial overlaps and IoU ties
// are all common.
inline BoundingBox lattice_box(Rng& rng) {
  const double x = uniform_int(rng, 0, 3) * 5.0, y = uniform_int(rng, 0, 2) * 5.0;
  const double w = uniform_int(rng, 1, 3) * 5.0, h = uniform_int(rng, 1, 2) * 5.0;
  return {x, y, x + w, y + h};
}

struct ApCase {
  std::vector<Detection> dets;
  GroundTruthSet gts;
};

inline ApCase random_ap_case(Rng& rng, int max_dets, int max_gts, int images) {
  ApCase c;
  const int nd = uniform_int(rng, 0, max_dets), ng = uniform_int(rng, 0, max_gts);
  for (int i = 0; i < ng; ++i) {
    c.gts.push_back({"im" + std::to_string(uniform_int(rng, 0, images - 1)), lattice_box(rng), 0});
  }
  for (int i = 0; i < nd; ++i) {
    // Coarse confidences produce ties, resolved by id.
    c.dets.push_back({"im" + std::to_string(uniform_int(rng, 0, images - 1)), lattice_box(rng), 0,
                      uniform_int(rng, 0, 4) * 0.25, static_cast<std::size_t>(i)});
  }
  return c;
}

// ---------------------------------------------------------------------------
// Model pools

struct Scenario {
  std::vector<ScoredProposal> proposals;
  GroundTruthSet gts;
};

// Six images, each with two objects; proposals are jittered copies of the
// objects plus random clutter.
inline Scenario make_scenario(Rng& rng, int K) {
  Scenario s;
  for (int im = 0; im < 6; ++im) {
    const std::string id = "im" + std::to_string(im);
    for (int o = 0; o < 2; ++o) {
      const double x = 4 + 24 * o, y = uniform(rng, 2, 20);
      const BoundingBox b{x, y, x + uniform(rng, 10, 16), y + uniform(rng, 10, 16)};
      s.gts.push_back({id, b, (im * 2 + o) % K});
      for (int j = 0; j < 2; ++j) {
        const double d = uniform(rng, -1.5, 1.5);
        s.proposals.push_back({id, static_cast<int>(s.proposals.size()), {b.x1 + d, b.y1 - d, b.x2 + d, b.y2}, {}});
      }
    }
    for (int j = 0; j < 4; ++j) {
      const double x = uniform(rng, 0, 40), y = uniform(rng, 0, 40);
      s.proposals.push_back({id, static_cast<int>(s.proposals.size()), {x, y, x + 8, y + 8}, {}});
    }
  }
  return s;
}

// Class of the object a proposal covers at IoU >= 0.5, or -1.
inline int covered_class(const Scenario& s, const ScoredProposal& p) {
  for (const GroundTruth& g : s.gts) {
    if (g.image_id == p.image_id && iou(g.box, p.box) >= 0.5) return g.class_id;
  }
  return -1;
}

inline PoolMember noise_member(const Scenario& s, Rng& rng, int K, const std::string& id) {
  PoolMember m{id, {}, ""};
  for (std::size_t p = 0; p < s.proposals.size(); ++p) {
    m.scores.push_back(uniform_tensor({static_cast<std::size_t>(K)}, rng, -1, 1));
  }
  return m;
}

// Separates class `k` by a wide margin; other classes are noise.
inline PoolMember specialist(const Scenario& s, Rng& rng, int K, int k, const std::string& id) {
  PoolMember m = noise_member(s, rng, K, id);
  for (std::size_t p = 0; p < s.proposals.size(); ++p) {
    m.scores[p][static_cast<std::size_t>(k)] += covered_class(s, s.proposals[p]) == k ? 10.0 : -10.0;
  }
  return m;
}

// Noise plus a weak, uneven signal so different models win different classes.
inline PoolMember weak_member(const Scenario& s, Rng& rng, int K, const std::string& id) {
  PoolMember m = noise_member(s, rng, K, id);
  for (std::size_t p = 0; p < s.proposals.size(); ++p) {
    const int c = covered_class(s, s.proposals[p]);
    if (c >= 0) m.scores[p][static_cast<std::size_t>(c)] += uniform(rng, 0.0, 1.5);
  }
  return m;
}

inline ModelPool make_pool(const Scenario& s, std::vector<PoolMember> members, int K) {
  return {s.proposals, std::move(members), K};
}

// Independent evaluation of one class under a subset: plain mean, NMS, AP.
inline double oracle_class_ap(const ModelPool& pool, const Scenario& s, int k,
                              const std::vector<std::size_t>& subset) {
  std::vector<Detection> dets;
  for (std::size_t p = 0; p < pool.proposals.size(); ++p) {
    double sum = 0.0;
    for (std::size_t m : subset) sum += pool.members[m].scores[p][static_cast<std::size_t>(k)];
    dets.push_back({pool.proposals[p].image_id, pool.proposals[p].box, k, sum / static_cast<double>(subset.size()), p});
  }
  GroundTruthSet g;
  for (const GroundTruth& x : s.gts) {
    if (x.class_id == k) g.push_back(x);
  }
  return average_precision(nms(dets, kDefaultNmsIou), g).ap;
}

inline double oracle_map(const ModelPool& pool, const Scenario& s, const std::vector<std::size_t>& subset) {
  double total = 0.0;
  for (int k = 0; k < pool.num_classes; ++k) total += oracle_class_ap(pool, s, k, subset);
  return total / pool.num_classes;
}

inline std::vector<std::vector<std::size_t>> all_subsets(std::size_t n) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t mask = 1; mask < (std::size_t{1} << n); ++mask) {
    std::vector<std::size_t> s;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (std::size_t{1} << i)) s.push_back(i);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace defnet::testing
