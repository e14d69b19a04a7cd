#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "defnet/defpool.hpp"
#include "defnet/gradcheck.hpp"
#include "defnet/layers.hpp"
#include "defnet/rng.hpp"

namespace defnet {

inline constexpr double kGradEpsilon = 1e-5;
inline constexpr double kGradRelTol = 1e-4;
inline constexpr double kGradAbsTol = 1e-7;

/// Worst finite-difference disagreement seen for one operation and argument.
struct LayerCheck {
  std::string name;
  double max_rel_err = 0.0;  // |a-n| / max(|a|, |n|, abs_tol/rel_tol)
  double max_abs_err = 0.0;
  int cases = 0;

  bool passed() const { return max_rel_err <= kGradRelTol; }
};

/// Relative error with the absolute tolerance folded in as a floor on the
/// scale, so `<= rel_tol` is the usual combined criterion.
inline double floored_rel_err(const Tensor& analytic, const Tensor& numeric) {
  require(analytic.shape() == numeric.shape(), ErrorCode::kShapeMismatch, "gradient shapes differ");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double diff = std::abs(analytic[i] - numeric[i]);
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric[i]), kGradAbsTol / kGradRelTol});
    worst = std::max(worst, std::isfinite(diff) ? diff / scale : std::numeric_limits<double>::infinity());
  }
  return worst;
}

namespace detail {

inline double weighted_sum(const Tensor& t, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * w[i];
  return s;
}

class SuiteRecorder {
 public:
  void check(const std::string& name, const std::function<double(const Tensor&)>& f, const Tensor& x,
             const Tensor& analytic) {
    const Tensor numeric = finite_diff_gradient(f, x, kGradEpsilon);
    LayerCheck& c = slot(name);
    c.max_rel_err = std::max(c.max_rel_err, floored_rel_err(analytic, numeric));
    for (std::size_t i = 0; i < x.size(); ++i) c.max_abs_err = std::max(c.max_abs_err, std::abs(analytic[i] - numeric[i]));
    ++c.cases;
  }
  std::vector<LayerCheck> result() const { return checks_; }

 private:
  LayerCheck& slot(const std::string& name) {
    for (LayerCheck& c : checks_) {
      if (c.name == name) return c;
    }
    checks_.push_back({name});
    return checks_.back();
  }
  std::vector<LayerCheck> checks_;
};

/// Gap between the best and second-best candidate over all def-pool blocks,
/// by direct enumeration.
inline double defpool_margin(const Tensor& m, const DefPoolParams& p) {
  const long V = static_cast<long>(m.dim(0)), H = static_cast<long>(m.dim(1)), R = p.radius;
  const std::vector<double> pen = p.penalty();
  const long w = 2 * R + 1;
  double margin = std::numeric_limits<double>::infinity();
  for (long y = 0; y < V / p.stride_y; ++y) {
    for (long x = 0; x < H / p.stride_x; ++x) {
      double best = -std::numeric_limits<double>::infinity(), second = best;
      for (long i = -R; i <= R; ++i) {
        for (long j = -R; j <= R; ++j) {
          const long r = y * p.stride_y + R + i, c = x * p.stride_x + R + j;
          if (r < 0 || r >= V || c < 0 || c >= H) continue;
          const double v = m.at(r, c) - pen[static_cast<std::size_t>((i + R) * w + j + R)];
          if (v > best) {
            second = best;
            best = v;
          } else if (v > second) {
            second = v;
          }
        }
      }
      if (std::isfinite(second)) margin = std::min(margin, best - second);
    }
  }
  return margin;
}

}  // namespace detail

/// Finite-difference checks of every differentiable operation over `num_seeds`
/// tie-free random cases each.
inline std::vector<LayerCheck> gradient_suite(std::uint64_t seed, int num_seeds = 20) {
  using detail::weighted_sum;
  detail::SuiteRecorder rec;
  for (int s = 0; s < num_seeds; ++s) {
    Rng rng(sub_seed(seed, "conv." + std::to_string(s)));
    const int stride = 1 + s % 2, pad = s % 3 == 0 ? 0 : 1;
    const ConvLayer l{uniform_tensor({3, 2, 3, 3}, rng, -1, 1), uniform_tensor({3}, rng, -1, 1), stride, pad};
    const Tensor x = uniform_tensor({2, 6, 5}, rng, -1, 1);
    const Tensor w = uniform_tensor(conv2d(x, l).shape(), rng, -1, 1);
    const ConvGrads g = conv2d_backward(x, l, w);
    rec.check("conv.input", [&](const Tensor& t) { return weighted_sum(conv2d(t, l), w); }, x, g.input);
    rec.check("conv.weights", [&](const Tensor& t) {
      ConvLayer m = l;
      m.weights = t;
      return weighted_sum(conv2d(x, m), w);
    }, l.weights, g.weights);
    rec.check("conv.bias", [&](const Tensor& t) {
      ConvLayer m = l;
      m.bias = t;
      return weighted_sum(conv2d(x, m), w);
    }, l.bias, g.bias);
  }
  for (int s = 0; s < num_seeds; ++s) {
    Rng rng(sub_seed(seed, "fc." + std::to_string(s)));
    const FcLayer l{uniform_tensor({4, 6}, rng, -1, 1), uniform_tensor({4}, rng, -1, 1)};
    const Tensor x = uniform_tensor({6}, rng, -1, 1), w = uniform_tensor({4}, rng, -1, 1);
    const FcGrads g = fully_connected_backward(x, l, w);
    rec.check("fc.input", [&](const Tensor& t) { return weighted_sum(fully_connected(t, l), w); }, x, g.input);
    rec.check("fc.weights", [&](const Tensor& t) {
      FcLayer m = l;
      m.weights = t;
      return weighted_sum(fully_connected(x, m), w);
    }, l.weights, g.weights);
    rec.check("fc.bias", [&](const Tensor& t) {
      FcLayer m = l;
      m.bias = t;
      return weighted_sum(fully_connected(x, m), w);
    }, l.bias, g.bias);
  }
  for (int s = 0; s < num_seeds; ++s) {
    Rng rng(sub_seed(seed, "relu." + std::to_string(s)));
    const Tensor x = tie_free_tensor({3, 4}, rng), w = uniform_tensor({3, 4}, rng, -1, 1);
    rec.check("relu", [&](const Tensor& t) { return weighted_sum(relu(t), w); }, x, relu_backward(x, w));
  }
  for (int s = 0; s < num_seeds; ++s) {
    Rng rng(sub_seed(seed, "maxpool." + std::to_string(s)));
    const MaxPoolLayer l{3, 3, 1 + s % 2, 2, s % 2, 1};
    const Tensor x = tie_free_tensor({2, 6, 7}, rng);
    const PoolResult r = maxpool(x, l);
    const Tensor w = uniform_tensor(r.output.shape(), rng, -1, 1);
    rec.check("maxpool", [&](const Tensor& t) { return weighted_sum(maxpool(t, l).output, w); }, x,
              maxpool_backward(w, r, x.shape()));
  }
  for (int s = 0, done = 0; done < num_seeds; ++s) {
    Rng rng(sub_seed(seed, "defpool." + std::to_string(s)));
    DefPoolParams p = DefPoolParams::max_pooling(1 + s % 2, 2, 2, 2);
    p.coeffs = uniform_tensor({2}, rng, 0.2, 1.0);
    p.basis = uniform_tensor(p.basis.shape(), rng, 0.0, 0.5);
    const Tensor m = tie_free_tensor({6, 6}, rng, 0.1);
    if (detail::defpool_margin(m, p) < 1e-3) continue;
    ++done;
    const DefPoolResult r = defpool_forward(m, p);
    const Tensor up = uniform_tensor(r.output.shape(), rng, -1, 1);
    const DefPoolGrads g = defpool_backward(up, r, m, p);
    rec.check("defpool.input", [&](const Tensor& t) { return weighted_sum(defpool_forward(t, p).output, up); }, m,
              g.map);
    rec.check("defpool.c", [&](const Tensor& t) {
      DefPoolParams q = p;
      q.coeffs = t;
      return weighted_sum(defpool_forward(m, q).output, up);
    }, p.coeffs, g.coeffs);
    rec.check("defpool.d", [&](const Tensor& t) {
      DefPoolParams q = p;
      q.basis = t;
      return weighted_sum(defpool_forward(m, q).output, up);
    }, p.basis, *g.basis);
  }
  const LossKind kinds[] = {LossKind::softmax(), LossKind::hinge()};
  for (int s = 0; s < num_seeds; ++s) {
    Rng rng(sub_seed(seed, "loss." + std::to_string(s)));
    Tensor x = uniform_tensor({5}, rng, -2.5, 2.5);
    for (double& v : x.values()) {
      if (std::abs(std::abs(v) - 1.0) < 0.05) v += 0.1;  // away from the hinge kinks
    }
    const std::size_t label = static_cast<std::size_t>(s % 5);
    for (const LossKind& kind : kinds) {
      rec.check("loss." + kind.name(), [&](const Tensor& t) { return loss_forward_backward(t, label, kind).loss; }, x,
                loss_forward_backward(x, label, kind).grad);
    }
    const Target bg = background_target(5);
    rec.check("loss.hinge_background",
              [&](const Tensor& t) { return loss_forward_backward(t, bg, LossKind::hinge()).loss; }, x,
              loss_forward_backward(x, bg, LossKind::hinge()).grad);
  }
  return rec.result();
}

struct OracleCheck {
  int maps = 0;
  double max_abs_diff = 0.0;
};

/// Def-pooling configured as a DPM deformation layer (minus its constant)
/// against the exhaustive DPM score, on random 5x5..9x9 maps including corner
/// anchors.
inline OracleCheck dpm_oracle_check(std::uint64_t seed, int maps = 50) {
  Rng rng(seed);
  OracleCheck r{maps, 0.0};
  for (int trial = 0; trial < maps; ++trial) {
    const int V = uniform_int(rng, 5, 9), H = uniform_int(rng, 5, 9);
    DpmParams q{uniform_int(rng, 0, V - 1), uniform_int(rng, 0, H - 1), uniform(rng, 0.05, 1.0),
                uniform(rng, 0.05, 1.0),    uniform(rng, -1.0, 1.0),    uniform(rng, -1.0, 1.0)};
    if (trial % 5 == 0) {
      q.anchor_i = 0;
      q.anchor_j = 0;
    } else if (trial % 5 == 1) {
      q.anchor_i = V - 1;
      q.anchor_j = H - 1;
    } else if (trial % 5 == 2) {
      q.anchor_i = 0;
      q.anchor_j = H - 1;
    }
    const Tensor m = uniform_tensor({static_cast<std::size_t>(V), static_cast<std::size_t>(H)}, rng, -2, 2);
    const DeformationLayer layer = dpm_to_defpool(q, V, H);
    const DefPoolResult out = defpool_forward(m, layer.params);
    r.max_abs_diff = std::max(r.max_abs_diff, std::abs(out.output[0] - layer.c5 - dpm_score_oracle(m, q)));
  }
  return r;
}

struct DegeneracyCheck {
  int geometries = 0;
  int mismatches = 0;  // geometries where any output differs bitwise
};

/// Def-pooling with zero coefficients against plain max pooling over the same
/// windows.
inline DegeneracyCheck maxpool_degeneracy_check(std::uint64_t seed, int geometries = 100) {
  Rng rng(seed);
  DegeneracyCheck r;
  while (r.geometries < geometries) {
    const int R = uniform_int(rng, 0, 2), sy = uniform_int(rng, 1, 3), sx = uniform_int(rng, 1, 3);
    // Sizes where both layers produce the same output grid.
    const auto size_for = [&](int s) {
      const int n = uniform_int(rng, 1, 4);
      const int lo = std::max(s * n, s * (n - 1) + 2 * R + 1), hi = std::min(s * n + s - 1, s * n + 2 * R);
      return lo <= hi ? uniform_int(rng, lo, hi) : 0;
    };
    const int v = size_for(sy), h = size_for(sx);
    if (v == 0 || h == 0) continue;
    ++r.geometries;
    const auto V = static_cast<std::size_t>(v), H = static_cast<std::size_t>(h);
    DefPoolParams p = DefPoolParams::max_pooling(R, sx, sy, 2);
    p.basis = uniform_tensor(p.basis.shape(), rng, 0, 3);
    const Tensor m = uniform_tensor({V, H}, rng, -1, 1);
    const PoolResult mp = maxpool(m.reshaped({1, V, H}), {2 * R + 1, 2 * R + 1, sy, sx, 0, 0});
    const DefPoolResult dp = defpool_forward(m, p);
    if (mp.output.size() != dp.output.size() || !(mp.output.reshaped(dp.output.shape()) == dp.output)) {
      ++r.mismatches;
    }
  }
  return r;
}

}  // namespace defnet
