#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "defnet/layers.hpp"
#include "defnet/tensor.hpp"

namespace defnet {

/// Stand-in for an infinite deformation cost ("the part may not move there").
inline constexpr double kInfiniteCost = 1e9;

/// Deformation-constrained pooling parameters.
///
/// Each output b(y,x) looks at the (2R+1)^2 offsets (di,dj) around its block
/// center (cy,cx) = (stride_y*y + R, stride_x*x + R) and takes
///   max_{di,dj} m(cy+di, cx+dj) - sum_n c_n d_n(di,dj).
/// Block y therefore covers rows [stride_y*y, stride_y*y + 2R], the same
/// window as an unpadded (2R+1)x(2R+1) max-pool. Offsets that fall outside the
/// map are skipped. `basis` is indexed [n][di+R][dj+R]; rows are the first
/// map axis. Output size is floor(V/stride_y) x floor(H/stride_x).
struct DefPoolParams {
  int radius = 1;
  int stride_x = 1;
  int stride_y = 1;
  Tensor coeffs;  // [N]
  Tensor basis;   // [N, 2R+1, 2R+1]
  bool basis_frozen = false;

  std::size_t num_basis() const { return coeffs.size(); }
  std::size_t window() const { return static_cast<std::size_t>(2 * radius + 1); }

  void validate() const {
    require(radius >= 0, ErrorCode::kInvalidArgument, "defpool radius must be non-negative");
    require(stride_x > 0 && stride_y > 0, ErrorCode::kInvalidArgument,
            "defpool strides must be positive");
    require_rank(coeffs, 1, "defpool coeffs");
    require_rank(basis, 3, "defpool basis");
    require(basis.dim(0) == coeffs.size() && basis.dim(1) == window() &&
                basis.dim(2) == window(),
            ErrorCode::kShapeMismatch,
            "defpool basis must be [N, 2R+1, 2R+1], got " + shape_string(basis.shape()));
    require(coeffs.all_finite() && basis.all_finite(), ErrorCode::kNonFinite,
            "defpool parameters must be finite");
  }

  std::pair<std::size_t, std::size_t> output_size(std::size_t rows, std::size_t cols) const {
    const std::size_t oh = rows / static_cast<std::size_t>(stride_y);
    const std::size_t ow = cols / static_cast<std::size_t>(stride_x);
    require(oh > 0 && ow > 0, ErrorCode::kGeometry,
            "defpool: output would be empty for a " + std::to_string(rows) + "x" +
                std::to_string(cols) + " map with strides (" + std::to_string(stride_y) + "," +
                std::to_string(stride_x) + ")");
    return {oh, ow};
  }

  /// sum_n c_n d_n(di,dj) laid out [2R+1, 2R+1].
  std::vector<double> penalty() const {
    const std::size_t w = window();
    std::vector<double> p(w * w, 0.0);
    for (std::size_t n = 0; n < num_basis(); ++n) {
      const double c = coeffs[n];
      for (std::size_t k = 0; k < w * w; ++k) p[k] += c * basis[n * w * w + k];
    }
    return p;
  }

  /// Zero-cost parameters (plain max pooling) with one learnable basis map.
  static DefPoolParams max_pooling(int radius, int stride_x, int stride_y, std::size_t n = 1) {
    const std::size_t w = static_cast<std::size_t>(2 * radius + 1);
    return {radius, stride_x, stride_y, Tensor({n}), Tensor({n, w, w}), false};
  }
};

struct DefPoolResult {
  Tensor output;                            // [V/stride_y, H/stride_x]
  std::vector<std::pair<int, int>> offsets;  // winning (di,dj) per output, row-major
};

inline DefPoolResult defpool_forward(const Tensor& map, const DefPoolParams& p) {
  p.validate();
  require_rank(map, 2, "defpool input");
  const std::size_t V = map.dim(0), H = map.dim(1);
  const auto [oh, ow] = p.output_size(V, H);
  const std::vector<double> pen = p.penalty();
  const int R = p.radius;
  const std::size_t w = p.window();

  DefPoolResult res{Tensor({oh, ow}), std::vector<std::pair<int, int>>(oh * ow)};
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      const long cy = static_cast<long>(y) * p.stride_y + R;
      const long cx = static_cast<long>(x) * p.stride_x + R;
      double best = -std::numeric_limits<double>::infinity();
      std::pair<int, int> arg{0, 0};
      bool found = false;
      // Row-major scan, strict '>' keeps the first winner.
      for (int di = -R; di <= R; ++di) {
        const long r = cy + di;
        if (r < 0 || r >= static_cast<long>(V)) continue;
        for (int dj = -R; dj <= R; ++dj) {
          const long c = cx + dj;
          if (c < 0 || c >= static_cast<long>(H)) continue;
          const double v = map[static_cast<std::size_t>(r) * H + static_cast<std::size_t>(c)] -
                           pen[static_cast<std::size_t>(di + R) * w + static_cast<std::size_t>(dj + R)];
          if (!found || v > best) {
            best = v;
            arg = {di, dj};
            found = true;
          }
        }
      }
      require(found, ErrorCode::kGeometry, "defpool: no feasible offset for an output");
      res.output[y * ow + x] = best;
      res.offsets[y * ow + x] = arg;
    }
  }
  return res;
}

struct DefPoolGrads {
  Tensor map;
  Tensor coeffs;
  std::optional<Tensor> basis;  // empty when the basis is frozen
};

inline DefPoolGrads defpool_backward(const Tensor& upstream, const DefPoolResult& fwd,
                                     const Tensor& map, const DefPoolParams& p) {
  require(upstream.shape() == fwd.output.shape(), ErrorCode::kShapeMismatch,
          "defpool_backward: upstream shape mismatch");
  require_rank(map, 2, "defpool_backward map");
  const std::size_t H = map.dim(1);
  const std::size_t ow = fwd.output.dim(1);
  const std::size_t w = p.window();
  const int R = p.radius;

  DefPoolGrads g{Tensor(map.shape()), Tensor(p.coeffs.shape()), std::nullopt};
  if (!p.basis_frozen) g.basis = Tensor(p.basis.shape());
  for (std::size_t o = 0; o < upstream.size(); ++o) {
    const double up = upstream[o];
    const auto [di, dj] = fwd.offsets[o];
    const std::size_t y = o / ow, x = o % ow;
    const std::size_t r = static_cast<std::size_t>(static_cast<long>(y) * p.stride_y + R + di);
    const std::size_t c = static_cast<std::size_t>(static_cast<long>(x) * p.stride_x + R + dj);
    g.map[r * H + c] += up;
    const std::size_t k = static_cast<std::size_t>(di + R) * w + static_cast<std::size_t>(dj + R);
    for (std::size_t n = 0; n < p.num_basis(); ++n) {
      g.coeffs[n] -= p.basis[n * w * w + k] * up;
      if (g.basis) (*g.basis)[n * w * w + k] -= p.coeffs[n] * up;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Multi-channel wrappers: channel c uses params[c] (or params[0] when shared).

struct DefPoolChannelsResult {
  Tensor output;  // [C, oh, ow]
  std::vector<DefPoolResult> per_channel;
};

inline Tensor channel_slice(const Tensor& t, std::size_t c) {
  const std::size_t plane = t.dim(1) * t.dim(2);
  std::vector<double> v(t.values().begin() + static_cast<long>(c * plane),
                        t.values().begin() + static_cast<long>((c + 1) * plane));
  return Tensor({t.dim(1), t.dim(2)}, std::move(v));
}

inline const DefPoolParams& params_for_channel(std::span<const DefPoolParams> params,
                                               std::size_t c) {
  return params.size() == 1 ? params[0] : params[c];
}

inline DefPoolChannelsResult defpool_forward_channels(const Tensor& maps,
                                                      std::span<const DefPoolParams> params) {
  require_rank(maps, 3, "defpool channels input");
  const std::size_t C = maps.dim(0);
  require(params.size() == 1 || params.size() == C, ErrorCode::kShapeMismatch,
          "defpool: need one parameter set per channel or one shared set");
  DefPoolChannelsResult res;
  for (std::size_t c = 0; c < C; ++c) {
    res.per_channel.push_back(defpool_forward(channel_slice(maps, c), params_for_channel(params, c)));
  }
  const Shape& os = res.per_channel[0].output.shape();
  res.output = Tensor({C, os[0], os[1]});
  const std::size_t plane = os[0] * os[1];
  for (std::size_t c = 0; c < C; ++c) {
    std::copy(res.per_channel[c].output.values().begin(), res.per_channel[c].output.values().end(),
              res.output.values().begin() + static_cast<long>(c * plane));
  }
  return res;
}

struct DefPoolChannelsGrads {
  Tensor maps;
  std::vector<Tensor> coeffs;              // one per parameter set
  std::vector<std::optional<Tensor>> basis;  // one per parameter set
};

inline DefPoolChannelsGrads defpool_backward_channels(const Tensor& upstream,
                                                      const DefPoolChannelsResult& fwd,
                                                      const Tensor& maps,
                                                      std::span<const DefPoolParams> params) {
  const std::size_t C = maps.dim(0);
  DefPoolChannelsGrads g;
  g.maps = Tensor(maps.shape());
  for (const auto& p : params) {
    g.coeffs.emplace_back(p.coeffs.shape());
    g.basis.emplace_back(p.basis_frozen ? std::nullopt : std::optional<Tensor>(Tensor(p.basis.shape())));
  }
  const std::size_t plane = maps.dim(1) * maps.dim(2);
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t pi = params.size() == 1 ? 0 : c;
    const DefPoolGrads gc = defpool_backward(channel_slice(upstream, c), fwd.per_channel[c],
                                             channel_slice(maps, c), params[pi]);
    std::copy(gc.map.values().begin(), gc.map.values().end(),
              g.maps.values().begin() + static_cast<long>(c * plane));
    g.coeffs[pi] += gc.coeffs;
    if (gc.basis) *g.basis[pi] += *gc.basis;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Quadratic part-placement score of deformable part models, and its exact
// representation as a single-output def-pooling layer.

struct DpmParams {
  int anchor_i = 0;  // row
  int anchor_j = 0;  // column
  double c1 = 0.0, c2 = 0.0, c3 = 0.0, c4 = 0.0;

  void validate() const {
    require(std::isfinite(c1) && std::isfinite(c2) && std::isfinite(c3) && std::isfinite(c4),
            ErrorCode::kNonFinite, "DPM coefficients must be finite");
    require(c1 >= 0.0 && c2 >= 0.0, ErrorCode::kInvalidArgument,
            "DPM deformation costs c1, c2 must be non-negative");
    require(!(c1 == 0.0 && c3 != 0.0) && !(c2 == 0.0 && c4 != 0.0),
            ErrorCode::kInvalidArgument,
            "DPM: c1=0 (or c2=0) with nonzero c3 (or c4) has no completed-square form");
  }

  /// Constant left over after expanding the squares; not learned.
  double c5() const {
    double v = 0.0;
    if (c1 != 0.0) v += c3 * c3 / (4.0 * c1);
    if (c2 != 0.0) v += c4 * c4 / (4.0 * c2);
    return v;
  }
};

/// Exhaustive max over every map position of
///   m(i,j) - c1 (i - a_i + c3/2c1)^2 - c2 (j - a_j + c4/2c2)^2.
inline double dpm_score_oracle(const Tensor& map, const DpmParams& q) {
  q.validate();
  require_rank(map, 2, "dpm map");
  const std::size_t V = map.dim(0), H = map.dim(1);
  const double shift_i = q.c1 != 0.0 ? q.c3 / (2.0 * q.c1) : 0.0;
  const double shift_j = q.c2 != 0.0 ? q.c4 / (2.0 * q.c2) : 0.0;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < V; ++i) {
    const double u = static_cast<double>(i) - q.anchor_i + shift_i;
    for (std::size_t j = 0; j < H; ++j) {
      const double v = static_cast<double>(j) - q.anchor_j + shift_j;
      const double score = map[i * H + j] - q.c1 * u * u - q.c2 * v * v;
      best = std::max(best, score);
    }
  }
  return best;
}

struct DeformationLayer {
  DefPoolParams params;
  double c5 = 0.0;  // subtract from the pooled output
};

/// Single-output def-pooling (strides equal to the map size, radius spanning
/// the map so the one block center sits at (R,R)) with the frozen quadratic
/// basis d1=(i-a_i)^2, d2=(j-a_j)^2, d3=i-a_i, d4=j-a_j, where (i,j) is the
/// map position an offset lands on, and c=(c1,c2,c3,c4).
inline DeformationLayer dpm_to_defpool(const DpmParams& q, int rows, int cols) {
  q.validate();
  require(rows > 0 && cols > 0, ErrorCode::kInvalidArgument, "map size must be positive");
  const int R = std::max(rows, cols) - 1;
  const std::size_t w = static_cast<std::size_t>(2 * R + 1);
  DefPoolParams p{R, cols, rows, Tensor::vector({q.c1, q.c2, q.c3, q.c4}), Tensor({4, w, w}), true};
  for (int di = -R; di <= R; ++di) {
    for (int dj = -R; dj <= R; ++dj) {
      const std::size_t k = static_cast<std::size_t>(di + R) * w + static_cast<std::size_t>(dj + R);
      const double u = static_cast<double>(R + di - q.anchor_i);
      const double v = static_cast<double>(R + dj - q.anchor_j);
      p.basis[0 * w * w + k] = u * u;
      p.basis[1 * w * w + k] = v * v;
      p.basis[2 * w * w + k] = u;
      p.basis[3 * w * w + k] = v;
    }
  }
  return {std::move(p), q.c5()};
}

}  // namespace defnet
