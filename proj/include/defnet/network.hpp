#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "defnet/defpool.hpp"
#include "defnet/layers.hpp"
#include "defnet/rng.hpp"
#include "defnet/tensor.hpp"

namespace defnet {

inline constexpr int kModelFormatVersion = 1;

/// One trunk stage: conv -> relu -> optional max-pool (kernel = stride = pool).
struct ConvSpec {
  int out_channels = 8;
  int kernel = 3;
  int stride = 1;
  int padding = -1;  // -1 selects "same" padding (kernel-1)/2
  int pool = 2;      // 0 disables pooling

  int effective_padding() const { return padding < 0 ? (kernel - 1) / 2 : padding; }
};

enum class BasisInit { kFree, kQuadratic };

/// Part-detection branches on top of the last trunk conv: one conv per filter
/// size producing part maps, def-pooling per channel, then a 1x1 conv.
struct DefBranchConfig {
  bool enabled = false;
  std::vector<int> part_filter_sizes{3, 5, 9};
  int part_channels = 16;
  int radius = 1;
  int stride = 2;
  BasisInit basis_init = BasisInit::kFree;
  int basis_maps = 1;  // N for the free basis; the quadratic basis always has 4
  bool share_params = false;
  bool basis_frozen = false;
};

struct NetworkConfig {
  int channels = 3;
  int height = 16;
  int width = 16;
  std::vector<ConvSpec> trunk{{8, 3, 1, -1, 2}, {16, 3, 1, -1, 2}};
  int fc_width = 64;
  int num_classes = 3;
  DefBranchConfig def_branch;
  int stages = 0;
  int stage_width = 64;
  LossKind loss = LossKind::hinge();

  void validate() const {
    require(channels > 0 && height > 0 && width > 0, ErrorCode::kInvalidArgument,
            "network input dims must be positive");
    require(!trunk.empty(), ErrorCode::kInvalidArgument, "trunk needs at least one conv layer");
    require(num_classes >= 2, ErrorCode::kInvalidArgument, "num_classes must be >= 2");
    require(stages >= 0, ErrorCode::kInvalidArgument, "stage count must be >= 0");
    require(fc_width > 0 && stage_width > 0, ErrorCode::kInvalidArgument,
            "fc widths must be positive");
    for (const ConvSpec& c : trunk) {
      require(c.out_channels > 0 && c.kernel > 0 && c.kernel % 2 == 1 && c.stride > 0 && c.pool >= 0,
              ErrorCode::kInvalidArgument, "trunk conv specs need odd kernels and positive sizes");
    }
    if (def_branch.enabled) {
      require(!def_branch.part_filter_sizes.empty(), ErrorCode::kInvalidArgument,
              "def branch needs at least one part filter size");
      for (int f : def_branch.part_filter_sizes) {
        require(f > 0 && f % 2 == 1, ErrorCode::kInvalidArgument, "part filter sizes must be odd");
      }
      require(def_branch.part_channels > 0 && def_branch.radius >= 0 && def_branch.stride > 0 &&
                  def_branch.basis_maps > 0,
              ErrorCode::kInvalidArgument, "def branch geometry must be positive");
    }
  }
};

struct StageBranch {
  FcLayer fc6;
  FcLayer fc7;
  Tensor w8;  // [K, stage_width], no bias (the head owns the single bias)
};

struct DefBranch {
  std::vector<ConvLayer> conv6;                     // one per filter size
  std::vector<std::vector<DefPoolParams>> pools;    // [filter][channel or 1 when shared]
  std::vector<ConvLayer> conv7;                     // 1x1
};

/// Baseline trunk plus optional def-pooling branches and stage branches.
struct StagedNetwork {
  NetworkConfig config;
  std::vector<ConvLayer> trunk;
  FcLayer fc6;
  FcLayer fc7;
  DefBranch def;
  std::vector<StageBranch> stages;
  FcLayer head;  // [K, fc_width + filters*part_channels]
  std::uint64_t seed = 0;
  std::string schedule_id = "none";

  /// Visits every parameter tensor in a fixed order with a stable name.
  template <class F>
  void for_each_param(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <class F>
  void for_each_param(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  std::size_t feature_size() const {
    std::size_t f = static_cast<std::size_t>(config.fc_width);
    if (config.def_branch.enabled) {
      f += config.def_branch.part_filter_sizes.size() *
           static_cast<std::size_t>(config.def_branch.part_channels);
    }
    return f + stages.size() * static_cast<std::size_t>(config.stage_width);
  }

 private:
  template <class Self, class F>
  static void visit(Self& net, F&& f) {
    for (std::size_t i = 0; i < net.trunk.size(); ++i) {
      const std::string p = "trunk.conv" + std::to_string(i + 1);
      f(p + ".w", net.trunk[i].weights);
      f(p + ".b", net.trunk[i].bias);
    }
    f(std::string("fc6.w"), net.fc6.weights);
    f(std::string("fc6.b"), net.fc6.bias);
    f(std::string("fc7.w"), net.fc7.weights);
    f(std::string("fc7.b"), net.fc7.bias);
    for (std::size_t k = 0; k < net.def.conv6.size(); ++k) {
      const std::string p = "def.part" + std::to_string(k + 1);
      f(p + ".conv6.w", net.def.conv6[k].weights);
      f(p + ".conv6.b", net.def.conv6[k].bias);
      for (std::size_t c = 0; c < net.def.pools[k].size(); ++c) {
        f(p + ".pool" + std::to_string(c) + ".c", net.def.pools[k][c].coeffs);
        f(p + ".pool" + std::to_string(c) + ".d", net.def.pools[k][c].basis);
      }
      f(p + ".conv7.w", net.def.conv7[k].weights);
      f(p + ".conv7.b", net.def.conv7[k].bias);
    }
    for (std::size_t t = 0; t < net.stages.size(); ++t) {
      const std::string p = "stage" + std::to_string(t + 1);
      f(p + ".fc6.w", net.stages[t].fc6.weights);
      f(p + ".fc6.b", net.stages[t].fc6.bias);
      f(p + ".fc7.w", net.stages[t].fc7.weights);
      f(p + ".fc7.b", net.stages[t].fc7.bias);
      f(p + ".w8", net.stages[t].w8);
    }
    f(std::string("head.w"), net.head.weights);
    f(std::string("head.b"), net.head.bias);
  }
};

using ParamGrads = std::map<std::string, Tensor>;

/// Stage index (1-based) owning a parameter name, 0 for the base network.
inline int stage_of(const std::string& name) {
  if (name.rfind("stage", 0) != 0) return 0;
  return std::stoi(name.substr(5, name.find('.') - 5));
}

inline bool is_frozen_basis(const StagedNetwork& net, const std::string& name) {
  if (name.rfind("def.part", 0) != 0 || name.size() < 2 || name.substr(name.size() - 2) != ".d") {
    return false;
  }
  const std::size_t k = static_cast<std::size_t>(std::stoi(name.substr(8))) - 1;
  return !net.def.pools[k].empty() && net.def.pools[k][0].basis_frozen;
}

// ---------------------------------------------------------------------------
// Construction

inline double glorot_scale(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline void glorot_fill(Tensor& t, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed,
                        const std::string& name, std::uint64_t round = 0) {
  Rng rng(sub_seed(seed, name, round));
  const double s = glorot_scale(fan_in, fan_out);
  for (double& v : t.values()) v = uniform(rng, -s, s);
}

inline ConvLayer make_conv(std::size_t out, std::size_t in, std::size_t k, int stride, int pad) {
  return {Tensor({out, in, k, k}), Tensor({out}), stride, pad};
}

inline FcLayer make_fc(std::size_t out, std::size_t in) { return {Tensor({out, in}), Tensor({out})}; }

struct TrunkGeometry {
  std::vector<Shape> conv_out;  // per trunk layer, before pooling
  Shape conv5;
  Shape pool5;
};

inline TrunkGeometry trunk_geometry(const NetworkConfig& cfg) {
  TrunkGeometry g;
  long c = cfg.channels, h = cfg.height, w = cfg.width;
  for (std::size_t i = 0; i < cfg.trunk.size(); ++i) {
    const ConvSpec& s = cfg.trunk[i];
    const int pad = s.effective_padding();
    require(h + 2 * pad >= s.kernel && w + 2 * pad >= s.kernel, ErrorCode::kGeometry,
            "trunk layer conv" + std::to_string(i + 1) + " kernel is larger than its padded input");
    h = (h + 2 * pad - s.kernel) / s.stride + 1;
    w = (w + 2 * pad - s.kernel) / s.stride + 1;
    c = s.out_channels;
    g.conv_out.push_back({static_cast<std::size_t>(c), static_cast<std::size_t>(h),
                          static_cast<std::size_t>(w)});
    if (s.pool > 0) {
      require(h >= s.pool && w >= s.pool, ErrorCode::kGeometry,
              "trunk layer pool" + std::to_string(i + 1) + " is larger than its input");
      h = (h - s.pool) / s.pool + 1;
      w = (w - s.pool) / s.pool + 1;
    }
  }
  g.conv5 = g.conv_out.back();
  g.pool5 = {static_cast<std::size_t>(c), static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
  return g;
}

inline void init_stage_layers(StageBranch& s, std::uint64_t seed, std::size_t t, std::uint64_t round) {
  const std::string p = "stage" + std::to_string(t + 1);
  glorot_fill(s.fc6.weights, s.fc6.in_features(), s.fc6.out_features(), seed, p + ".fc6.w", round);
  glorot_fill(s.fc7.weights, s.fc7.in_features(), s.fc7.out_features(), seed, p + ".fc7.w", round);
  s.fc6.bias.fill(0.0);
  s.fc7.bias.fill(0.0);
}

inline void init_head(StagedNetwork& net, std::uint64_t seed, std::uint64_t round = 0) {
  glorot_fill(net.head.weights, net.head.in_features(), net.head.out_features(), seed, "head.w", round);
  net.head.bias.fill(0.0);
}

/// Builds and seeds a network. Stage branches start all-zero.
inline StagedNetwork build_network(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const TrunkGeometry geo = trunk_geometry(cfg);
  StagedNetwork net;
  net.config = cfg;
  net.seed = seed;

  std::size_t in_c = static_cast<std::size_t>(cfg.channels);
  for (std::size_t i = 0; i < cfg.trunk.size(); ++i) {
    const ConvSpec& s = cfg.trunk[i];
    const auto k = static_cast<std::size_t>(s.kernel);
    const auto out = static_cast<std::size_t>(s.out_channels);
    ConvLayer l = make_conv(out, in_c, k, s.stride, s.effective_padding());
    glorot_fill(l.weights, in_c * k * k, out * k * k, seed, "trunk.conv" + std::to_string(i + 1) + ".w");
    net.trunk.push_back(std::move(l));
    in_c = out;
  }
  const std::size_t pool5 = shape_numel(geo.pool5);
  const auto fcw = static_cast<std::size_t>(cfg.fc_width);
  net.fc6 = make_fc(fcw, pool5);
  net.fc7 = make_fc(fcw, fcw);
  glorot_fill(net.fc6.weights, pool5, fcw, seed, "fc6.w");
  glorot_fill(net.fc7.weights, fcw, fcw, seed, "fc7.w");

  std::size_t head_in = fcw;
  if (cfg.def_branch.enabled) {
    const DefBranchConfig& d = cfg.def_branch;
    const auto P = static_cast<std::size_t>(d.part_channels);
    const std::size_t c5 = geo.conv5[0];
    // Part maps keep the conv5 size ("same" padding), so every def-pool sees
    // the same geometry.
    DefPoolParams proto{d.radius, d.stride, d.stride, Tensor(), Tensor(), d.basis_frozen};
    proto.output_size(geo.conv5[1], geo.conv5[2]);
    const std::size_t w = proto.window();
    if (d.basis_init == BasisInit::kQuadratic) {
      proto.coeffs = Tensor({4}, 0.0);
      proto.basis = Tensor({4, w, w});
      for (int di = -d.radius; di <= d.radius; ++di) {
        for (int dj = -d.radius; dj <= d.radius; ++dj) {
          const std::size_t k = static_cast<std::size_t>(di + d.radius) * w + static_cast<std::size_t>(dj + d.radius);
          proto.basis[k] = di * di;
          proto.basis[w * w + k] = dj * dj;
          proto.basis[2 * w * w + k] = di;
          proto.basis[3 * w * w + k] = dj;
        }
      }
    } else {
      // Free basis: one cost per displacement bin, zero at start (pure max-pooling).
      proto.coeffs = Tensor({static_cast<std::size_t>(d.basis_maps)}, 1.0);
      proto.basis = Tensor({static_cast<std::size_t>(d.basis_maps), w, w});
    }
    for (std::size_t k = 0; k < d.part_filter_sizes.size(); ++k) {
      const auto f = static_cast<std::size_t>(d.part_filter_sizes[k]);
      const std::string p = "def.part" + std::to_string(k + 1);
      ConvLayer c6 = make_conv(P, c5, f, 1, static_cast<int>((f - 1) / 2));
      glorot_fill(c6.weights, c5 * f * f, P * f * f, seed, p + ".conv6.w");
      ConvLayer c7 = make_conv(P, P, 1, 1, 0);
      glorot_fill(c7.weights, P, P, seed, p + ".conv7.w");
      net.def.conv6.push_back(std::move(c6));
      net.def.pools.emplace_back(d.share_params ? 1 : P, proto);
      net.def.conv7.push_back(std::move(c7));
    }
    head_in += d.part_filter_sizes.size() * P;
  }

  const auto K = static_cast<std::size_t>(cfg.num_classes);
  const auto sw = static_cast<std::size_t>(cfg.stage_width);
  for (int t = 0; t < cfg.stages; ++t) {
    net.stages.push_back({make_fc(sw, pool5), make_fc(sw, sw), Tensor({K, sw})});
  }
  net.head = make_fc(K, head_in);
  init_head(net, seed);
  return net;
}

/// Swaps the final classifier for a freshly initialized one with `num_classes`
/// outputs (stage read-outs are reset to zero to match).
inline void reset_classifier(StagedNetwork& net, int num_classes, std::uint64_t seed,
                             std::uint64_t round) {
  require(num_classes >= 2, ErrorCode::kInvalidArgument, "num_classes must be >= 2");
  net.config.num_classes = num_classes;
  const auto K = static_cast<std::size_t>(num_classes);
  net.head = make_fc(K, net.head.in_features());
  init_head(net, seed, round);
  for (StageBranch& s : net.stages) s.w8 = Tensor({K, s.w8.dim(1)});
}

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardCache {
  Tensor input;
  std::vector<Tensor> trunk_in;    // conv inputs
  std::vector<Tensor> trunk_pre;   // conv outputs before relu
  std::vector<Tensor> trunk_act;   // after relu
  std::vector<PoolResult> trunk_pool;
  Tensor pool5;                    // flattened
  Tensor fc6_pre, fc6_act, fc7_pre, fc7_act;
  std::vector<Tensor> part_maps;   // conv6 outputs
  std::vector<DefPoolChannelsResult> part_pool;
  std::vector<Tensor> conv7_pre, conv7_act;
  std::vector<Tensor> part_gap;
  std::vector<Tensor> stage6_pre, stage6_act, stage7_pre, stage7_act;
  Tensor head_in;
  Tensor feature;  // head input plus stage fc7 activations
  Tensor scores;
};

inline Tensor global_average(const Tensor& maps) {
  const std::size_t C = maps.dim(0), plane = maps.dim(1) * maps.dim(2);
  Tensor out({C});
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += maps[c * plane + i];
    out[c] = s / static_cast<double>(plane);
  }
  return out;
}

inline ForwardCache forward(const StagedNetwork& net, const Tensor& image) {
  const NetworkConfig& cfg = net.config;
  require(image.shape() == Shape{static_cast<std::size_t>(cfg.channels),
                                 static_cast<std::size_t>(cfg.height),
                                 static_cast<std::size_t>(cfg.width)},
          ErrorCode::kShapeMismatch,
          "forward: image shape " + shape_string(image.shape()) + " does not match the network input");
  ForwardCache c;
  c.input = image;
  Tensor x = image;
  for (std::size_t i = 0; i < net.trunk.size(); ++i) {
    c.trunk_in.push_back(x);
    c.trunk_pre.push_back(conv2d(x, net.trunk[i]));
    c.trunk_act.push_back(relu(c.trunk_pre.back()));
    const int pool = cfg.trunk[i].pool;
    if (pool > 0) {
      c.trunk_pool.push_back(maxpool(c.trunk_act.back(), {pool, pool, pool, pool, 0, 0}));
      x = c.trunk_pool.back().output;
    } else {
      c.trunk_pool.emplace_back();
      x = c.trunk_act.back();
    }
  }
  c.pool5 = x.reshaped({x.size()});
  c.fc6_pre = fully_connected(c.pool5, net.fc6);
  c.fc6_act = relu(c.fc6_pre);
  c.fc7_pre = fully_connected(c.fc6_act, net.fc7);
  c.fc7_act = relu(c.fc7_pre);

  std::vector<const Tensor*> head_parts{&c.fc7_act};
  const Tensor& conv5 = c.trunk_act.back();
  for (std::size_t k = 0; k < net.def.conv6.size(); ++k) {
    c.part_maps.push_back(conv2d(conv5, net.def.conv6[k]));
    c.part_pool.push_back(defpool_forward_channels(c.part_maps.back(), net.def.pools[k]));
    c.conv7_pre.push_back(conv2d(c.part_pool.back().output, net.def.conv7[k]));
    c.conv7_act.push_back(relu(c.conv7_pre.back()));
    c.part_gap.push_back(global_average(c.conv7_act.back()));
  }
  for (const Tensor& g : c.part_gap) head_parts.push_back(&g);
  std::vector<double> head_in;
  for (const Tensor* t : head_parts) head_in.insert(head_in.end(), t->values().begin(), t->values().end());
  c.head_in = Tensor::vector(head_in);
  c.scores = fully_connected(c.head_in, net.head);

  std::vector<double> feature = head_in;
  for (const StageBranch& s : net.stages) {
    c.stage6_pre.push_back(fully_connected(c.pool5, s.fc6));
    c.stage6_act.push_back(relu(c.stage6_pre.back()));
    c.stage7_pre.push_back(fully_connected(c.stage6_act.back(), s.fc7));
    c.stage7_act.push_back(relu(c.stage7_pre.back()));
    const Tensor& a = c.stage7_act.back();
    const auto K = static_cast<Eigen::Index>(s.w8.dim(0));
    const auto W = static_cast<Eigen::Index>(s.w8.dim(1));
    VecMap(c.scores.data().data(), K).noalias() +=
        ConstMatMap(s.w8.data().data(), K, W) * ConstVecMap(a.data().data(), W);
    feature.insert(feature.end(), a.values().begin(), a.values().end());
  }
  c.feature = Tensor::vector(std::move(feature));
  return c;
}

inline Tensor predict(const StagedNetwork& net, const Tensor& image) {
  return forward(net, image).scores;
}

/// Gradients of every parameter (except frozen def-pool bases) given
/// d(loss)/d(scores).
inline ParamGrads backward(const StagedNetwork& net, const ForwardCache& c, const Tensor& dscores) {
  ParamGrads g;
  const std::size_t K = c.scores.size();
  require(dscores.size() == K, ErrorCode::kShapeMismatch, "backward: dscores length mismatch");

  const FcGrads head = fully_connected_backward(c.head_in, net.head, dscores);
  g["head.w"] = head.weights;
  g["head.b"] = head.bias;

  Tensor dpool5(c.pool5.shape());
  for (std::size_t t = 0; t < net.stages.size(); ++t) {
    const StageBranch& s = net.stages[t];
    const std::string p = "stage" + std::to_string(t + 1);
    const auto Kx = static_cast<Eigen::Index>(K);
    const auto W = static_cast<Eigen::Index>(s.w8.dim(1));
    Tensor dw8(s.w8.shape());
    MatMap(dw8.data().data(), Kx, W).noalias() =
        ConstVecMap(dscores.data().data(), Kx) * ConstVecMap(c.stage7_act[t].data().data(), W).transpose();
    Tensor da7({s.w8.dim(1)});
    VecMap(da7.data().data(), W).noalias() =
        ConstMatMap(s.w8.data().data(), Kx, W).transpose() * ConstVecMap(dscores.data().data(), Kx);
    const FcGrads g7 = fully_connected_backward(c.stage6_act[t], s.fc7, relu_backward(c.stage7_pre[t], da7));
    const FcGrads g6 = fully_connected_backward(c.pool5, s.fc6, relu_backward(c.stage6_pre[t], g7.input));
    g[p + ".w8"] = std::move(dw8);
    g[p + ".fc7.w"] = g7.weights;
    g[p + ".fc7.b"] = g7.bias;
    g[p + ".fc6.w"] = g6.weights;
    g[p + ".fc6.b"] = g6.bias;
    dpool5 += g6.input;
  }

  // Split the head input gradient into fc7 and the part branches.
  const auto fcw = c.fc7_act.size();
  Tensor dfc7({fcw});
  std::copy(head.input.values().begin(), head.input.values().begin() + static_cast<long>(fcw),
            dfc7.values().begin());
  const FcGrads g7 = fully_connected_backward(c.fc6_act, net.fc7, relu_backward(c.fc7_pre, dfc7));
  const FcGrads g6 = fully_connected_backward(c.pool5, net.fc6, relu_backward(c.fc6_pre, g7.input));
  g["fc7.w"] = g7.weights;
  g["fc7.b"] = g7.bias;
  g["fc6.w"] = g6.weights;
  g["fc6.b"] = g6.bias;
  dpool5 += g6.input;

  const Tensor& conv5 = c.trunk_act.back();
  Tensor dconv5(conv5.shape());
  std::size_t off = fcw;
  for (std::size_t k = 0; k < net.def.conv6.size(); ++k) {
    const std::string p = "def.part" + std::to_string(k + 1);
    const Tensor& act = c.conv7_act[k];
    const std::size_t P = act.dim(0), plane = act.dim(1) * act.dim(2);
    Tensor dact(act.shape());
    for (std::size_t ch = 0; ch < P; ++ch) {
      const double d = head.input[off + ch] / static_cast<double>(plane);
      for (std::size_t i = 0; i < plane; ++i) dact[ch * plane + i] = d;
    }
    off += P;
    const ConvGrads gc7 = conv2d_backward(c.part_pool[k].output, net.def.conv7[k], relu_backward(c.conv7_pre[k], dact));
    const DefPoolChannelsGrads gp = defpool_backward_channels(gc7.input, c.part_pool[k], c.part_maps[k], net.def.pools[k]);
    const ConvGrads gc6 = conv2d_backward(conv5, net.def.conv6[k], gp.maps);
    g[p + ".conv7.w"] = gc7.weights;
    g[p + ".conv7.b"] = gc7.bias;
    for (std::size_t ci = 0; ci < net.def.pools[k].size(); ++ci) {
      g[p + ".pool" + std::to_string(ci) + ".c"] = gp.coeffs[ci];
      if (gp.basis[ci]) g[p + ".pool" + std::to_string(ci) + ".d"] = *gp.basis[ci];
    }
    g[p + ".conv6.w"] = gc6.weights;
    g[p + ".conv6.b"] = gc6.bias;
    dconv5 += gc6.input;
  }

  // Trunk, last layer first.
  Tensor dx = dpool5;
  for (std::size_t i = net.trunk.size(); i-- > 0;) {
    Tensor dact;
    if (net.config.trunk[i].pool > 0) {
      dact = maxpool_backward(dx.reshaped(c.trunk_pool[i].output.shape()), c.trunk_pool[i],
                              c.trunk_act[i].shape());
    } else {
      dact = dx.reshaped(c.trunk_act[i].shape());
    }
    if (i + 1 == net.trunk.size()) dact += dconv5;
    const ConvGrads gc = conv2d_backward(c.trunk_in[i], net.trunk[i], relu_backward(c.trunk_pre[i], dact));
    const std::string p = "trunk.conv" + std::to_string(i + 1);
    g[p + ".w"] = gc.weights;
    g[p + ".b"] = gc.bias;
    dx = gc.input;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json config_to_json(const NetworkConfig& cfg) {
  nlohmann::json j;
  j["input"] = {cfg.channels, cfg.height, cfg.width};
  j["trunk"] = nlohmann::json::array();
  for (const ConvSpec& s : cfg.trunk) {
    j["trunk"].push_back({{"out_channels", s.out_channels}, {"kernel", s.kernel}, {"stride", s.stride},
                          {"padding", s.padding}, {"pool", s.pool}});
  }
  j["fc_width"] = cfg.fc_width;
  j["num_classes"] = cfg.num_classes;
  const DefBranchConfig& d = cfg.def_branch;
  j["def_branch"] = {{"enabled", d.enabled},
                     {"part_filter_sizes", d.part_filter_sizes},
                     {"part_channels", d.part_channels},
                     {"radius", d.radius},
                     {"stride", d.stride},
                     {"basis_init", d.basis_init == BasisInit::kFree ? "free" : "quadratic"},
                     {"basis_maps", d.basis_maps},
                     {"share_params", d.share_params},
                     {"basis_frozen", d.basis_frozen}};
  j["stages"] = cfg.stages;
  j["stage_width"] = cfg.stage_width;
  j["loss"] = {{"kind", cfg.loss.is_hinge() ? "hinge" : "softmax"},
               {"margin", cfg.loss.margin},
               {"squared", cfg.loss.squared}};
  return j;
}

/// Missing keys keep their defaults; present keys must have the right type.
inline NetworkConfig config_from_json(const nlohmann::json& j) {
  NetworkConfig cfg;
  try {
    if (j.contains("input")) {
      cfg.channels = j["input"].at(0).get<int>();
      cfg.height = j["input"].at(1).get<int>();
      cfg.width = j["input"].at(2).get<int>();
    }
    if (j.contains("trunk")) {
      cfg.trunk.clear();
      for (const auto& s : j["trunk"]) {
        ConvSpec c;
        c.out_channels = s.value("out_channels", c.out_channels);
        c.kernel = s.value("kernel", c.kernel);
        c.stride = s.value("stride", c.stride);
        c.padding = s.value("padding", c.padding);
        c.pool = s.value("pool", c.pool);
        cfg.trunk.push_back(c);
      }
    }
    cfg.fc_width = j.value("fc_width", cfg.fc_width);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    if (j.contains("def_branch")) {
      const auto& d = j["def_branch"];
      DefBranchConfig& b = cfg.def_branch;
      b.enabled = d.value("enabled", b.enabled);
      b.part_filter_sizes = d.value("part_filter_sizes", b.part_filter_sizes);
      b.part_channels = d.value("part_channels", b.part_channels);
      b.radius = d.value("radius", b.radius);
      b.stride = d.value("stride", b.stride);
      const std::string init = d.value("basis_init", std::string("free"));
      require(init == "free" || init == "quadratic", ErrorCode::kSchemaViolation,
              "basis_init must be 'free' or 'quadratic'");
      b.basis_init = init == "free" ? BasisInit::kFree : BasisInit::kQuadratic;
      b.basis_maps = d.value("basis_maps", b.basis_maps);
      b.share_params = d.value("share_params", b.share_params);
      b.basis_frozen = d.value("basis_frozen", b.basis_frozen);
    }
    cfg.stages = j.value("stages", cfg.stages);
    cfg.stage_width = j.value("stage_width", cfg.stage_width);
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      const std::string kind = l.value("kind", std::string("hinge"));
      require(kind == "hinge" || kind == "softmax", ErrorCode::kSchemaViolation,
              "loss.kind must be 'hinge' or 'softmax'");
      cfg.loss = kind == "hinge" ? LossKind::hinge(l.value("margin", 1.0), l.value("squared", false))
                                 : LossKind::softmax();
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchemaViolation, std::string("network config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline nlohmann::json model_to_json(const StagedNetwork& net) {
  nlohmann::json j;
  j["version"] = kModelFormatVersion;
  j["config"] = config_to_json(net.config);
  j["metadata"] = {{"seed", net.seed}, {"schedule_id", net.schedule_id}};
  nlohmann::json tensors = nlohmann::json::object();
  net.for_each_param([&](const std::string& name, const Tensor& t) { tensors[name] = to_record(t); });
  j["tensors"] = std::move(tensors);
  return j;
}

inline StagedNetwork model_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("version") || !j["version"].is_number_integer()) {
    fail(ErrorCode::kMalformedFile, "model: missing integer 'version'");
  }
  const int version = j["version"].get<int>();
  if (version != kModelFormatVersion) {
    fail(ErrorCode::kVersionMismatch, "model: format version " + std::to_string(version) +
                                          ", expected " + std::to_string(kModelFormatVersion));
  }
  if (!j.contains("config") || !j.contains("tensors") || !j["tensors"].is_object()) {
    fail(ErrorCode::kMalformedFile, "model: missing 'config' or 'tensors'");
  }
  const NetworkConfig cfg = config_from_json(j["config"]);
  std::uint64_t seed = 0;
  std::string schedule = "none";
  if (j.contains("metadata")) {
    seed = j["metadata"].value("seed", std::uint64_t{0});
    schedule = j["metadata"].value("schedule_id", schedule);
  }
  StagedNetwork net = build_network(cfg, seed);
  net.schedule_id = schedule;
  const auto& tensors = j["tensors"];
  net.for_each_param([&](const std::string& name, Tensor& t) {
    if (!tensors.contains(name) || !tensors[name].is_string()) {
      fail(ErrorCode::kMalformedFile, "model: missing tensor '" + name + "'");
    }
    Tensor loaded = from_record(tensors[name].get<std::string>());
    if (loaded.shape() != t.shape()) {
      fail(ErrorCode::kMalformedFile, "model: tensor '" + name + "' has shape " +
                                          shape_string(loaded.shape()) + ", config implies " +
                                          shape_string(t.shape()));
    }
    t = std::move(loaded);
  });
  for (auto& pools : net.def.pools) {
    for (auto& p : pools) p.basis_frozen = cfg.def_branch.basis_frozen;
  }
  return net;
}

inline void save_model(const StagedNetwork& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write model file " + path);
  out << model_to_json(net).dump(1) << '\n';
  require(static_cast<bool>(out), ErrorCode::kIo, "failed writing model file " + path);
}

inline StagedNetwork load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kMissingFile, "cannot open model file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kMalformedFile, "model " + path + ": " + e.what());
  }
  return model_from_json(j);
}

}  // namespace defnet
