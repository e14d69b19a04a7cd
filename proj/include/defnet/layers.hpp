#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include "defnet/tensor.hpp"

namespace defnet {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  require(t.rank() == rank, ErrorCode::kShapeMismatch,
          std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
              shape_string(t.shape()));
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip)

struct ConvLayer {
  Tensor weights;  // [out_ch, in_ch, kh, kw]
  Tensor bias;     // [out_ch]
  int stride = 1;
  int padding = 0;

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }
  std::size_t kernel_h() const { return weights.dim(2); }
  std::size_t kernel_w() const { return weights.dim(3); }

  void validate() const {
    require_rank(weights, 4, "conv weights");
    require_rank(bias, 1, "conv bias");
    require(bias.dim(0) == weights.dim(0), ErrorCode::kShapeMismatch,
            "conv bias length does not match out channels");
    require(kernel_h() % 2 == 1 && kernel_w() % 2 == 1, ErrorCode::kInvalidArgument,
            "conv kernel sizes must be odd");
    require(stride > 0 && padding >= 0, ErrorCode::kInvalidArgument,
            "conv stride must be positive and padding non-negative");
  }
};

struct ConvGeometry {
  std::size_t channels, height, width, out_h, out_w, kh, kw;
  int stride, padding;
};

inline ConvGeometry conv_geometry(const Shape& input, const ConvLayer& layer) {
  layer.validate();
  require(input.size() == 3, ErrorCode::kShapeMismatch, "conv2d input must be [C,H,W]");
  require(input[0] == layer.in_channels(), ErrorCode::kShapeMismatch,
          "conv2d: input has " + std::to_string(input[0]) + " channels, layer expects " +
              std::to_string(layer.in_channels()));
  const long h = static_cast<long>(input[1]) + 2 * layer.padding -
                 static_cast<long>(layer.kernel_h());
  const long w = static_cast<long>(input[2]) + 2 * layer.padding -
                 static_cast<long>(layer.kernel_w());
  require(h >= 0 && w >= 0, ErrorCode::kGeometry, "conv2d: kernel larger than padded input");
  return {input[0],
          input[1],
          input[2],
          static_cast<std::size_t>(h / layer.stride + 1),
          static_cast<std::size_t>(w / layer.stride + 1),
          layer.kernel_h(),
          layer.kernel_w(),
          layer.stride,
          layer.padding};
}

// cols: [C*kh*kw, out_h*out_w]
inline RowMatrix im2col(const Tensor& input, const ConvGeometry& g) {
  RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(g.channels * g.kh * g.kw),
                                   static_cast<Eigen::Index>(g.out_h * g.out_w));
  const double* src = input.data().data();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols.row(static_cast<Eigen::Index>((c * g.kh + ki) * g.kw + kj)).data();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(ki);
          if (y < 0 || y >= static_cast<long>(g.height)) continue;
          const double* src_row = src + (c * g.height + static_cast<std::size_t>(y)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(kj);
            if (x < 0 || x >= static_cast<long>(g.width)) continue;
            row[oy * g.out_w + ox] = src_row[x];
          }
        }
      }
    }
  }
  return cols;
}

inline Tensor col2im(const RowMatrix& cols, const ConvGeometry& g) {
  Tensor out({g.channels, g.height, g.width});
  double* dst = out.data().data();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row =
            cols.row(static_cast<Eigen::Index>((c * g.kh + ki) * g.kw + kj)).data();
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy) * g.stride - g.padding + static_cast<long>(ki);
          if (y < 0 || y >= static_cast<long>(g.height)) continue;
          double* dst_row = dst + (c * g.height + static_cast<std::size_t>(y)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox) * g.stride - g.padding + static_cast<long>(kj);
            if (x < 0 || x >= static_cast<long>(g.width)) continue;
            dst_row[x] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
  return out;
}

inline Tensor conv2d(const Tensor& input, const ConvLayer& layer) {
  const ConvGeometry g = conv_geometry(input.shape(), layer);
  const RowMatrix cols = im2col(input, g);
  const auto oc = static_cast<Eigen::Index>(layer.out_channels());
  ConstMatMap w(layer.weights.data().data(), oc, cols.rows());
  Tensor out({layer.out_channels(), g.out_h, g.out_w});
  MatMap o(out.data().data(), oc, cols.cols());
  o.noalias() = w * cols;
  ConstVecMap b(layer.bias.data().data(), oc);
  o.colwise() += b;
  return out;
}

struct ConvGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

inline ConvGrads conv2d_backward(const Tensor& input, const ConvLayer& layer,
                                 const Tensor& upstream) {
  const ConvGeometry g = conv_geometry(input.shape(), layer);
  require(upstream.shape() == Shape{layer.out_channels(), g.out_h, g.out_w},
          ErrorCode::kShapeMismatch, "conv2d_backward: upstream shape mismatch");
  const RowMatrix cols = im2col(input, g);
  const auto oc = static_cast<Eigen::Index>(layer.out_channels());
  ConstMatMap dy(upstream.data().data(), oc, cols.cols());
  ConstMatMap w(layer.weights.data().data(), oc, cols.rows());

  ConvGrads grads{Tensor(), Tensor(layer.weights.shape()), Tensor(layer.bias.shape())};
  MatMap dw(grads.weights.data().data(), oc, cols.rows());
  dw.noalias() = dy * cols.transpose();
  VecMap db(grads.bias.data().data(), oc);
  db = dy.rowwise().sum();
  const RowMatrix dcols = w.transpose() * dy;
  grads.input = col2im(dcols, g);
  return grads;
}

// ---------------------------------------------------------------------------
// Max pooling. Padding positions are excluded from the max (never selected).

struct MaxPoolLayer {
  int kernel_h = 2;
  int kernel_w = 2;
  int stride_y = 2;
  int stride_x = 2;
  int pad_y = 0;
  int pad_x = 0;

  void validate() const {
    require(kernel_h > 0 && kernel_w > 0 && stride_y > 0 && stride_x > 0,
            ErrorCode::kInvalidArgument, "maxpool kernel and stride must be positive");
    require(pad_y >= 0 && pad_x >= 0 && pad_y < kernel_h && pad_x < kernel_w,
            ErrorCode::kInvalidArgument, "maxpool padding must be in [0, kernel)");
  }

  std::pair<std::size_t, std::size_t> output_size(std::size_t h, std::size_t w) const {
    validate();
    const long oh = static_cast<long>(h) + 2 * pad_y - kernel_h;
    const long ow = static_cast<long>(w) + 2 * pad_x - kernel_w;
    require(oh >= 0 && ow >= 0, ErrorCode::kGeometry, "maxpool: kernel larger than input");
    return {static_cast<std::size_t>(oh / stride_y + 1),
            static_cast<std::size_t>(ow / stride_x + 1)};
  }
};

struct PoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

inline PoolResult maxpool(const Tensor& input, const MaxPoolLayer& layer) {
  require_rank(input, 3, "maxpool input");
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const auto [oh, ow] = layer.output_size(H, W);
  PoolResult res{Tensor({C, oh, ow}), std::vector<std::size_t>(C * oh * ow)};
  const double* src = input.data().data();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const long y0 = static_cast<long>(y) * layer.stride_y - layer.pad_y;
        const long x0 = static_cast<long>(x) * layer.stride_x - layer.pad_x;
        double best = -std::numeric_limits<double>::infinity();
        std::size_t arg = 0;
        bool found = false;
        for (long i = y0; i < y0 + layer.kernel_h; ++i) {
          if (i < 0 || i >= static_cast<long>(H)) continue;
          for (long j = x0; j < x0 + layer.kernel_w; ++j) {
            if (j < 0 || j >= static_cast<long>(W)) continue;
            const std::size_t flat = (c * H + static_cast<std::size_t>(i)) * W +
                                     static_cast<std::size_t>(j);
            if (!found || src[flat] > best) {
              best = src[flat];
              arg = flat;
              found = true;
            }
          }
        }
        require(found, ErrorCode::kGeometry, "maxpool: window outside input");
        const std::size_t o = (c * oh + y) * ow + x;
        res.output[o] = best;
        res.argmax[o] = arg;
      }
    }
  }
  return res;
}

inline Tensor maxpool_backward(const Tensor& upstream, const PoolResult& fwd,
                               const Shape& input_shape) {
  require(upstream.shape() == fwd.output.shape(), ErrorCode::kShapeMismatch,
          "maxpool_backward: upstream shape mismatch");
  Tensor grad(input_shape);
  for (std::size_t o = 0; o < upstream.size(); ++o) grad[fwd.argmax[o]] += upstream[o];
  return grad;
}

// ---------------------------------------------------------------------------
// Fully connected

struct FcLayer {
  Tensor weights;  // [out, in]
  Tensor bias;     // [out]

  std::size_t in_features() const { return weights.dim(1); }
  std::size_t out_features() const { return weights.dim(0); }

  void validate() const {
    require_rank(weights, 2, "fc weights");
    require_rank(bias, 1, "fc bias");
    require(bias.dim(0) == weights.dim(0), ErrorCode::kShapeMismatch,
            "fc bias length does not match output width");
  }
};

inline Tensor fully_connected(const Tensor& input, const FcLayer& layer) {
  layer.validate();
  require(input.size() == layer.in_features(), ErrorCode::kShapeMismatch,
          "fully_connected: input length " + std::to_string(input.size()) + " vs layer " +
              std::to_string(layer.in_features()));
  const auto out = static_cast<Eigen::Index>(layer.out_features());
  const auto in = static_cast<Eigen::Index>(layer.in_features());
  Tensor y({layer.out_features()});
  VecMap ym(y.data().data(), out);
  ym.noalias() = ConstMatMap(layer.weights.data().data(), out, in) *
                 ConstVecMap(input.data().data(), in);
  ym += ConstVecMap(layer.bias.data().data(), out);
  return y;
}

struct FcGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

inline FcGrads fully_connected_backward(const Tensor& input, const FcLayer& layer,
                                        const Tensor& upstream) {
  layer.validate();
  require(upstream.size() == layer.out_features() && input.size() == layer.in_features(),
          ErrorCode::kShapeMismatch, "fully_connected_backward: length mismatch");
  const auto out = static_cast<Eigen::Index>(layer.out_features());
  const auto in = static_cast<Eigen::Index>(layer.in_features());
  FcGrads g{Tensor(input.shape()), Tensor(layer.weights.shape()), upstream};
  ConstVecMap dy(upstream.data().data(), out);
  ConstVecMap x(input.data().data(), in);
  MatMap(g.weights.data().data(), out, in).noalias() = dy * x.transpose();
  VecMap(g.input.data().data(), in).noalias() =
      ConstMatMap(layer.weights.data().data(), out, in).transpose() * dy;
  g.bias = upstream.reshaped({layer.out_features()});
  return g;
}

// ---------------------------------------------------------------------------
// ReLU (subgradient 0 at 0)

inline Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Tensor relu_backward(const Tensor& input, const Tensor& upstream) {
  require(input.shape() == upstream.shape(), ErrorCode::kShapeMismatch,
          "relu_backward: shape mismatch");
  Tensor g = upstream;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(input[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Losses

struct LossKind {
  enum class Type { SoftmaxCrossEntropy, MultiClassHinge };
  Type type = Type::MultiClassHinge;
  double margin = 1.0;
  bool squared = false;

  static LossKind softmax() { return {Type::SoftmaxCrossEntropy, 1.0, false}; }
  static LossKind hinge(double margin = 1.0, bool squared = false) {
    require(margin > 0.0, ErrorCode::kInvalidArgument, "hinge margin must be positive");
    return {Type::MultiClassHinge, margin, squared};
  }

  bool is_hinge() const { return type == Type::MultiClassHinge; }
  std::string name() const {
    if (!is_hinge()) return "softmax";
    return squared ? "squared_hinge" : "hinge";
  }
};

/// Class index, or an explicit one-vs-all target vector of +1/-1 entries
/// (all -1 marks background for the hinge loss).
using Target = std::variant<std::size_t, Tensor>;

inline Tensor background_target(std::size_t num_classes) {
  return Tensor({num_classes}, -1.0);
}

struct LossResult {
  double loss = 0.0;
  Tensor grad;
};

inline LossResult loss_forward_backward(const Tensor& scores, const Target& target,
                                        const LossKind& kind) {
  require(scores.rank() == 1 && scores.size() >= 2, ErrorCode::kShapeMismatch,
          "loss: scores must be a vector with K >= 2");
  const std::size_t K = scores.size();
  LossResult res{0.0, Tensor({K})};

  if (!kind.is_hinge()) {
    const auto* label = std::get_if<std::size_t>(&target);
    require(label != nullptr, ErrorCode::kInvalidArgument,
            "softmax loss needs a class index target");
    require(*label < K, ErrorCode::kInvalidArgument,
            "label " + std::to_string(*label) + " out of range for K=" + std::to_string(K));
    double mx = scores[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, scores[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(scores[k] - mx);
    const double lse = mx + std::log(z);
    res.loss = lse - scores[*label];
    for (std::size_t k = 0; k < K; ++k) res.grad[k] = std::exp(scores[k] - lse);
    res.grad[*label] -= 1.0;
    return res;
  }

  require(kind.margin > 0.0, ErrorCode::kInvalidArgument, "hinge margin must be positive");
  Tensor y({K}, -1.0);
  if (const auto* label = std::get_if<std::size_t>(&target)) {
    require(*label < K, ErrorCode::kInvalidArgument,
            "label " + std::to_string(*label) + " out of range for K=" + std::to_string(K));
    y[*label] = 1.0;
  } else {
    const Tensor& t = std::get<Tensor>(target);
    require(t.size() == K, ErrorCode::kInvalidArgument, "target vector length must equal K");
    for (std::size_t k = 0; k < K; ++k) {
      require(t[k] == 1.0 || t[k] == -1.0, ErrorCode::kInvalidArgument,
              "one-vs-all targets must be +1 or -1");
      y[k] = t[k];
    }
  }
  const double inv_k = 1.0 / static_cast<double>(K);
  for (std::size_t k = 0; k < K; ++k) {
    const double slack = kind.margin - y[k] * scores[k];
    if (slack > 0.0) {
      if (kind.squared) {
        res.loss += slack * slack * inv_k;
        res.grad[k] = -2.0 * slack * y[k] * inv_k;
      } else {
        res.loss += slack * inv_k;
        res.grad[k] = -y[k] * inv_k;
      }
    }
  }
  return res;
}

}  // namespace defnet
