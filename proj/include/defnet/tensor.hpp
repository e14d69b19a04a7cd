#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "defnet/error.hpp"

namespace defnet {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    require(shape_numel(shape_) == data_.size(), ErrorCode::kShapeMismatch,
            "tensor data length " + std::to_string(data_.size()) +
                " does not match shape " + shape_string(shape_));
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  template <class... I>
  double& at(I... idx) {
    return data_[offset(static_cast<std::size_t>(idx)...)];
  }
  template <class... I>
  double at(I... idx) const {
    return data_[offset(static_cast<std::size_t>(idx)...)];
  }

  std::size_t flatten(std::span<const std::size_t> idx) const {
    require(idx.size() == shape_.size(), ErrorCode::kShapeMismatch,
            "index rank does not match tensor rank");
    std::size_t flat = 0;
    for (std::size_t a = 0; a < idx.size(); ++a) {
      require(idx[a] < shape_[a], ErrorCode::kInvalidArgument,
              "index out of range on axis " + std::to_string(a));
      flat = flat * shape_[a] + idx[a];
    }
    return flat;
  }

  std::vector<std::size_t> unflatten(std::size_t flat) const {
    require(flat < data_.size(), ErrorCode::kInvalidArgument,
            "flat index out of range");
    std::vector<std::size_t> idx(shape_.size());
    for (std::size_t a = shape_.size(); a-- > 0;) {
      idx[a] = flat % shape_[a];
      flat /= shape_[a];
    }
    return idx;
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  bool all_zero() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return v == 0.0; });
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

  Tensor& operator+=(const Tensor& o) {
    require(o.shape_ == shape_, ErrorCode::kShapeMismatch,
            "tensor += shape mismatch " + shape_string(shape_) + " vs " +
                shape_string(o.shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  // Bitwise-style equality: same shape and every element compares equal.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      require(d > 0, ErrorCode::kShapeMismatch,
              "tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  template <class... I>
  std::size_t offset(I... idx) const {
    const std::size_t ids[] = {idx...};
    std::size_t flat = 0;
    for (std::size_t a = 0; a < sizeof...(I); ++a) flat = flat * shape_[a] + ids[a];
    return flat;
  }

  Shape shape_;
  std::vector<double> data_;
};

// Shortest text that reads back to the identical double (at most 17 digits).
inline std::string format_double(double v) {
  char buf[40];
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc() && res.ptr == s.data() + s.size(),
          ErrorCode::kMalformedFile, "bad number '" + std::string(s) + "'");
  return v;
}

/// Flat text record: `shape: d0 d1 ... ; data: v0 v1 ...`.
inline std::string to_record(const Tensor& t) {
  std::string out = "shape:";
  for (std::size_t d : t.shape()) out += " " + std::to_string(d);
  out += " ; data:";
  for (double v : t.values()) {
    out += ' ';
    out += format_double(v);
  }
  return out;
}

inline Tensor from_record(std::string_view text) {
  auto bad = [&](const std::string& why) {
    fail(ErrorCode::kMalformedFile, "tensor record: " + why);
  };
  const auto sep = text.find(';');
  if (sep == std::string_view::npos) bad("missing ';'");
  std::string_view head = text.substr(0, sep);
  std::string_view tail = text.substr(sep + 1);

  auto tokens = [](std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
      while (i < s.size() && s[i] == ' ') ++i;
      std::size_t j = i;
      while (j < s.size() && s[j] != ' ') ++j;
      if (j > i) out.push_back(s.substr(i, j - i));
      i = j;
    }
    return out;
  };

  auto head_tokens = tokens(head);
  auto tail_tokens = tokens(tail);
  if (head_tokens.empty() || head_tokens[0] != "shape:") bad("missing 'shape:'");
  if (tail_tokens.empty() || tail_tokens[0] != "data:") bad("missing 'data:'");
  if (head_tokens.size() < 2) bad("empty shape");

  Shape shape;
  for (std::size_t i = 1; i < head_tokens.size(); ++i) {
    std::size_t d = 0;
    auto sv = head_tokens[i];
    auto res = std::from_chars(sv.data(), sv.data() + sv.size(), d);
    if (res.ec != std::errc() || res.ptr != sv.data() + sv.size() || d == 0) {
      bad("bad dimension '" + std::string(sv) + "'");
    }
    shape.push_back(d);
  }
  std::vector<double> data;
  data.reserve(tail_tokens.size() - 1);
  for (std::size_t i = 1; i < tail_tokens.size(); ++i) {
    data.push_back(parse_double(tail_tokens[i]));
  }
  if (data.size() != shape_numel(shape)) {
    bad("expected " + std::to_string(shape_numel(shape)) + " values, got " +
        std::to_string(data.size()));
  }
  return Tensor(std::move(shape), std::move(data));
}

inline Tensor concat(std::initializer_list<const Tensor*> parts) {
  std::vector<double> out;
  for (const Tensor* p : parts) {
    out.insert(out.end(), p->values().begin(), p->values().end());
  }
  return Tensor::vector(std::move(out));
}

}  // namespace defnet
