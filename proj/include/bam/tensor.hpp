#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace bam {

/// Dense n-d array over a scalar type. Storage is a flat Eigen array in
/// row-major order over the shape (last dimension fastest). Feature maps use
/// the {channels, height, width} convention throughout.
template <typename S>
struct Tensor {
  using Storage = Eigen::Array<S, Eigen::Dynamic, 1>;

  std::vector<int> shape;
  Storage data;

  Tensor() = default;

  explicit Tensor(std::vector<int> dims) : shape(std::move(dims)) {
    data = Storage::Zero(count(shape));
  }

  Tensor(std::vector<int> dims, std::initializer_list<S> values)
      : shape(std::move(dims)) {
    if (static_cast<std::int64_t>(values.size()) != count(shape))
      throw std::invalid_argument("tensor initializer size mismatch");
    data.resize(values.size());
    std::int64_t i = 0;
    for (S v : values) data[i++] = v;
  }

  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }

  static Tensor full(std::vector<int> dims, S value) {
    Tensor t(std::move(dims));
    t.data.setConstant(value);
    return t;
  }

  static Tensor scalar(S value) { return full({1}, value); }

  static std::int64_t count(const std::vector<int>& dims) {
    std::int64_t n = 1;
    for (int d : dims) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= d;
    }
    return n;
  }

  std::int64_t size() const { return data.size(); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(shape.size()); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  S& operator[](std::int64_t i) { return data[i]; }
  S operator[](std::int64_t i) const { return data[i]; }

  /// Element access for {C,H,W} tensors.
  S& at(int c, int y, int x) {
    return data[(static_cast<std::int64_t>(c) * shape[1] + y) * shape[2] + x];
  }
  S at(int c, int y, int x) const {
    return data[(static_cast<std::int64_t>(c) * shape[1] + y) * shape[2] + x];
  }

  /// Element access for {H,W} tensors.
  S& at(int y, int x) {
    return data[static_cast<std::int64_t>(y) * shape[1] + x];
  }
  S at(int y, int x) const {
    return data[static_cast<std::int64_t>(y) * shape[1] + x];
  }

  bool all_finite() const { return data.isFinite().all(); }

  /// View the flat storage as a row-major rows x cols matrix.
  auto mat(std::int64_t rows, std::int64_t cols) {
    using Mat =
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    if (rows * cols != size()) throw std::invalid_argument("mat view mismatch");
    return Eigen::Map<Mat>(data.data(), rows, cols);
  }
  auto mat(std::int64_t rows, std::int64_t cols) const {
    using Mat =
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    if (rows * cols != size()) throw std::invalid_argument("mat view mismatch");
    return Eigen::Map<const Mat>(data.data(), rows, cols);
  }

  auto vec() { return Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(data.data(), size()); }
  auto vec() const {
    return Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(data.data(), size());
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data = data.template cast<T>();
    return out;
  }
};

/// Integer label map, {H,W} row-major. Used for semantic masks and argmax
/// outputs; values are class ids with 0 reserved for background.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> labels;

  LabelMap() = default;
  LabelMap(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}

  std::int32_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::int32_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }

  bool operator==(const LabelMap& other) const = default;
};

}  // namespace bam
