#ifndef FUSIONDET_TENSOR_HPP
#define FUSIONDET_TENSOR_HPP

#include <array>
#include <cassert>
#include <cmath>
#include <string>

#include <Eigen/Core>

#include "fusiondet/common.hpp"

namespace fusiondet {

template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowMajorMatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Rank-4 dense array carrying activations and images.
///
/// Layout is fixed: (batch, height, width, channels), flattened batch-major,
/// then row, column, channel:
///   offset(b, y, x, c) = ((b*H + y)*W + x)*C + c.
template <typename Scalar>
class Tensor4 {
 public:
  Tensor4() : dims_{0, 0, 0, 0} {}

  Tensor4(Index batch, Index height, Index width, Index channels)
      : dims_{batch, height, width, channels} {
    if (batch < 0 || height < 0 || width < 0 || channels < 0) {
      throw DimensionError("Tensor4: negative dimension");
    }
    data_ = VecX<Scalar>::Zero(batch * height * width * channels);
  }

  Index batch() const { return dims_[0]; }
  Index height() const { return dims_[1]; }
  Index width() const { return dims_[2]; }
  Index channels() const { return dims_[3]; }
  const std::array<Index, 4>& dims() const { return dims_; }
  Index size() const { return data_.size(); }

  Index offset(Index b, Index y, Index x, Index c) const {
    assert(b >= 0 && b < dims_[0] && y >= 0 && y < dims_[1]);
    assert(x >= 0 && x < dims_[2] && c >= 0 && c < dims_[3]);
    return ((b * dims_[1] + y) * dims_[2] + x) * dims_[3] + c;
  }

  std::array<Index, 4> coords(Index flat) const {
    assert(flat >= 0 && flat < size());
    const Index c = flat % dims_[3];
    flat /= dims_[3];
    const Index x = flat % dims_[2];
    flat /= dims_[2];
    const Index y = flat % dims_[1];
    const Index b = flat / dims_[1];
    return {b, y, x, c};
  }

  Scalar& operator()(Index b, Index y, Index x, Index c) { return data_[offset(b, y, x, c)]; }
  Scalar operator()(Index b, Index y, Index x, Index c) const { return data_[offset(b, y, x, c)]; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  VecX<Scalar>& vec() { return data_; }
  const VecX<Scalar>& vec() const { return data_; }

  bool same_dims(const Tensor4& other) const { return dims_ == other.dims_; }

  bool all_finite() const { return data_.allFinite(); }

  void set_zero() { data_.setZero(); }

  std::string dims_str() const {
    return std::to_string(dims_[0]) + "x" + std::to_string(dims_[1]) + "x" +
           std::to_string(dims_[2]) + "x" + std::to_string(dims_[3]);
  }

  template <typename Other>
  Tensor4<Other> cast() const {
    Tensor4<Other> out(dims_[0], dims_[1], dims_[2], dims_[3]);
    out.vec() = data_.template cast<Other>();
    return out;
  }

 private:
  std::array<Index, 4> dims_;
  VecX<Scalar> data_;
};

template <typename Scalar>
void require_same_dims(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b, const char* where) {
  if (!a.same_dims(b)) {
    throw DimensionError(std::string(where) + ": dims mismatch " + a.dims_str() + " vs " +
                         b.dims_str());
  }
}

}  // namespace fusiondet

#endif  // FUSIONDET_TENSOR_HPP
