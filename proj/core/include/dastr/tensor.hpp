#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace dastr {

// Dense rank-2 double tensor in row-major order.  Scalars are (1,1), batches
// of points are (n,d), weight matrices are (in,out).  Invariant: data.size()
// == rows*cols, enforced on every construction path.
//
// All kernels are single-threaded with a fixed accumulation order, so results
// are bit-reproducible for a given binary.
struct Tensor {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::int64_t r, std::int64_t c);

  static Tensor zeros(std::int64_t r, std::int64_t c);
  static Tensor full(std::int64_t r, std::int64_t c, double value);
  static Tensor scalar(double value);
  static Tensor from_row(std::span<const double> row);
  static Tensor from_column(std::span<const double> column);

  std::int64_t size() const { return rows * cols; }
  std::array<std::int64_t, 2> shape() const { return {rows, cols}; }
  bool same_shape(const Tensor& other) const { return rows == other.rows && cols == other.cols; }

  double& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols + c)]; }
  double at(std::int64_t r, std::int64_t c) const { return data[static_cast<std::size_t>(r * cols + c)]; }

  std::span<double> row(std::int64_t r) { return {data.data() + r * cols, static_cast<std::size_t>(cols)}; }
  std::span<const double> row(std::int64_t r) const {
    return {data.data() + r * cols, static_cast<std::size_t>(cols)};
  }

  // Scalar accessor; throws unless the tensor is exactly (1,1).
  double item() const;

  bool all_finite() const;
};

// C = A(m,k) * B(k,n); fixed i-k-j loop order with fused accumulate rows.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise binary ops with broadcasting.  Supported shapes for b against
// a(m,n): (m,n), (1,n), (m,1), (1,1); and symmetrically when a is the smaller
// operand.  The output has the elementwise-max shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// In-place axpy: y += alpha * x, shapes must match exactly.
void axpy(double alpha, const Tensor& x, Tensor& y);

Tensor scale(const Tensor& a, double factor);
Tensor shift(const Tensor& a, double offset);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor pow_const(const Tensor& a, double exponent);

Tensor sum_all(const Tensor& a);   // -> (1,1)
Tensor sum_rows(const Tensor& a);  // (m,n) -> (1,n), sum over rows
Tensor sum_cols(const Tensor& a);  // (m,n) -> (m,1), sum over cols

// Column gather/scatter used by coupling layers.  select_cols picks the
// listed columns in order; scatter_cols places columns of a into a zero
// (m,width) tensor at the listed positions.
Tensor select_cols(const Tensor& a, std::span<const std::int64_t> idx);
Tensor scatter_cols(const Tensor& a, std::span<const std::int64_t> idx, std::int64_t width);

// Gather whole rows by index; used for minibatching.
Tensor take_rows(const Tensor& a, std::span<const std::int64_t> idx);

// Reduces `grad` (shaped like the broadcast output) to `shape_like` by
// summing over the broadcast dimensions; identity when shapes match.
Tensor reduce_to_shape(const Tensor& grad, std::int64_t rows, std::int64_t cols);

}  // namespace dastr
