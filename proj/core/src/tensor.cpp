#include "dastr/tensor.hpp"

#include <cmath>

#include "dastr/common.hpp"

namespace dastr {

namespace {

void check_shape(std::int64_t r, std::int64_t c) {
  if (r < 0 || c < 0) throw make_error("Tensor: negative shape (", r, ", ", c, ")");
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw make_error("Tensor ", op, ": incompatible shapes (", a.rows, ", ", a.cols, ") and (",
                   b.rows, ", ", b.cols, ")");
}

bool broadcast_dim(std::int64_t a, std::int64_t b, std::int64_t& out) {
  if (a == b) {
    out = a;
    return true;
  }
  if (a == 1) {
    out = b;
    return true;
  }
  if (b == 1) {
    out = a;
    return true;
  }
  return false;
}

template <typename F>
Tensor binary_broadcast(const char* name, const Tensor& a, const Tensor& b, F&& op) {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  if (!broadcast_dim(a.rows, b.rows, rows) || !broadcast_dim(a.cols, b.cols, cols)) {
    shape_mismatch(name, a, b);
  }
  Tensor out(rows, cols);
  if (a.same_shape(b)) {
    const std::size_t n = a.data.size();
    for (std::size_t i = 0; i < n; ++i) out.data[i] = op(a.data[i], b.data[i]);
    return out;
  }
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* pa = a.data.data() + (a.rows == 1 ? 0 : i) * a.cols;
    const double* pb = b.data.data() + (b.rows == 1 ? 0 : i) * b.cols;
    double* po = out.data.data() + i * cols;
    const bool a_col = a.cols == 1;
    const bool b_col = b.cols == 1;
    for (std::int64_t j = 0; j < cols; ++j) {
      po[j] = op(pa[a_col ? 0 : j], pb[b_col ? 0 : j]);
    }
  }
  return out;
}

template <typename F>
Tensor unary(const Tensor& a, F&& op) {
  Tensor out(a.rows, a.cols);
  const std::size_t n = a.data.size();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = op(a.data[i]);
  return out;
}

}  // namespace

Tensor::Tensor(std::int64_t r, std::int64_t c) : rows(r), cols(c) {
  check_shape(r, c);
  data.assign(static_cast<std::size_t>(r * c), 0.0);
}

Tensor Tensor::zeros(std::int64_t r, std::int64_t c) { return Tensor(r, c); }

Tensor Tensor::full(std::int64_t r, std::int64_t c, double value) {
  Tensor t(r, c);
  for (double& x : t.data) x = value;
  return t;
}

Tensor Tensor::scalar(double value) { return full(1, 1, value); }

Tensor Tensor::from_row(std::span<const double> row) {
  Tensor t(1, static_cast<std::int64_t>(row.size()));
  std::copy(row.begin(), row.end(), t.data.begin());
  return t;
}

Tensor Tensor::from_column(std::span<const double> column) {
  Tensor t(static_cast<std::int64_t>(column.size()), 1);
  std::copy(column.begin(), column.end(), t.data.begin());
  return t;
}

double Tensor::item() const {
  if (rows != 1 || cols != 1) {
    throw make_error("Tensor::item on shape (", rows, ", ", cols, ")");
  }
  return data[0];
}

bool Tensor::all_finite() const {
  for (double x : data) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols != b.rows) shape_mismatch("matmul", a, b);
  Tensor out(a.rows, b.cols);
  const std::int64_t m = a.rows, k = a.cols, n = b.cols;
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a.data.data() + i * k;
    double* orow = out.data.data() + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double scale = arow[p];
      if (scale == 0.0) continue;
      const double* brow = b.data.data() + p * n;
      for (std::int64_t j = 0; j < n; ++j) orow[j] += scale * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out(a.cols, a.rows);
  for (std::int64_t i = 0; i < a.rows; ++i) {
    for (std::int64_t j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_broadcast("add", a, b, [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_broadcast("sub", a, b, [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_broadcast("mul", a, b, [](double x, double y) { return x * y; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_broadcast("div", a, b, [](double x, double y) { return x / y; });
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
  if (!x.same_shape(y)) shape_mismatch("axpy", x, y);
  const std::size_t n = x.data.size();
  for (std::size_t i = 0; i < n; ++i) y.data[i] += alpha * x.data[i];
}

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return factor * x; });
}

Tensor shift(const Tensor& a, double offset) {
  return unary(a, [offset](double x) { return x + offset; });
}

Tensor neg(const Tensor& a) {
  return unary(a, [](double x) { return -x; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, [](double x) {
    if (x >= 0.0) {
      double e = std::exp(-x);
      return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
  });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(a, [](double x) { return std::sqrt(x); });
}

Tensor pow_const(const Tensor& a, double exponent) {
  return unary(a, [exponent](double x) { return std::pow(x, exponent); });
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.data) acc += x;
  return Tensor::scalar(acc);
}

Tensor sum_rows(const Tensor& a) {
  Tensor out(1, a.cols);
  for (std::int64_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    for (std::int64_t j = 0; j < a.cols; ++j) out.data[static_cast<std::size_t>(j)] += arow[j];
  }
  return out;
}

Tensor sum_cols(const Tensor& a) {
  Tensor out(a.rows, 1);
  for (std::int64_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    double acc = 0.0;
    for (std::int64_t j = 0; j < a.cols; ++j) acc += arow[j];
    out.data[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

Tensor select_cols(const Tensor& a, std::span<const std::int64_t> idx) {
  Tensor out(a.rows, static_cast<std::int64_t>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= a.cols) {
      throw make_error("select_cols: index ", idx[j], " out of range for ", a.cols, " columns");
    }
  }
  for (std::int64_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    double* orow = out.data.data() + i * out.cols;
    for (std::size_t j = 0; j < idx.size(); ++j) orow[j] = arow[idx[j]];
  }
  return out;
}

Tensor scatter_cols(const Tensor& a, std::span<const std::int64_t> idx, std::int64_t width) {
  if (static_cast<std::int64_t>(idx.size()) != a.cols) {
    throw make_error("scatter_cols: ", idx.size(), " indices for ", a.cols, " columns");
  }
  Tensor out(a.rows, width);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= width) {
      throw make_error("scatter_cols: index ", idx[j], " out of range for width ", width);
    }
  }
  for (std::int64_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    double* orow = out.data.data() + i * width;
    for (std::size_t j = 0; j < idx.size(); ++j) orow[idx[j]] = arow[j];
  }
  return out;
}

Tensor take_rows(const Tensor& a, std::span<const std::int64_t> idx) {
  Tensor out(static_cast<std::int64_t>(idx.size()), a.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows) {
      throw make_error("take_rows: index ", idx[i], " out of range for ", a.rows, " rows");
    }
    const double* arow = a.data.data() + idx[i] * a.cols;
    std::copy(arow, arow + a.cols, out.data.data() + static_cast<std::int64_t>(i) * a.cols);
  }
  return out;
}

Tensor reduce_to_shape(const Tensor& grad, std::int64_t rows, std::int64_t cols) {
  if (grad.rows == rows && grad.cols == cols) return grad;
  Tensor out = grad;
  if (rows == 1 && out.rows != 1) out = sum_rows(out);
  if (cols == 1 && out.cols != 1) out = sum_cols(out);
  if (out.rows != rows || out.cols != cols) {
    throw make_error("reduce_to_shape: cannot reduce (", grad.rows, ", ", grad.cols, ") to (",
                     rows, ", ", cols, ")");
  }
  return out;
}

}  // namespace dastr
