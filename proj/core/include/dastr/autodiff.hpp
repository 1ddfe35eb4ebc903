#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dastr/tensor.hpp"

namespace dastr::ad {

// Reverse-mode automatic differentiation on an explicit tape.
//
// Every operation appends a Node holding its operands' ids and its forward
// value.  grad() walks the tape backwards and *records the backward pass as
// new nodes on the same tape*, so gradients are themselves differentiable.
// That nesting is what the variational losses here need: the loss depends on
// the input-gradient of a network, and training differentiates that gradient
// with respect to the weights.
//
// A Tape is a per-step scratch structure: build a graph, call grad(), read
// numbers out, then destroy or clear() it.  Values are lightweight handles
// and become dangling after clear().

enum class Op : std::uint8_t {
  kConstant,
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kExp,
  kLog,
  kTanh,
  kSigmoid,
  kRelu,
  kSquare,
  kSqrt,
  kPowConst,
  kScale,
  kShift,
  kMatmul,
  kTranspose,
  kSumAll,
  kSumRows,
  kSumCols,
  kSelectCols,
  kScatterCols,
};

struct Node {
  Op op = Op::kConstant;
  std::int32_t a = -1;  // first parent id, -1 if none
  std::int32_t b = -1;  // second parent id, -1 if none
  Tensor value;
  double aux = 0.0;                    // kScale factor, kShift offset, kPowConst exponent
  std::vector<std::int64_t> idx;       // kSelectCols / kScatterCols column lists
  std::int64_t scatter_width = 0;      // kScatterCols output width
};

class Tape;

struct Value {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  std::int64_t rows() const { return value().rows; }
  std::int64_t cols() const { return value().cols; }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value record(Node&& node);
  const Node& node(std::int32_t id) const;
  std::int64_t size() const { return static_cast<std::int64_t>(nodes_.size()); }

  // Drops every node.  All Values previously issued from this tape are
  // invalidated; reuse is only safe when the caller rebuilds from scratch.
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

// --- graph construction -----------------------------------------------------

Value constant(Tape& tape, Tensor value);
// Identical to constant but tagged as a parameter leaf for readability in
// diagnostics; any node can serve as a differentiation target.
Value leaf(Tape& tape, Tensor value);

Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value div(Value a, Value b);
Value neg(Value a);
Value exp(Value a);
Value log(Value a);
Value tanh(Value a);
Value sigmoid(Value a);
Value relu(Value a);
Value square(Value a);
Value sqrt(Value a);
Value pow_const(Value a, double exponent);
Value scale(Value a, double factor);
Value shift(Value a, double offset);
Value matmul(Value a, Value b);
Value transpose(Value a);
Value sum_all(Value a);
Value sum_rows(Value a);
Value sum_cols(Value a);
Value mean_all(Value a);  // composite: sum_all / size
Value select_cols(Value a, std::span<const std::int64_t> idx);
Value scatter_cols(Value a, std::span<const std::int64_t> idx, std::int64_t width);

// x * sigmoid(x), the swish activation used by the autoencoders.
Value swish(Value a);

// Copies a value out of the differentiable graph: the result is a constant
// with the same numbers and no parents.
Value stop_gradient(Value a);

// --- differentiation --------------------------------------------------------

// Gradient of a scalar-valued node with respect to each entry of wrt.
// Records the backward computation on the tape, so the returned Values can be
// differentiated again.  Targets with no path to `out` yield zero tensors.
// Throws if `out` is not (1,1) or if any Value belongs to a different tape.
std::vector<Value> grad(Value out, std::span<const Value> wrt);

// Convenience: gradient of sum(out) with respect to the single input `x`.
// With a row-per-sample network whose output depends on inputs row-wise, the
// result's i-th row is the input-gradient of sample i.
Value input_gradient(Value out, Value x);

}  // namespace dastr::ad
