#include "dastr/autodiff.hpp"

#include <algorithm>

#include "dastr/common.hpp"

namespace dastr::ad {

namespace {

Tape& same_tape(Value a, Value b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw make_error("autodiff: operands recorded on different tapes");
  }
  return *a.tape;
}

Tape& tape_of(Value a) {
  if (a.tape == nullptr) throw make_error("autodiff: invalid value handle");
  return *a.tape;
}

Value unary(Value a, Op op, Tensor value, double aux = 0.0) {
  Node n;
  n.op = op;
  n.a = a.id;
  n.value = std::move(value);
  n.aux = aux;
  return tape_of(a).record(std::move(n));
}

Value binary(Value a, Value b, Op op, Tensor value) {
  Node n;
  n.op = op;
  n.a = a.id;
  n.b = b.id;
  n.value = std::move(value);
  return same_tape(a, b).record(std::move(n));
}

Value ones_like(Tape& tape, const Tensor& ref) {
  return constant(tape, Tensor::full(ref.rows, ref.cols, 1.0));
}

// Sums `g` down to the given shape along broadcast dimensions, recording the
// reduction so it stays differentiable.  Takes the target shape by value:
// recording may reallocate node storage, so references into it cannot be held
// across these calls.
Value reduce_to(Value g, std::int64_t rows, std::int64_t cols) {
  Value out = g;
  if (rows == 1 && out.rows() != 1) out = sum_rows(out);
  if (cols == 1 && out.cols() != 1) out = sum_cols(out);
  if (out.rows() != rows || out.cols() != cols) {
    throw make_error("autodiff: adjoint shape (", g.rows(), ", ", g.cols(),
                     ") does not reduce to (", rows, ", ", cols, ")");
  }
  return out;
}

}  // namespace

const Tensor& Value::value() const {
  if (!valid()) throw make_error("autodiff: reading an invalid value handle");
  return tape->node(id).value;
}

Value Tape::record(Node&& node) {
  nodes_.push_back(std::move(node));
  return Value{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Node& Tape::node(std::int32_t id) const {
  if (id < 0 || id >= size()) throw make_error("autodiff: node id ", id, " out of range");
  return nodes_[static_cast<std::size_t>(id)];
}

Value constant(Tape& tape, Tensor value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return tape.record(std::move(n));
}

Value leaf(Tape& tape, Tensor value) {
  Node n;
  n.op = Op::kLeaf;
  n.value = std::move(value);
  return tape.record(std::move(n));
}

Value add(Value a, Value b) { return binary(a, b, Op::kAdd, dastr::add(a.value(), b.value())); }
Value sub(Value a, Value b) { return binary(a, b, Op::kSub, dastr::sub(a.value(), b.value())); }
Value mul(Value a, Value b) { return binary(a, b, Op::kMul, dastr::mul(a.value(), b.value())); }
Value div(Value a, Value b) { return binary(a, b, Op::kDiv, dastr::div(a.value(), b.value())); }
Value neg(Value a) { return unary(a, Op::kNeg, dastr::neg(a.value())); }
Value exp(Value a) { return unary(a, Op::kExp, dastr::exp(a.value())); }
Value log(Value a) { return unary(a, Op::kLog, dastr::log(a.value())); }
Value tanh(Value a) { return unary(a, Op::kTanh, dastr::tanh(a.value())); }
Value sigmoid(Value a) { return unary(a, Op::kSigmoid, dastr::sigmoid(a.value())); }
Value relu(Value a) { return unary(a, Op::kRelu, dastr::relu(a.value())); }
Value square(Value a) { return unary(a, Op::kSquare, dastr::square(a.value())); }
Value sqrt(Value a) { return unary(a, Op::kSqrt, dastr::sqrt(a.value())); }

Value pow_const(Value a, double exponent) {
  return unary(a, Op::kPowConst, dastr::pow_const(a.value(), exponent), exponent);
}

Value scale(Value a, double factor) {
  return unary(a, Op::kScale, dastr::scale(a.value(), factor), factor);
}

Value shift(Value a, double offset) {
  return unary(a, Op::kShift, dastr::shift(a.value(), offset), offset);
}

Value matmul(Value a, Value b) {
  return binary(a, b, Op::kMatmul, dastr::matmul(a.value(), b.value()));
}

Value transpose(Value a) { return unary(a, Op::kTranspose, dastr::transpose(a.value())); }
Value sum_all(Value a) { return unary(a, Op::kSumAll, dastr::sum_all(a.value())); }
Value sum_rows(Value a) { return unary(a, Op::kSumRows, dastr::sum_rows(a.value())); }
Value sum_cols(Value a) { return unary(a, Op::kSumCols, dastr::sum_cols(a.value())); }

Value mean_all(Value a) {
  const std::int64_t n = a.value().size();
  if (n == 0) throw make_error("autodiff: mean of an empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Value select_cols(Value a, std::span<const std::int64_t> idx) {
  Node n;
  n.op = Op::kSelectCols;
  n.a = a.id;
  n.value = dastr::select_cols(a.value(), idx);
  n.idx.assign(idx.begin(), idx.end());
  return tape_of(a).record(std::move(n));
}

Value scatter_cols(Value a, std::span<const std::int64_t> idx, std::int64_t width) {
  Node n;
  n.op = Op::kScatterCols;
  n.a = a.id;
  n.value = dastr::scatter_cols(a.value(), idx, width);
  n.idx.assign(idx.begin(), idx.end());
  n.scatter_width = width;
  return tape_of(a).record(std::move(n));
}

Value swish(Value a) { return mul(a, sigmoid(a)); }

Value stop_gradient(Value a) { return constant(tape_of(a), a.value()); }

std::vector<Value> grad(Value out, std::span<const Value> wrt) {
  Tape& tape = tape_of(out);
  if (out.rows() != 1 || out.cols() != 1) {
    throw make_error("autodiff: grad target has shape (", out.rows(), ", ", out.cols(),
                     "), expected a scalar");
  }
  for (const Value& w : wrt) {
    if (w.tape != &tape) throw make_error("autodiff: grad target and wrt on different tapes");
  }

  const std::int32_t root = out.id;
  const std::size_t span_size = static_cast<std::size_t>(root) + 1;

  // Nodes that can influence `out`.
  std::vector<char> ancestor(span_size, 0);
  {
    std::vector<std::int32_t> stack{root};
    ancestor[static_cast<std::size_t>(root)] = 1;
    while (!stack.empty()) {
      const Node& n = tape.node(stack.back());
      stack.pop_back();
      for (std::int32_t parent : {n.a, n.b}) {
        if (parent >= 0 && !ancestor[static_cast<std::size_t>(parent)]) {
          ancestor[static_cast<std::size_t>(parent)] = 1;
          stack.push_back(parent);
        }
      }
    }
  }

  // Nodes influenced by any wrt target.
  std::vector<char> active(span_size, 0);
  for (const Value& w : wrt) {
    if (w.id <= root) active[static_cast<std::size_t>(w.id)] = 1;
  }
  for (std::int32_t i = 0; i <= root; ++i) {
    if (active[static_cast<std::size_t>(i)]) continue;
    const Node& n = tape.node(i);
    if ((n.a >= 0 && active[static_cast<std::size_t>(n.a)]) ||
        (n.b >= 0 && active[static_cast<std::size_t>(n.b)])) {
      active[static_cast<std::size_t>(i)] = 1;
    }
  }

  auto needed = [&](std::int32_t id) {
    return id >= 0 && ancestor[static_cast<std::size_t>(id)] && active[static_cast<std::size_t>(id)];
  };

  std::vector<Value> adjoint(span_size, Value{});
  auto accumulate = [&](std::int32_t id, Value contribution) {
    Value& slot = adjoint[static_cast<std::size_t>(id)];
    slot = slot.valid() ? add(slot, contribution) : contribution;
  };

  if (needed(root)) {
    adjoint[static_cast<std::size_t>(root)] = constant(tape, Tensor::scalar(1.0));
  }

  for (std::int32_t id = root; id >= 0; --id) {
    const Value g = adjoint[static_cast<std::size_t>(id)];
    if (!g.valid() || !needed(id)) continue;
    // Copy the node fields needed below: recording backward nodes may
    // reallocate the tape's node storage.
    const Node& node_ref = tape.node(id);
    const Op op = node_ref.op;
    const std::int32_t pa = node_ref.a;
    const std::int32_t pb = node_ref.b;
    const double aux = node_ref.aux;
    const std::vector<std::int64_t> idx = node_ref.idx;
    const Value self{&tape, id};
    const Value a{&tape, pa};
    const Value b{&tape, pb};
    const bool need_a = needed(pa);
    const bool need_b = needed(pb);
    const std::int64_t a_rows = pa >= 0 ? a.rows() : 0;
    const std::int64_t a_cols = pa >= 0 ? a.cols() : 0;
    const std::int64_t b_rows = pb >= 0 ? b.rows() : 0;
    const std::int64_t b_cols = pb >= 0 ? b.cols() : 0;

    switch (op) {
      case Op::kConstant:
      case Op::kLeaf:
        break;
      case Op::kAdd:
        if (need_a) accumulate(pa, reduce_to(g, a_rows, a_cols));
        if (need_b) accumulate(pb, reduce_to(g, b_rows, b_cols));
        break;
      case Op::kSub:
        if (need_a) accumulate(pa, reduce_to(g, a_rows, a_cols));
        if (need_b) accumulate(pb, reduce_to(neg(g), b_rows, b_cols));
        break;
      case Op::kMul:
        if (need_a) accumulate(pa, reduce_to(mul(g, b), a_rows, a_cols));
        if (need_b) accumulate(pb, reduce_to(mul(g, a), b_rows, b_cols));
        break;
      case Op::kDiv:
        if (need_a) accumulate(pa, reduce_to(div(g, b), a_rows, a_cols));
        if (need_b) accumulate(pb, reduce_to(neg(div(mul(g, self), b)), b_rows, b_cols));
        break;
      case Op::kNeg:
        if (need_a) accumulate(pa, neg(g));
        break;
      case Op::kExp:
        if (need_a) accumulate(pa, mul(g, self));
        break;
      case Op::kLog:
        if (need_a) accumulate(pa, div(g, a));
        break;
      case Op::kTanh:
        if (need_a) accumulate(pa, sub(g, mul(g, square(self))));
        break;
      case Op::kSigmoid:
        if (need_a) accumulate(pa, mul(g, sub(self, square(self))));
        break;
      case Op::kRelu:
        if (need_a) {
          const Tensor& x = a.value();
          Tensor mask(x.rows, x.cols);
          for (std::size_t i = 0; i < x.data.size(); ++i) mask.data[i] = x.data[i] > 0.0 ? 1.0 : 0.0;
          accumulate(pa, mul(g, constant(tape, std::move(mask))));
        }
        break;
      case Op::kSquare:
        if (need_a) accumulate(pa, mul(g, scale(a, 2.0)));
        break;
      case Op::kSqrt:
        if (need_a) accumulate(pa, div(g, scale(self, 2.0)));
        break;
      case Op::kPowConst:
        if (need_a) {
          if (aux == 0.0) break;  // derivative of x^0 is 0
          accumulate(pa, mul(g, scale(pow_const(a, aux - 1.0), aux)));
        }
        break;
      case Op::kScale:
        if (need_a) accumulate(pa, scale(g, aux));
        break;
      case Op::kShift:
        if (need_a) accumulate(pa, g);
        break;
      case Op::kMatmul:
        if (need_a) accumulate(pa, matmul(g, transpose(b)));
        if (need_b) accumulate(pb, matmul(transpose(a), g));
        break;
      case Op::kTranspose:
        if (need_a) accumulate(pa, transpose(g));
        break;
      case Op::kSumAll:
      case Op::kSumRows:
      case Op::kSumCols:
        if (need_a) accumulate(pa, mul(ones_like(tape, a.value()), g));
        break;
      case Op::kSelectCols:
        if (need_a) accumulate(pa, scatter_cols(g, idx, a_cols));
        break;
      case Op::kScatterCols:
        if (need_a) accumulate(pa, select_cols(g, idx));
        break;
    }
  }

  std::vector<Value> result;
  result.reserve(wrt.size());
  for (const Value& w : wrt) {
    const Value a = (w.id <= root) ? adjoint[static_cast<std::size_t>(w.id)] : Value{};
    if (a.valid()) {
      result.push_back(a);
    } else {
      const Tensor& ref = w.value();
      result.push_back(constant(tape, Tensor::zeros(ref.rows, ref.cols)));
    }
  }
  return result;
}

Value input_gradient(Value out, Value x) {
  Value total = sum_all(out);
  Value wrt[] = {x};
  return grad(total, wrt)[0];
}

}  // namespace dastr::ad
