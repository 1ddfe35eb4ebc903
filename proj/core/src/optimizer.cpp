#include "dastr/optimizer.hpp"

#include <cmath>

#include "dastr/common.hpp"

namespace dastr {

AdamOptimizer::AdamOptimizer(double learning_rate, double beta1, double beta2, double epsilon)
    : learning_rate_(learning_rate), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  if (!(learning_rate > 0.0)) throw make_error("AdamOptimizer: learning rate must be positive");
}

void AdamOptimizer::set_learning_rate(double learning_rate) {
  if (!(learning_rate > 0.0)) throw make_error("AdamOptimizer: learning rate must be positive");
  learning_rate_ = learning_rate;
}

void AdamOptimizer::step(std::vector<Parameter>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) {
    throw make_error("AdamOptimizer::step: ", params.size(), " parameters but ", grads.size(),
                     " gradients");
  }
  if (m_.empty()) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Parameter& p : params) {
      m_.push_back(Tensor::zeros(p.value.rows, p.value.cols));
      v_.push_back(Tensor::zeros(p.value.rows, p.value.cols));
    }
  }
  if (m_.size() != params.size()) {
    throw make_error("AdamOptimizer::step: slot count ", m_.size(), " does not match ",
                     params.size(), " parameters");
  }

  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));

  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& theta = params[k].value;
    const Tensor& g = grads[k];
    if (!theta.same_shape(g)) {
      throw make_error("AdamOptimizer::step: gradient shape (", g.rows, ", ", g.cols,
                       ") does not match parameter '", params[k].name, "' (", theta.rows, ", ",
                       theta.cols, ")");
    }
    if (!g.all_finite()) {
      throw make_error("AdamOptimizer::step: non-finite gradient for parameter '", params[k].name,
                       "'");
    }
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    const std::size_t n = theta.data.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = g.data[i];
      m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * gi;
      v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * gi * gi;
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      theta.data[i] -= learning_rate_ * mhat / (std::sqrt(vhat) + epsilon_);
    }
  }
}

std::vector<Parameter> AdamOptimizer::state_tensors(const std::vector<Parameter>& params) const {
  std::vector<Parameter> state;
  if (m_.empty()) return state;
  if (m_.size() != params.size()) {
    throw make_error("AdamOptimizer::state_tensors: slot count mismatch");
  }
  state.reserve(2 * params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    state.push_back({"adam.m." + params[k].name, m_[k]});
    state.push_back({"adam.v." + params[k].name, v_[k]});
  }
  return state;
}

void AdamOptimizer::load_state(const std::vector<Parameter>& params,
                               const std::vector<Parameter>& state, std::int64_t step_count) {
  if (state.size() != 2 * params.size()) {
    throw make_error("AdamOptimizer::load_state: expected ", 2 * params.size(),
                     " state tensors, got ", state.size());
  }
  m_.clear();
  v_.clear();
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Parameter& sm = state[2 * k];
    const Parameter& sv = state[2 * k + 1];
    if (sm.name != "adam.m." + params[k].name || sv.name != "adam.v." + params[k].name) {
      throw make_error("AdamOptimizer::load_state: state tensor order mismatch at '",
                       params[k].name, "'");
    }
    if (!sm.value.same_shape(params[k].value) || !sv.value.same_shape(params[k].value)) {
      throw make_error("AdamOptimizer::load_state: state shape mismatch at '", params[k].name,
                       "'");
    }
    m_.push_back(sm.value);
    v_.push_back(sv.value);
  }
  step_count_ = step_count;
}

}  // namespace dastr
