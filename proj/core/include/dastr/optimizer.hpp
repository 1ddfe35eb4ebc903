#pragma once

#include <string>
#include <vector>

#include "dastr/tensor.hpp"

namespace dastr {

// A named trainable tensor.  Networks expose their parameters as a flat list;
// optimizers and checkpoints address them by position and by name.
struct Parameter {
  std::string name;
  Tensor value;
};

// Adam with bias correction.  Slot state (first/second moments, step count)
// is created lazily on the first step and must thereafter match the parameter
// list exactly.  The learning rate is mutable so trainers can apply decay
// schedules; moments survive rate changes.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                         double epsilon = 1e-8);

  void step(std::vector<Parameter>& params, const std::vector<Tensor>& grads);

  double learning_rate() const { return learning_rate_; }
  void set_learning_rate(double learning_rate);
  std::int64_t step_count() const { return step_count_; }

  // Checkpoint plumbing: moments are exposed as named tensors so an
  // interrupted run resumes with identical optimizer state.
  std::vector<Parameter> state_tensors(const std::vector<Parameter>& params) const;
  void load_state(const std::vector<Parameter>& params, const std::vector<Parameter>& state,
                  std::int64_t step_count);

 private:
  double learning_rate_;
  double beta1_;
  double beta2_;
  double epsilon_;
  std::int64_t step_count_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace dastr
