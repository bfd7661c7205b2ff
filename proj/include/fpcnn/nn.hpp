#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace fpcnn::nn {

// Patch classifier: two conv3x3+relu+maxpool2 stages, a relu hidden layer,
// then one sigmoid unit fed by the hidden activations concatenated with the
// three position features.
struct ModelConfig {
  std::size_t patch_size = 9;
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t hidden_units = 32;
  // With position off the three extra inputs are fed zeros; the parameter
  // vector keeps the same shape either way.
  bool use_position = true;

  bool operator==(const ModelConfig&) const = default;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One named parameter block with its gradient accumulator and Adam moments.
struct Tensor {
  std::string name;
  std::vector<double> value, grad, m, v;
};

double bce_loss(double prob, double label);  // probs clamped away from {0, 1}

class Model {
 public:
  // He-uniform weights (limit sqrt(6 / fan_in)), zero biases, single seed.
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::size_t parameter_count() const;
  std::uint64_t adam_step_count() const { return adam_t_; }
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;

  // Forward pass for one example; pixels must hold patch_size^2 values.
  // Not thread safe: one scratch workspace is reused across calls.
  double predict(const std::vector<double>& pixels,
                 const std::array<double, 3>& pos) const;

  // Forward + backward for one example. Adds into the gradient accumulators
  // (callers average over a batch by scaling) and returns the predicted
  // probability; pair with bce_loss for the example loss.
  double accumulate_gradient(const std::vector<double>& pixels,
                             const std::array<double, 3>& pos, double label);

  void zero_gradients();
  void scale_gradients(double factor);
  void adam_step(const AdamConfig& adam);

 private:
  struct Workspace {
    std::vector<double> a1, m1, a2, m2, flat_grad, a3, cat;
    std::vector<std::size_t> arg1, arg2;
    std::vector<double> d1, dm1, d2, d3;
  };

  double forward(const double* pixels, const std::array<double, 3>& pos) const;

  ModelConfig cfg_;
  std::size_t p_ = 0, p1_ = 0, q_ = 0, flat_ = 0;
  Tensor w1_, b1_, w2_, b2_, w3_, b3_, w4_, b4_;
  std::uint64_t adam_t_ = 0;
  mutable Workspace ws_;

  friend void save_model(const Model&, const std::string&);
  friend Model load_model(const std::string&);
};

// Self-describing binary snapshot, Adam state included, so a reloaded model
// continues training exactly where the saved one stopped.
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace fpcnn::nn
