#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "protofuse/common.hpp"

namespace protofuse::nn {

enum class Activation { kIdentity, kRelu };

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix velocity;
  bool trainable = true;
  bool decay = true;
};

using ParamId = std::size_t;

/// Flat registry of named parameters, each with its gradient and momentum
/// buffers. `version()` changes on every update so stale tapes are detected.
class ParamStore {
 public:
  ParamId add(std::string name, Matrix init);

  [[nodiscard]] Parameter& operator[](ParamId id) { return params_.at(id); }
  [[nodiscard]] const Parameter& operator[](ParamId id) const { return params_.at(id); }
  [[nodiscard]] ParamId find(const std::string& name) const;
  [[nodiscard]] bool contains(const std::string& name) const { return index_.count(name) != 0; }

  [[nodiscard]] std::size_t size() const { return params_.size(); }
  [[nodiscard]] std::span<Parameter> params() { return params_; }
  [[nodiscard]] std::span<const Parameter> params() const { return params_; }
  [[nodiscard]] std::size_t num_scalars() const;

  void zero_grad();
  void reset_velocity();
  [[nodiscard]] std::uint64_t version() const { return version_; }
  void touch() { ++version_; }

 private:
  std::vector<Parameter> params_;
  std::map<std::string, ParamId> index_;
  std::uint64_t version_ = 0;
};

struct DenseLayer {
  ParamId weight = 0;  // out x in
  ParamId bias = 0;    // out x 1
  Activation activation = Activation::kIdentity;
  int in_dim = 0;
  int out_dim = 0;
};

/// Glorot-uniform weights, zero bias.
DenseLayer make_dense(ParamStore& store, const std::string& name, int in_dim, int out_dim, Activation activation,
                      Rng& rng);

struct LayerStack {
  std::vector<DenseLayer> layers;

  [[nodiscard]] int in_dim() const { return layers.front().in_dim; }
  [[nodiscard]] int out_dim() const { return layers.back().out_dim; }
};

/// Intermediates of one forward pass, enough for exact reverse mode.
struct Tape {
  const LayerStack* stack = nullptr;
  std::uint64_t version = 0;
  std::vector<Vector> inputs;          // input of each layer
  std::vector<Vector> pre_activation;  // affine output of each layer
  Vector output;
};

Tape forward(const LayerStack& stack, const ParamStore& store, const Vector& input);

/// Accumulates parameter gradients into `store` and returns d(loss)/d(input).
Vector backward(const Tape& tape, const Vector& output_grad, ParamStore& store);

struct SgdConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 100;

  void validate() const;
};

/// g += wd * theta; v = m * v + g; theta -= lr * v; then zeroes gradients.
/// Parameters with `trainable == false` are left untouched; `decay == false`
/// skips the weight-decay term.
/// Throws NumericError naming the parameter if any gradient is non-finite.
void sgd_step(ParamStore& store, const SgdConfig& config);

/// Recomputes the loss; when `accumulate` is set, adds analytic gradients to the store.
using LossFunction = std::function<double(ParamStore&, bool accumulate)>;

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t skipped_at_kink = 0;
};

struct GradientCheckOptions {
  double step = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-7;
  // Entries per tensor; tensors at or below this size are checked exhaustively.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

/// Compares analytic gradients against central finite differences. Entries
/// whose perturbation changes the ReLU activation pattern are skipped (the
/// loss is not differentiable across a kink) and counted.
GradientCheckReport gradient_check(ParamStore& store, const LossFunction& loss, const GradientCheckOptions& options = {});

/// Fingerprint of the ReLU sign pattern of every forward pass executed on this
/// thread while recording is enabled. Used by gradient_check.
class ActivationPatternRecorder {
 public:
  ActivationPatternRecorder();
  ~ActivationPatternRecorder();
  ActivationPatternRecorder(const ActivationPatternRecorder&) = delete;
  ActivationPatternRecorder& operator=(const ActivationPatternRecorder&) = delete;

  void reset();
  [[nodiscard]] std::uint64_t fingerprint() const;
};

void record_kink_pattern(std::span<const double> values);

/// Marks a non-ReLU kink (e.g. a clamp) so gradient_check can detect crossings.
void record_kink_flag(bool active);

/// Binary checkpoint: "PCN1", then per tensor until end of file:
/// name length + UTF-8 name + rank + dims (u32 LE) + float64 LE payload (row-major).
/// Loading requires every tensor of `store` to be present with the same shape.
std::string serialize_checkpoint(const ParamStore& store);
void deserialize_checkpoint(std::string_view bytes, ParamStore& store);
void save_checkpoint(const ParamStore& store, const std::filesystem::path& path);
void load_checkpoint(const std::filesystem::path& path, ParamStore& store);

}  // namespace protofuse::nn
