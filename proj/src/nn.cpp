#include "protofuse/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

namespace protofuse::nn {

ParamId ParamStore::add(std::string name, Matrix init) {
  if (index_.count(name)) throw ValidationError("duplicate parameter name '" + name + "'");
  const ParamId id = params_.size();
  index_.emplace(name, id);
  Parameter p;
  p.name = std::move(name);
  p.grad = Matrix::Zero(init.rows(), init.cols());
  p.velocity = Matrix::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  params_.push_back(std::move(p));
  return id;
}

ParamId ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

void ParamStore::reset_velocity() {
  for (auto& p : params_) p.velocity.setZero();
}

DenseLayer make_dense(ParamStore& store, const std::string& name, int in_dim, int out_dim, Activation activation,
                      Rng& rng) {
  if (in_dim < 1 || out_dim < 1) throw ValidationError("dense layer '" + name + "' needs positive dimensions");
  const double limit = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix w(out_dim, in_dim);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = dist(rng);
  }
  DenseLayer layer;
  layer.weight = store.add(name + ".weight", std::move(w));
  layer.bias = store.add(name + ".bias", Matrix::Zero(out_dim, 1));
  layer.activation = activation;
  layer.in_dim = in_dim;
  layer.out_dim = out_dim;
  return layer;
}

namespace {

struct KinkState {
  bool enabled = false;
  std::uint64_t hash = 0xcbf29ce484222325ULL;
};

thread_local KinkState kink_state;

void mix(std::uint64_t bits) {
  kink_state.hash ^= bits;
  kink_state.hash *= 0x100000001b3ULL;
}

}  // namespace

ActivationPatternRecorder::ActivationPatternRecorder() {
  kink_state.enabled = true;
  reset();
}

ActivationPatternRecorder::~ActivationPatternRecorder() { kink_state.enabled = false; }

void ActivationPatternRecorder::reset() { kink_state.hash = 0xcbf29ce484222325ULL; }

std::uint64_t ActivationPatternRecorder::fingerprint() const { return kink_state.hash; }

void record_kink_pattern(std::span<const double> values) {
  if (!kink_state.enabled) return;
  std::uint64_t word = 0;
  int filled = 0;
  for (double v : values) {
    word = (word << 1) | (v > 0.0 ? 1u : 0u);
    if (++filled == 64) {
      mix(word);
      word = 0;
      filled = 0;
    }
  }
  mix(word ^ (static_cast<std::uint64_t>(filled) << 58));
}

void record_kink_flag(bool active) {
  if (!kink_state.enabled) return;
  mix(active ? 0x5bd1e995ULL : 0x1b873593ULL);
}

Tape forward(const LayerStack& stack, const ParamStore& store, const Vector& input) {
  if (stack.layers.empty()) throw ValidationError("forward: empty layer stack");
  if (input.size() != stack.in_dim()) {
    throw ValidationError("forward: input dimension " + std::to_string(input.size()) + " != expected " +
                          std::to_string(stack.in_dim()));
  }
  Tape tape;
  tape.stack = &stack;
  tape.version = store.version();
  tape.inputs.reserve(stack.layers.size());
  tape.pre_activation.reserve(stack.layers.size());
  Vector x = input;
  for (const auto& layer : stack.layers) {
    const Matrix& w = store[layer.weight].value;
    const Matrix& b = store[layer.bias].value;
    Vector z = w * x + b.col(0);
    tape.inputs.push_back(std::move(x));
    if (layer.activation == Activation::kRelu) {
      record_kink_pattern(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
      x = z.cwiseMax(0.0);
    } else {
      x = z;
    }
    tape.pre_activation.push_back(std::move(z));
  }
  tape.output = std::move(x);
  return tape;
}

Vector backward(const Tape& tape, const Vector& output_grad, ParamStore& store) {
  if (tape.stack == nullptr || tape.inputs.size() != tape.stack->layers.size()) {
    throw ValidationError("backward: tape does not belong to a completed forward pass");
  }
  if (tape.version != store.version()) {
    throw ValidationError("backward: stale tape (parameters changed since forward)");
  }
  if (output_grad.size() != tape.output.size()) throw ValidationError("backward: output gradient size mismatch");
  Vector grad = output_grad;
  for (std::size_t li = tape.stack->layers.size(); li-- > 0;) {
    const auto& layer = tape.stack->layers[li];
    if (layer.activation == Activation::kRelu) {
      grad = (tape.pre_activation[li].array() > 0.0).select(grad, 0.0);
    }
    auto& w = store[layer.weight];
    auto& b = store[layer.bias];
    w.grad.noalias() += grad * tape.inputs[li].transpose();
    b.grad.col(0) += grad;
    grad = w.value.transpose() * grad;
  }
  return grad;
}

void SgdConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ValidationError("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ValidationError("weight decay must be nonnegative");
  if (epochs < 0) throw ValidationError("epochs must be nonnegative");
}

void sgd_step(ParamStore& store, const SgdConfig& config) {
  config.validate();
  for (const auto& p : store.params()) {
    if (!p.grad.allFinite()) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
  }
  for (auto& p : store.params()) {
    if (!p.trainable) {
      p.grad.setZero();
      continue;
    }
    if (p.decay) p.grad += config.weight_decay * p.value;
    p.velocity = config.momentum * p.velocity + p.grad;
    p.value -= config.learning_rate * p.velocity;
    p.grad.setZero();
  }
  store.touch();
}

GradientCheckReport gradient_check(ParamStore& store, const LossFunction& loss, const GradientCheckOptions& options) {
  GradientCheckReport report;
  ActivationPatternRecorder recorder;

  store.zero_grad();
  recorder.reset();
  loss(store, true);
  const std::uint64_t base_pattern = recorder.fingerprint();
  std::vector<Matrix> analytic;
  analytic.reserve(store.size());
  for (const auto& p : store.params()) analytic.push_back(p.grad);
  store.zero_grad();

  Rng rng(options.seed);
  for (ParamId id = 0; id < store.size(); ++id) {
    auto& p = store[id];
    const auto n = static_cast<std::size_t>(p.value.size());
    std::vector<std::size_t> entries(n);
    std::iota(entries.begin(), entries.end(), 0);
    if (options.max_entries_per_tensor > 0 && n > options.max_entries_per_tensor) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_tensor);
      std::sort(entries.begin(), entries.end());
    }
    for (auto e : entries) {
      double& v = p.value.data()[e];
      const double saved = v;
      v = saved + options.step;
      store.touch();
      recorder.reset();
      const double up = loss(store, false);
      const std::uint64_t up_pattern = recorder.fingerprint();
      v = saved - options.step;
      store.touch();
      recorder.reset();
      const double down = loss(store, false);
      const std::uint64_t down_pattern = recorder.fingerprint();
      v = saved;
      store.touch();
      if (up_pattern != base_pattern || down_pattern != base_pattern) {
        ++report.skipped_at_kink;
        continue;
      }
      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[id].data()[e];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_relative_error || report.worst_parameter.empty()) {
        report.max_relative_error = rel;
        report.worst_parameter = p.name;
        report.worst_index = e;
      }
    }
  }
  store.zero_grad();
  return report;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw ValidationError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                            std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ParamStore& store) {
  std::string out = "PCN1";
  for (const auto& p : store.params()) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_u32(out, 2);
    put_u32(out, static_cast<std::uint32_t>(p.value.rows()));
    put_u32(out, static_cast<std::uint32_t>(p.value.cols()));
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) {
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) put_f64(out, p.value(i, j));
    }
  }
  return out;
}

void deserialize_checkpoint(std::string_view bytes, ParamStore& store) {
  Reader in(bytes);
  if (in.take(4, "magic") != "PCN1") throw ValidationError("checkpoint: bad magic (expected PCN1)");
  std::vector<bool> seen(store.size(), false);
  std::vector<Matrix> loaded(store.size());
  while (!in.done()) {
    const auto name_len = in.u32("name length");
    const std::string name(in.take(name_len, "name"));
    const auto rank = in.u32("rank");
    if (rank < 1 || rank > 2) throw ValidationError("checkpoint: tensor '" + name + "' has unsupported rank");
    std::uint32_t rows = in.u32("dims");
    std::uint32_t cols = rank == 2 ? in.u32("dims") : 1;
    if (!store.contains(name)) throw ValidationError("checkpoint: unexpected tensor '" + name + "'");
    const ParamId id = store.find(name);
    const auto& target = store[id].value;
    if (rows != target.rows() || cols != target.cols()) {
      throw ValidationError("checkpoint: tensor '" + name + "' has shape " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", expected " + std::to_string(target.rows()) + "x" +
                            std::to_string(target.cols()));
    }
    Matrix m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i) {
      for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = in.f64("payload");
    }
    loaded[id] = std::move(m);
    seen[id] = true;
  }
  for (ParamId id = 0; id < store.size(); ++id) {
    if (!seen[id]) throw ValidationError("checkpoint: missing tensor '" + store[id].name + "'");
  }
  for (ParamId id = 0; id < store.size(); ++id) {
    store[id].value = std::move(loaded[id]);
    store[id].grad.setZero();
    store[id].velocity.setZero();
  }
  store.touch();
}

void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(store));
}

void load_checkpoint(const std::filesystem::path& path, ParamStore& store) {
  deserialize_checkpoint(read_file(path), store);
}

}  // namespace protofuse::nn
