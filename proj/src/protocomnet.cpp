#include "protofuse/protocomnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace protofuse {

void Architecture::validate() const {
  if (embed_dim < 1 || semantic_dim < 1 || latent_dim < 1 || aggregator_hidden < 1 || decoder_hidden < 1) {
    throw ValidationError("architecture dimensions must all be positive");
  }
}

ProtoComNet::ProtoComNet(const Architecture& arch, std::uint64_t seed, double initial_scale) : arch_(arch) {
  arch_.validate();
  if (!(initial_scale > 0.0)) throw ValidationError("initial scale must be positive");
  Rng rng(seed);
  using nn::Activation;
  encoder_.layers.push_back(nn::make_dense(store_, "encoder.0", arch.embed_dim, arch.latent_dim, Activation::kRelu, rng));
  aggregator_.layers.push_back(nn::make_dense(store_, "aggregator.0", arch.embed_dim + 2 * arch.semantic_dim,
                                              arch.aggregator_hidden, Activation::kRelu, rng));
  aggregator_.layers.push_back(
      nn::make_dense(store_, "aggregator.1", arch.aggregator_hidden, 1, Activation::kIdentity, rng));
  decoder_.layers.push_back(
      nn::make_dense(store_, "decoder.0", arch.latent_dim, arch.decoder_hidden, Activation::kRelu, rng));
  decoder_.layers.push_back(
      nn::make_dense(store_, "decoder.1", arch.decoder_hidden, arch.embed_dim, Activation::kIdentity, rng));
  log_scale_ = store_.add("log_scale", Matrix::Constant(1, 1, std::log(initial_scale)));
  store_[log_scale_].decay = false;
}

double ProtoComNet::scale() const { return std::exp(store_[log_scale_].value(0, 0)); }

Vector sample_attribute_feature(const AttributeStats& stats, int attribute, Mode mode, Rng& rng) {
  if (attribute < 0 || attribute >= stats.num_attributes()) {
    throw ValidationError("unknown attribute index " + std::to_string(attribute));
  }
  Vector mean = stats.mean.row(attribute).transpose();
  if (mode == Mode::kTest) return mean;
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector eps(mean.size());
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = normal(rng);
  return mean + stats.stddev.row(attribute).transpose().cwiseProduct(eps);
}

AttributeDraws draw_attribute_features(const AttributeStats& stats, std::span<const int> attributes, Mode mode,
                                       Rng& rng) {
  AttributeDraws draws;
  draws.attributes.assign(attributes.begin(), attributes.end());
  draws.features.reserve(attributes.size());
  for (int a : attributes) draws.features.push_back(sample_attribute_feature(stats, a, mode, rng));
  return draws;
}

Vector encode(const ProtoComNet& net, const Vector& input) {
  return nn::forward(net.encoder(), net.params(), input).output;
}

namespace {

Vector attention_input(const PrimitiveKnowledge& knowledge, int class_id, int attribute, const Vector& prototype) {
  const auto d = prototype.size();
  const auto s = knowledge.semantic_dim();
  Vector x(d + 2 * s);
  x.head(d) = prototype;
  x.segment(d, s) = knowledge.class_semantics.row(class_id).transpose();
  x.tail(s) = knowledge.attribute_semantics.row(attribute).transpose();
  return x;
}

void check_class(const ProtoComNet& net, const PrimitiveKnowledge& knowledge, int class_id, const Vector& prototype) {
  if (!knowledge.has_class(class_id)) {
    throw ValidationError("no semantic vector for class " + std::to_string(class_id));
  }
  if (prototype.size() != net.architecture().embed_dim) {
    throw ValidationError("prototype dimension " + std::to_string(prototype.size()) + " != " +
                          std::to_string(net.architecture().embed_dim));
  }
  if (knowledge.semantic_dim() != net.architecture().semantic_dim) {
    throw ValidationError("knowledge semantic dimension " + std::to_string(knowledge.semantic_dim()) +
                          " != network semantic dimension " + std::to_string(net.architecture().semantic_dim));
  }
}

}  // namespace

Aggregation aggregate(const ProtoComNet& net, const PrimitiveKnowledge& knowledge, int class_id,
                      const Vector& prototype, std::span<const Vector> attribute_latents, const Vector& class_latent) {
  check_class(net, knowledge, class_id, prototype);
  if (attribute_latents.size() != static_cast<std::size_t>(knowledge.num_attributes())) {
    throw ValidationError("aggregate: expected one latent slot per attribute");
  }
  Aggregation out;
  out.attention = Vector::Zero(knowledge.num_attributes());
  out.aggregated = class_latent;
  for (int a : knowledge.attributes_of(class_id)) {
    const auto tape = nn::forward(net.aggregator(), net.params(), attention_input(knowledge, class_id, a, prototype));
    out.attention[a] = tape.output[0];
    out.aggregated += out.attention[a] * attribute_latents[a];
  }
  return out;
}

CompletionTrace complete_forward(const ProtoComNet& net, const PrimitiveKnowledge& knowledge, int class_id,
                                 const Vector& prototype, const AttributeDraws& draws) {
  check_class(net, knowledge, class_id, prototype);
  CompletionTrace trace;
  trace.class_id = class_id;
  trace.attributes = knowledge.attributes_of(class_id);
  const auto n = trace.attributes.size();
  trace.prototype_encoding = nn::forward(net.encoder(), net.params(), prototype);
  trace.aggregated = trace.prototype_encoding.output;
  trace.alpha = Vector::Zero(static_cast<Eigen::Index>(n));
  trace.attribute_encodings.reserve(n);
  trace.attention.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int a = trace.attributes[i];
    auto it = std::find(draws.attributes.begin(), draws.attributes.end(), a);
    if (it == draws.attributes.end()) {
      throw ValidationError("no attribute feature drawn for attribute " + std::to_string(a));
    }
    const auto& feature = draws.features[static_cast<std::size_t>(it - draws.attributes.begin())];
    trace.attribute_encodings.push_back(nn::forward(net.encoder(), net.params(), feature));
    trace.attention.push_back(
        nn::forward(net.aggregator(), net.params(), attention_input(knowledge, class_id, a, prototype)));
    trace.alpha[static_cast<Eigen::Index>(i)] = trace.attention.back().output[0];
    trace.aggregated += trace.alpha[static_cast<Eigen::Index>(i)] * trace.attribute_encodings.back().output;
  }
  trace.decoding = nn::forward(net.decoder(), net.params(), trace.aggregated);
  return trace;
}

void complete_backward(ProtoComNet& net, const CompletionTrace& trace, const Vector& output_grad) {
  auto& store = net.params();
  const Vector grad_g = nn::backward(trace.decoding, output_grad, store);
  nn::backward(trace.prototype_encoding, grad_g, store);
  for (std::size_t i = 0; i < trace.attributes.size(); ++i) {
    const auto& enc = trace.attribute_encodings[i];
    const double alpha = trace.alpha[static_cast<Eigen::Index>(i)];
    Vector grad_alpha(1);
    grad_alpha[0] = grad_g.dot(enc.output);
    nn::backward(trace.attention[i], grad_alpha, store);
    nn::backward(enc, alpha * grad_g, store);
  }
}

Vector complete_prototype(const ProtoComNet& net, const PrimitiveKnowledge& knowledge, const AttributeStats& stats,
                          int class_id, const Vector& prototype, Mode mode, Rng& rng) {
  check_class(net, knowledge, class_id, prototype);
  const auto attrs = knowledge.attributes_of(class_id);
  const auto draws = draw_attribute_features(stats, attrs, mode, rng);
  return complete_forward(net, knowledge, class_id, prototype, draws).output();
}

std::vector<CompletionTask> sample_completion_tasks(const FewShotDataset& base, const ClassPrototypeTable& prototypes,
                                                    int k_shot, std::size_t count, Rng& rng) {
  if (k_shot < 1) throw ValidationError("K must be at least 1");
  if (prototypes.class_ids.empty()) throw ValidationError("no base classes to sample completion tasks from");
  const auto groups = base.indices_by_class();
  for (int k : prototypes.class_ids) {
    auto it = groups.find(k);
    const std::size_t have = it == groups.end() ? 0 : it->second.size();
    if (have < static_cast<std::size_t>(k_shot)) {
      throw ValidationError("K=" + std::to_string(k_shot) + " exceeds the " + std::to_string(have) +
                            " samples of class " + std::to_string(k));
    }
  }
  std::uniform_int_distribution<std::size_t> pick_class(0, prototypes.class_ids.size() - 1);
  std::vector<CompletionTask> tasks;
  tasks.reserve(count);
  for (std::size_t t = 0; t < count; ++t) {
    CompletionTask task;
    task.class_id = prototypes.class_ids[pick_class(rng)];
    std::vector<std::size_t> pool = groups.at(task.class_id);
    for (int j = 0; j < k_shot; ++j) {
      std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(j), pool.size() - 1);
      std::swap(pool[static_cast<std::size_t>(j)], pool[pick(rng)]);
    }
    task.support.assign(pool.begin(), pool.begin() + k_shot);
    task.incomplete = Vector::Zero(base.dim());
    for (auto i : task.support) task.incomplete += base.row(i);
    task.incomplete /= static_cast<double>(k_shot);
    task.target = prototypes.prototype(task.class_id);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

double completion_loss(ProtoComNet& net, const PrimitiveKnowledge& knowledge, const CompletionTask& task,
                       const AttributeDraws& draws, bool accumulate, double grad_scale) {
  const auto trace = complete_forward(net, knowledge, task.class_id, task.incomplete, draws);
  const Vector diff = trace.output() - task.target;
  const double d = static_cast<double>(diff.size());
  const double loss = diff.squaredNorm() / d;
  if (accumulate) complete_backward(net, trace, (2.0 * grad_scale / d) * diff);
  return loss;
}

TrainHistory train_completion(ProtoComNet& net, const PrimitiveKnowledge& knowledge, const AttributeStats& stats,
                              const TaskSource& source, const CompletionTrainConfig& config) {
  config.sgd.validate();
  if (config.batch_size < 1) throw ValidationError("batch size must be at least 1");
  auto& store = net.params();
  auto& scale = store[net.log_scale_id()];
  const bool scale_trainable = scale.trainable;
  scale.trainable = false;

  Rng rng(config.seed);
  TrainHistory history;
  store.zero_grad();
  for (int epoch = 0; epoch < config.sgd.epochs; ++epoch) {
    const auto tasks = source(epoch, rng);
    if (tasks.empty()) {
      scale.trainable = scale_trainable;
      throw ValidationError("completion training needs at least one task");
    }
    double total = 0.0;
    for (std::size_t start = 0; start < tasks.size(); start += config.batch_size) {
      const std::size_t end = std::min(tasks.size(), start + config.batch_size);
      const double weight = 1.0 / static_cast<double>(end - start);
      for (std::size_t t = start; t < end; ++t) {
        const auto& task = tasks[t];
        const auto draws = draw_attribute_features(stats, knowledge.attributes_of(task.class_id), Mode::kTrain, rng);
        const double loss = completion_loss(net, knowledge, task, draws, true, weight);
        if (!std::isfinite(loss)) {
          scale.trainable = scale_trainable;
          throw NumericError("non-finite completion loss at epoch " + std::to_string(epoch) + ", task " +
                             std::to_string(t) + " (class " + std::to_string(task.class_id) + ")");
        }
        total += loss;
      }
      nn::sgd_step(store, config.sgd);
    }
    history.epoch_loss.push_back(total / static_cast<double>(tasks.size()));
  }
  scale.trainable = scale_trainable;
  return history;
}

TrainHistory train_completion(ProtoComNet& net, const PrimitiveKnowledge& knowledge, const AttributeStats& stats,
                              std::span<const CompletionTask> tasks, const CompletionTrainConfig& config) {
  if (tasks.empty()) throw ValidationError("completion training needs at least one task");
  std::vector<CompletionTask> pool(tasks.begin(), tasks.end());
  auto source = [&pool](int, Rng& rng) {
    std::shuffle(pool.begin(), pool.end(), rng);
    return pool;
  };
  return train_completion(net, knowledge, stats, source, config);
}

TrainHistory train_completion(ProtoComNet& net, const PrimitiveKnowledge& knowledge, const AttributeStats& stats,
                              const FewShotDataset& base, const ClassPrototypeTable& prototypes,
                              const CompletionTrainConfig& config) {
  const std::size_t per_epoch =
      config.tasks_per_epoch > 0 ? config.tasks_per_epoch : 4 * prototypes.class_ids.size();
  auto source = [&](int, Rng& rng) { return sample_completion_tasks(base, prototypes, config.k_shot, per_epoch, rng); };
  return train_completion(net, knowledge, stats, source, config);
}

}  // namespace protofuse
