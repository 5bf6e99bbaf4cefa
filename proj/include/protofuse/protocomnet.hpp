#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "protofuse/common.hpp"
#include "protofuse/knowledge.hpp"
#include "protofuse/nn.hpp"

namespace protofuse {

enum class Mode { kTrain, kTest };

struct Architecture {
  int embed_dim = 0;
  int semantic_dim = 300;
  int latent_dim = 256;
  int aggregator_hidden = 300;
  int decoder_hidden = 512;

  void validate() const;
};

/// Encoder-aggregator-decoder completion network plus the classifier scale.
///
///   encoder     d -> latent, relu (shared by attribute features and prototypes)
///   aggregator  (d + 2s) -> hidden -> 1, relu hidden, raw scalar output
///   decoder     latent -> hidden -> d, relu hidden
///   log_scale   log of the cosine-softmax scale
class ProtoComNet {
 public:
  ProtoComNet(const Architecture& arch, std::uint64_t seed, double initial_scale = 10.0);

  [[nodiscard]] const Architecture& architecture() const { return arch_; }
  [[nodiscard]] nn::ParamStore& params() { return store_; }
  [[nodiscard]] const nn::ParamStore& params() const { return store_; }
  [[nodiscard]] const nn::LayerStack& encoder() const { return encoder_; }
  [[nodiscard]] const nn::LayerStack& aggregator() const { return aggregator_; }
  [[nodiscard]] const nn::LayerStack& decoder() const { return decoder_; }
  [[nodiscard]] nn::ParamId log_scale_id() const { return log_scale_; }
  [[nodiscard]] double scale() const;

 private:
  Architecture arch_;
  nn::ParamStore store_;
  nn::LayerStack encoder_;
  nn::LayerStack aggregator_;
  nn::LayerStack decoder_;
  nn::ParamId log_scale_ = 0;
};

/// z_a = mean + stddev * eps in train mode, exactly the mean in test mode.
Vector sample_attribute_feature(const AttributeStats& stats, int attribute, Mode mode, Rng& rng);

/// Attribute features drawn once for one completion (one entry per associated attribute).
struct AttributeDraws {
  std::vector<int> attributes;
  std::vector<Vector> features;
};

AttributeDraws draw_attribute_features(const AttributeStats& stats, std::span<const int> attributes, Mode mode,
                                       Rng& rng);

Vector encode(const ProtoComNet& net, const Vector& input);

struct Aggregation {
  Vector aggregated;
  Vector attention;  // one weight per attribute, exactly zero where R[k, a] = 0
};

/// alpha_a = R[k, a] * aggregator(p || h_k || h_a); g = sum_a alpha_a z'_a + z'_k.
/// `attribute_latents` is indexed by attribute; entries of unassociated
/// attributes are never read.
Aggregation aggregate(const ProtoComNet& net, const PrimitiveKnowledge& knowledge, int class_id,
                      const Vector& prototype, std::span<const Vector> attribute_latents, const Vector& class_latent);

/// Everything a completion forward pass needs for backpropagation.
struct CompletionTrace {
  int class_id = 0;
  std::vector<int> attributes;
  std::vector<nn::Tape> attribute_encodings;
  nn::Tape prototype_encoding;
  std::vector<nn::Tape> attention;
  Vector alpha;
  Vector aggregated;
  nn::Tape decoding;

  [[nodiscard]] const Vector& output() const { return decoding.output; }
};

CompletionTrace complete_forward(const ProtoComNet& net, const PrimitiveKnowledge& knowledge, int class_id,
                                 const Vector& prototype, const AttributeDraws& draws);

/// Accumulates parameter gradients for d(loss)/d(completed prototype).
void complete_backward(ProtoComNet& net, const CompletionTrace& trace, const Vector& output_grad);

Vector complete_prototype(const ProtoComNet& net, const PrimitiveKnowledge& knowledge, const AttributeStats& stats,
                          int class_id, const Vector& prototype, Mode mode, Rng& rng);

struct CompletionTask {
  int class_id = 0;
  std::vector<std::size_t> support;
  Vector incomplete;
  Vector target;
};

std::vector<CompletionTask> sample_completion_tasks(const FewShotDataset& base, const ClassPrototypeTable& prototypes,
                                                    int k_shot, std::size_t count, Rng& rng);

struct CompletionTrainConfig {
  nn::SgdConfig sgd{1e-2, 0.9, 5e-4, 100};
  int k_shot = 1;
  // 0 selects 4x the number of base classes.
  std::size_t tasks_per_epoch = 0;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
};

struct TrainHistory {
  std::vector<double> epoch_loss;
};

/// Mean-over-dimensions squared error of the completed prototype against the
/// task target. Adds gradients to the network when `accumulate` is set.
double completion_loss(ProtoComNet& net, const PrimitiveKnowledge& knowledge, const CompletionTask& task,
                       const AttributeDraws& draws, bool accumulate, double grad_scale = 1.0);

using TaskSource = std::function<std::vector<CompletionTask>(int epoch, Rng& rng)>;

TrainHistory train_completion(ProtoComNet& net, const PrimitiveKnowledge& knowledge, const AttributeStats& stats,
                              const TaskSource& source, const CompletionTrainConfig& config);

/// Trains on a fixed task list, visited in a fresh random order every epoch.
TrainHistory train_completion(ProtoComNet& net, const PrimitiveKnowledge& knowledge, const AttributeStats& stats,
                              std::span<const CompletionTask> tasks, const CompletionTrainConfig& config);

/// Resamples `tasks_per_epoch` K-shot tasks from the base data every epoch.
TrainHistory train_completion(ProtoComNet& net, const PrimitiveKnowledge& knowledge, const AttributeStats& stats,
                              const FewShotDataset& base, const ClassPrototypeTable& prototypes,
                              const CompletionTrainConfig& config);

}  // namespace protofuse
