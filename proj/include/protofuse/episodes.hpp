#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "protofuse/common.hpp"
#include "protofuse/fusion.hpp"
#include "protofuse/knowledge.hpp"
#include "protofuse/protocomnet.hpp"

namespace protofuse {

/// One N-way K-shot task. Roster entries are class ids in ascending order;
/// labels inside the episode are roster indices.
struct Episode {
  std::vector<int> classes;
  std::vector<std::size_t> support;
  std::vector<int> support_labels;
  std::vector<std::size_t> query;
  std::vector<int> query_labels;
  int k_shot = 0;
  int queries_per_class = 0;

  /// Support rows followed by query rows.
  [[nodiscard]] RowMatrix samples(const FewShotDataset& data) const;
  /// Roster index for support rows, -1 for query rows (hidden labels).
  [[nodiscard]] std::vector<int> transductive_labels() const;
  [[nodiscard]] int roster_index(int class_id) const;
};

Episode sample_episode(const FewShotDataset& data, int n_way, int k_shot, int queries_per_class, Rng& rng);

/// Mean of the K support embeddings of `class_id`.
Vector mean_prototype(const FewShotDataset& data, const Episode& episode, int class_id);

/// softmax_c(scale * cos(query, p_c)).
Vector classify(const Vector& query, const RowMatrix& prototypes, double scale);

enum class PrototypeMode { kMeanOnly, kCompletedOnly, kMeanFusion, kGaussFusion };

std::string_view to_string(PrototypeMode mode);
PrototypeMode prototype_mode_from_string(std::string_view text);

struct EpisodePrototypes {
  RowMatrix mean;
  RowMatrix completed;
  RowMatrix fused;
};

/// All prototype variants for one episode, completion in test mode.
EpisodePrototypes build_prototypes(const ProtoComNet& net, const PrimitiveKnowledge& knowledge,
                                   const AttributeStats& stats, const FewShotDataset& data, const Episode& episode,
                                   PrototypeMode mode, const FusionConfig& fusion = {});

const RowMatrix& select_prototypes(const EpisodePrototypes& protos, PrototypeMode mode);

/// Fraction of queries whose highest-cosine prototype is their class
/// (ties go to the lowest roster index).
double episode_accuracy(const FewShotDataset& data, const Episode& episode, const RowMatrix& prototypes);

struct EvalConfig {
  PrototypeMode mode = PrototypeMode::kGaussFusion;
  int n_way = 5;
  int k_shot = 1;
  int queries_per_class = 15;
  std::size_t episodes = 600;
  std::uint64_t seed = 0;
  // 0 uses PROTOFUSE_THREADS, else the hardware concurrency.
  unsigned threads = 0;
  FusionConfig fusion;
};

struct EvalReport {
  PrototypeMode mode = PrototypeMode::kGaussFusion;
  int n_way = 0;
  int k_shot = 0;
  std::size_t episodes = 0;
  std::uint64_t seed = 0;
  std::vector<double> per_episode;
  double mean_accuracy = 0.0;
  double ci95 = 0.0;

  [[nodiscard]] std::string to_json() const;
};

/// 1.96 * population std / sqrt(n).
double confidence_half_width(const std::vector<double>& values);

unsigned resolve_threads(unsigned requested);

/// Episode i is drawn from its own stream split_seed(seed, i), so results do
/// not depend on the thread count.
Episode episode_for_index(const FewShotDataset& data, const EvalConfig& config, std::size_t index);

EvalReport evaluate(const ProtoComNet& net, const FewShotDataset& data, const PrimitiveKnowledge& knowledge,
                    const AttributeStats& stats, const EvalConfig& config);

struct MetaTrainConfig {
  nn::SgdConfig sgd{1e-4, 0.9, 5e-4, 40};
  int n_way = 5;
  int k_shot = 1;
  int queries_per_class = 15;
  std::size_t episodes_per_epoch = 100;
  std::uint64_t seed = 0;
  FusionConfig fusion;
};

/// Query cross-entropy of the full pipeline (mean prototype, completion with
/// the given attribute draws, transductive fusion, scaled cosine softmax).
/// `draws[c]` holds the attribute features for roster class c.
double meta_episode_loss(ProtoComNet& net, const PrimitiveKnowledge& knowledge, const FewShotDataset& data,
                         const Episode& episode, const std::vector<AttributeDraws>& draws,
                         const FusionConfig& fusion, bool accumulate, double grad_scale = 1.0);

/// Fine-tunes the completion network and the classifier scale on base episodes.
TrainHistory meta_train(ProtoComNet& net, const FewShotDataset& base, const PrimitiveKnowledge& knowledge,
                        const AttributeStats& stats, const MetaTrainConfig& config);

struct SimilarityReport {
  double mean_based = 0.0;
  double completed = 0.0;
  double fused = 0.0;
  std::size_t episodes = 0;
};

/// Average cosine between each prototype variant and the class center over
/// sampled episodes. `config.mode` is ignored; all three variants are scored.
SimilarityReport prototype_similarity_report(const ProtoComNet& net, const FewShotDataset& data,
                                             const PrimitiveKnowledge& knowledge, const AttributeStats& stats,
                                             const std::map<int, Vector>& centers, const EvalConfig& config);

struct RankCurve {
  std::size_t window = 50;
  std::vector<double> raw;
  std::vector<double> completed;
  std::size_t shortened_windows = 0;
};

/// Trailing moving average; the first entries average over what is available.
std::vector<double> moving_average(const std::vector<double>& values, std::size_t window);

/// For every class, samples are ranked by descending cosine to the center;
/// each sample is used as a 1-shot prototype and completed. Curves are
/// smoothed per class and averaged across classes (truncated to the smallest class).
RankCurve rank_curve_report(const ProtoComNet& net, const FewShotDataset& data, const PrimitiveKnowledge& knowledge,
                            const AttributeStats& stats, const std::map<int, Vector>& centers,
                            std::size_t window = 50);

/// Full-class means, usable as centers when no generator ground truth exists.
std::map<int, Vector> class_means(const FewShotDataset& data);

}  // namespace protofuse
