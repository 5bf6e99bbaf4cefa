#include "protofuse/episodes.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

namespace protofuse {

RowMatrix Episode::samples(const FewShotDataset& data) const {
  RowMatrix out(static_cast<Eigen::Index>(support.size() + query.size()), data.dim());
  Eigen::Index r = 0;
  for (auto i : support) out.row(r++) = data.embeddings.row(static_cast<Eigen::Index>(i));
  for (auto i : query) out.row(r++) = data.embeddings.row(static_cast<Eigen::Index>(i));
  return out;
}

std::vector<int> Episode::transductive_labels() const {
  std::vector<int> out(support_labels);
  out.resize(support.size() + query.size(), -1);
  return out;
}

int Episode::roster_index(int class_id) const {
  auto it = std::find(classes.begin(), classes.end(), class_id);
  if (it == classes.end()) throw ValidationError("class " + std::to_string(class_id) + " is not in the episode");
  return static_cast<int>(it - classes.begin());
}

Episode sample_episode(const FewShotDataset& data, int n_way, int k_shot, int queries_per_class, Rng& rng) {
  if (n_way < 1 || k_shot < 1 || queries_per_class < 0) {
    throw ValidationError("episode needs N >= 1, K >= 1, M_q >= 0");
  }
  const auto groups = data.indices_by_class();
  std::vector<int> eligible;
  const auto need = static_cast<std::size_t>(k_shot + queries_per_class);
  for (const auto& [class_id, indices] : groups) {
    if (indices.size() >= need) eligible.push_back(class_id);
  }
  if (eligible.size() < static_cast<std::size_t>(n_way)) {
    throw ValidationError("dataset has " + std::to_string(eligible.size()) + " classes with at least " +
                          std::to_string(need) + " samples; " + std::to_string(n_way) + " needed");
  }
  for (int j = 0; j < n_way; ++j) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(j), eligible.size() - 1);
    std::swap(eligible[static_cast<std::size_t>(j)], eligible[pick(rng)]);
  }
  Episode ep;
  ep.k_shot = k_shot;
  ep.queries_per_class = queries_per_class;
  ep.classes.assign(eligible.begin(), eligible.begin() + n_way);
  std::sort(ep.classes.begin(), ep.classes.end());
  for (int c = 0; c < n_way; ++c) {
    std::vector<std::size_t> pool = groups.at(ep.classes[c]);
    for (std::size_t j = 0; j < need; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
      std::swap(pool[j], pool[pick(rng)]);
    }
    for (std::size_t j = 0; j < need; ++j) {
      if (j < static_cast<std::size_t>(k_shot)) {
        ep.support.push_back(pool[j]);
        ep.support_labels.push_back(c);
      } else {
        ep.query.push_back(pool[j]);
        ep.query_labels.push_back(c);
      }
    }
  }
  return ep;
}

Vector mean_prototype(const FewShotDataset& data, const Episode& episode, int class_id) {
  const int c = episode.roster_index(class_id);
  Vector sum = Vector::Zero(data.dim());
  int count = 0;
  for (std::size_t j = 0; j < episode.support.size(); ++j) {
    if (episode.support_labels[j] == c) {
      sum += data.row(episode.support[j]);
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

Vector classify(const Vector& query, const RowMatrix& prototypes, double scale) {
  if (!(scale > 0.0)) throw ValidationError("classifier scale must be positive");
  Vector logits(prototypes.rows());
  for (Eigen::Index c = 0; c < prototypes.rows(); ++c) logits[c] = scale * cosine(query, prototypes.row(c).transpose());
  return softmax(logits);
}

std::string_view to_string(PrototypeMode mode) {
  switch (mode) {
    case PrototypeMode::kMeanOnly:
      return "mean-only";
    case PrototypeMode::kCompletedOnly:
      return "completed-only";
    case PrototypeMode::kMeanFusion:
      return "mean-fusion";
    case PrototypeMode::kGaussFusion:
      return "gauss-fusion";
  }
  return "gauss-fusion";
}

PrototypeMode prototype_mode_from_string(std::string_view text) {
  for (auto m : {PrototypeMode::kMeanOnly, PrototypeMode::kCompletedOnly, PrototypeMode::kMeanFusion,
                 PrototypeMode::kGaussFusion}) {
    if (text == to_string(m)) return m;
  }
  throw ValidationError("unknown prototype mode '" + std::string(text) + "'");
}

EpisodePrototypes build_prototypes(const ProtoComNet& net, const PrimitiveKnowledge& knowledge,
                                   const AttributeStats& stats, const FewShotDataset& data, const Episode& episode,
                                   PrototypeMode mode, const FusionConfig& fusion) {
  const auto n = static_cast<Eigen::Index>(episode.classes.size());
  EpisodePrototypes out;
  out.mean.resize(n, data.dim());
  for (Eigen::Index c = 0; c < n; ++c) out.mean.row(c) = mean_prototype(data, episode, episode.classes[c]).transpose();
  if (mode == PrototypeMode::kMeanOnly) return out;

  Rng unused(0);
  out.completed.resize(n, data.dim());
  for (Eigen::Index c = 0; c < n; ++c) {
    out.completed.row(c) =
        complete_prototype(net, knowledge, stats, episode.classes[c], out.mean.row(c).transpose(), Mode::kTest, unused)
            .transpose();
  }
  if (mode == PrototypeMode::kMeanFusion) {
    out.fused = 0.5 * (out.mean + out.completed);
  } else if (mode == PrototypeMode::kGaussFusion) {
    out.fused = fuse_prototypes(episode.samples(data), episode.transductive_labels(), out.mean, out.completed, fusion)
                    .fused;
  }
  return out;
}

const RowMatrix& select_prototypes(const EpisodePrototypes& protos, PrototypeMode mode) {
  switch (mode) {
    case PrototypeMode::kMeanOnly:
      return protos.mean;
    case PrototypeMode::kCompletedOnly:
      return protos.completed;
    default:
      return protos.fused;
  }
}

double episode_accuracy(const FewShotDataset& data, const Episode& episode, const RowMatrix& prototypes) {
  if (episode.query.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t q = 0; q < episode.query.size(); ++q) {
    const Vector x = data.row(episode.query[q]);
    Vector sims(prototypes.rows());
    for (Eigen::Index c = 0; c < prototypes.rows(); ++c) sims[c] = cosine(x, prototypes.row(c).transpose());
    if (argmax(sims) == episode.query_labels[q]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(episode.query.size());
}

double confidence_half_width(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return 1.96 * std::sqrt(sq / n) / std::sqrt(n);
}

std::string EvalReport::to_json() const {
  nlohmann::json doc;
  doc["mode"] = std::string(to_string(mode));
  doc["n_way"] = n_way;
  doc["k_shot"] = k_shot;
  doc["episodes"] = episodes;
  doc["mean_acc"] = mean_accuracy;
  doc["ci95"] = ci95;
  doc["seed"] = seed;
  doc["per_episode"] = per_episode;
  return doc.dump(1) + "\n";
}

unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("PROTOFUSE_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Episode episode_for_index(const FewShotDataset& data, const EvalConfig& config, std::size_t index) {
  Rng rng(split_seed(config.seed, index));
  return sample_episode(data, config.n_way, config.k_shot, config.queries_per_class, rng);
}

namespace {

/// Runs `body(i)` for i in [0, count) on up to `threads` workers. The first
/// exception is rethrown on the caller.
template <typename Body>
void parallel_for(std::size_t count, unsigned threads, Body body) {
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  workers.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = count;
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

EvalReport evaluate(const ProtoComNet& net, const FewShotDataset& data, const PrimitiveKnowledge& knowledge,
                    const AttributeStats& stats, const EvalConfig& config) {
  data.validate();
  EvalReport report;
  report.mode = config.mode;
  report.n_way = config.n_way;
  report.k_shot = config.k_shot;
  report.episodes = config.episodes;
  report.seed = config.seed;
  report.per_episode.assign(config.episodes, 0.0);
  parallel_for(config.episodes, resolve_threads(config.threads), [&](std::size_t i) {
    const auto ep = episode_for_index(data, config, i);
    const auto protos = build_prototypes(net, knowledge, stats, data, ep, config.mode, config.fusion);
    report.per_episode[i] = episode_accuracy(data, ep, select_prototypes(protos, config.mode));
  });
  double sum = 0.0;
  for (double a : report.per_episode) sum += a;
  report.mean_accuracy = config.episodes ? sum / static_cast<double>(config.episodes) : 0.0;
  report.ci95 = confidence_half_width(report.per_episode);
  return report;
}

double meta_episode_loss(ProtoComNet& net, const PrimitiveKnowledge& knowledge, const FewShotDataset& data,
                         const Episode& episode, const std::vector<AttributeDraws>& draws,
                         const FusionConfig& fusion, bool accumulate, double grad_scale) {
  const auto n = static_cast<Eigen::Index>(episode.classes.size());
  if (draws.size() != episode.classes.size()) throw ValidationError("meta loss: one draw set per class required");
  if (episode.query.empty()) throw ValidationError("meta loss: episode has no queries");
  const RowMatrix samples = episode.samples(data);
  const auto labels = episode.transductive_labels();

  RowMatrix mean(n, data.dim());
  RowMatrix completed(n, data.dim());
  std::vector<CompletionTrace> traces;
  traces.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index c = 0; c < n; ++c) {
    mean.row(c) = mean_prototype(data, episode, episode.classes[c]).transpose();
    traces.push_back(complete_forward(net, knowledge, episode.classes[c], mean.row(c).transpose(), draws[c]));
    completed.row(c) = traces.back().output().transpose();
  }
  const auto fused = fuse_prototypes(samples, labels, mean, completed, fusion);

  const double scale = net.scale();
  const auto nq = static_cast<Eigen::Index>(episode.query.size());
  const auto offset = static_cast<Eigen::Index>(episode.support.size());
  RowMatrix cosines(nq, n);
  double loss = 0.0;
  RowMatrix grad_logits(nq, n);
  for (Eigen::Index q = 0; q < nq; ++q) {
    const Vector x = samples.row(offset + q).transpose();
    for (Eigen::Index c = 0; c < n; ++c) cosines(q, c) = cosine(x, fused.fused.row(c).transpose());
    const Vector logits = scale * cosines.row(q).transpose();
    const Vector prob = softmax(logits);
    const int y = episode.query_labels[q];
    const double top = logits.maxCoeff();
    loss -= logits[y] - (top + std::log((logits.array() - top).exp().sum()));
    grad_logits.row(q) = prob.transpose();
    grad_logits(q, y) -= 1.0;
  }
  loss /= static_cast<double>(nq);
  if (!accumulate) return loss;

  grad_logits *= grad_scale / static_cast<double>(nq);
  auto& store = net.params();
  store[net.log_scale_id()].grad(0, 0) += scale * (grad_logits.array() * cosines.array()).sum();

  RowMatrix grad_fused = RowMatrix::Zero(n, data.dim());
  for (Eigen::Index q = 0; q < nq; ++q) {
    const Vector x = samples.row(offset + q).transpose();
    for (Eigen::Index c = 0; c < n; ++c) {
      grad_fused.row(c) += (scale * grad_logits(q, c)) * cosine_grad_b(x, fused.fused.row(c).transpose()).transpose();
    }
  }
  const RowMatrix grad_completed = fuse_backward(fused, samples, labels, completed, grad_fused, fusion);
  for (Eigen::Index c = 0; c < n; ++c) {
    complete_backward(net, traces[static_cast<std::size_t>(c)], grad_completed.row(c).transpose());
  }
  return loss;
}

TrainHistory meta_train(ProtoComNet& net, const FewShotDataset& base, const PrimitiveKnowledge& knowledge,
                        const AttributeStats& stats, const MetaTrainConfig& config) {
  config.sgd.validate();
  if (config.episodes_per_epoch < 1) throw ValidationError("meta-training needs at least one episode per epoch");
  Rng rng(config.seed);
  TrainHistory history;
  auto& store = net.params();
  store.zero_grad();
  for (int epoch = 0; epoch < config.sgd.epochs; ++epoch) {
    double total = 0.0;
    for (std::size_t e = 0; e < config.episodes_per_epoch; ++e) {
      const auto ep = sample_episode(base, config.n_way, config.k_shot, config.queries_per_class, rng);
      std::vector<AttributeDraws> draws;
      for (int k : ep.classes) {
        draws.push_back(draw_attribute_features(stats, knowledge.attributes_of(k), Mode::kTrain, rng));
      }
      const double loss = meta_episode_loss(net, knowledge, base, ep, draws, config.fusion, true);
      if (!std::isfinite(loss)) {
        throw NumericError("non-finite meta-training loss at epoch " + std::to_string(epoch) + ", episode " +
                           std::to_string(e));
      }
      total += loss;
      nn::sgd_step(store, config.sgd);
    }
    history.epoch_loss.push_back(total / static_cast<double>(config.episodes_per_epoch));
  }
  return history;
}

SimilarityReport prototype_similarity_report(const ProtoComNet& net, const FewShotDataset& data,
                                             const PrimitiveKnowledge& knowledge, const AttributeStats& stats,
                                             const std::map<int, Vector>& centers, const EvalConfig& config) {
  std::vector<Eigen::Vector3d> per_episode(config.episodes, Eigen::Vector3d::Zero());
  parallel_for(config.episodes, resolve_threads(config.threads), [&](std::size_t i) {
    const auto ep = episode_for_index(data, config, i);
    const auto protos = build_prototypes(net, knowledge, stats, data, ep, PrototypeMode::kGaussFusion, config.fusion);
    Eigen::Vector3d acc = Eigen::Vector3d::Zero();
    for (std::size_t c = 0; c < ep.classes.size(); ++c) {
      auto it = centers.find(ep.classes[c]);
      if (it == centers.end()) throw ValidationError("no center for class " + std::to_string(ep.classes[c]));
      const auto r = static_cast<Eigen::Index>(c);
      acc[0] += cosine(protos.mean.row(r).transpose(), it->second);
      acc[1] += cosine(protos.completed.row(r).transpose(), it->second);
      acc[2] += cosine(protos.fused.row(r).transpose(), it->second);
    }
    per_episode[i] = acc / static_cast<double>(ep.classes.size());
  });
  Eigen::Vector3d total = Eigen::Vector3d::Zero();
  for (const auto& v : per_episode) total += v;
  SimilarityReport report;
  report.episodes = config.episodes;
  if (config.episodes > 0) total /= static_cast<double>(config.episodes);
  report.mean_based = total[0];
  report.completed = total[1];
  report.fused = total[2];
  return report;
}

std::vector<double> moving_average(const std::vector<double>& values, std::size_t window) {
  if (window < 1) throw ValidationError("moving average window must be at least 1");
  std::vector<double> out(values.size());
  double running = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    running += values[i];
    if (i >= window) running -= values[i - window];
    out[i] = running / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

RankCurve rank_curve_report(const ProtoComNet& net, const FewShotDataset& data, const PrimitiveKnowledge& knowledge,
                            const AttributeStats& stats, const std::map<int, Vector>& centers, std::size_t window) {
  RankCurve curve;
  curve.window = window;
  std::vector<std::vector<double>> raw_curves;
  std::vector<std::vector<double>> completed_curves;
  Rng unused(0);
  for (const auto& [class_id, indices] : data.indices_by_class()) {
    auto it = centers.find(class_id);
    if (it == centers.end()) throw ValidationError("no center for class " + std::to_string(class_id));
    const Vector& center = it->second;
    std::vector<std::pair<double, std::size_t>> ranked;
    for (auto i : indices) ranked.emplace_back(cosine(data.row(i), center), i);
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<double> raw;
    std::vector<double> completed;
    for (const auto& [sim, i] : ranked) {
      raw.push_back(sim);
      const Vector p = complete_prototype(net, knowledge, stats, class_id, data.row(i), Mode::kTest, unused);
      completed.push_back(cosine(p, center));
    }
    std::size_t w = window;
    if (ranked.size() < window) {
      w = std::max<std::size_t>(1, ranked.size());
      ++curve.shortened_windows;
    }
    raw_curves.push_back(moving_average(raw, w));
    completed_curves.push_back(moving_average(completed, w));
  }
  if (raw_curves.empty()) return curve;
  std::size_t len = raw_curves.front().size();
  for (const auto& c : raw_curves) len = std::min(len, c.size());
  curve.raw.assign(len, 0.0);
  curve.completed.assign(len, 0.0);
  for (std::size_t k = 0; k < raw_curves.size(); ++k) {
    for (std::size_t r = 0; r < len; ++r) {
      curve.raw[r] += raw_curves[k][r];
      curve.completed[r] += completed_curves[k][r];
    }
  }
  for (std::size_t r = 0; r < len; ++r) {
    curve.raw[r] /= static_cast<double>(raw_curves.size());
    curve.completed[r] /= static_cast<double>(raw_curves.size());
  }
  return curve;
}

std::map<int, Vector> class_means(const FewShotDataset& data) {
  std::map<int, Vector> out;
  for (const auto& [class_id, indices] : data.indices_by_class()) {
    Vector sum = Vector::Zero(data.dim());
    for (auto i : indices) sum += data.row(i);
    out.emplace(class_id, sum / static_cast<double>(indices.size()));
  }
  return out;
}

}  // namespace protofuse
