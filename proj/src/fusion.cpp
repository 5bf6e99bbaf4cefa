#include "protofuse/fusion.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "protofuse/nn.hpp"

namespace protofuse {

DiagonalGaussian DiagonalGaussian::make(Vector mean, Vector variance, double floor) {
  if (mean.size() != variance.size()) throw ValidationError("gaussian: mean/variance dimension mismatch");
  if (!(floor > 0.0)) throw ValidationError("gaussian: variance floor must be positive");
  if (!mean.allFinite() || !variance.allFinite()) throw ValidationError("gaussian: non-finite parameters");
  DiagonalGaussian g;
  g.mean = std::move(mean);
  g.variance = variance.cwiseMax(floor);
  return g;
}

SoftAssignment soft_assign(const RowMatrix& samples, const RowMatrix& prototypes, const std::vector<int>& labels,
                           double lambda) {
  if (!(lambda > 0.0)) throw ValidationError("soft_assign: lambda must be positive");
  if (static_cast<std::size_t>(samples.rows()) != labels.size()) {
    throw ValidationError("soft_assign: one label slot per sample required");
  }
  if (prototypes.rows() < 1 || prototypes.cols() != samples.cols()) {
    throw ValidationError("soft_assign: prototype/sample dimension mismatch");
  }
  const auto classes = prototypes.rows();
  std::vector<double> proto_norm(static_cast<std::size_t>(classes));
  for (Eigen::Index c = 0; c < classes; ++c) {
    proto_norm[c] = norm_checked(prototypes.row(c).transpose(), "prototype " + std::to_string(c));
  }

  SoftAssignment out;
  out.responsibility = RowMatrix::Zero(samples.rows(), classes);
  out.labeled.assign(labels.size(), false);
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    const int label = labels[i];
    if (label >= 0) {
      if (label >= classes) throw ValidationError("soft_assign: label out of range for sample " + std::to_string(i));
      out.responsibility(i, label) = 1.0;
      out.labeled[i] = true;
      continue;
    }
    const double xn = norm_checked(samples.row(i).transpose(), "sample " + std::to_string(i));
    Vector logits(classes);
    for (Eigen::Index c = 0; c < classes; ++c) {
      logits[c] = lambda * samples.row(i).dot(prototypes.row(c)) / (xn * proto_norm[c]);
    }
    out.responsibility.row(i) = softmax(logits).transpose();
  }
  return out;
}

namespace {

struct WeightedMoments {
  Vector mean;
  Vector variance;
  double total = 0.0;
};

WeightedMoments weighted_moments(const RowMatrix& samples, const SoftAssignment& assignment, int class_index) {
  if (class_index < 0 || class_index >= assignment.responsibility.cols()) {
    throw ValidationError("weighted estimate: class index out of range");
  }
  if (assignment.responsibility.rows() != samples.rows()) {
    throw ValidationError("weighted estimate: assignment does not match samples");
  }
  WeightedMoments m;
  const auto w = assignment.responsibility.col(class_index);
  m.total = w.sum();
  if (!(m.total > 0.0)) {
    throw ValidationError("weighted estimate: zero total responsibility for class " + std::to_string(class_index));
  }
  m.mean = (samples.transpose() * w) / m.total;
  m.variance = Vector::Zero(samples.cols());
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    m.variance += w[i] * (samples.row(i).transpose() - m.mean).array().square().matrix();
  }
  m.variance /= m.total;
  return m;
}

}  // namespace

DiagonalGaussian weighted_gaussian_estimate(const RowMatrix& samples, const SoftAssignment& assignment,
                                            int class_index, double variance_floor) {
  auto m = weighted_moments(samples, assignment, class_index);
  return DiagonalGaussian::make(std::move(m.mean), std::move(m.variance), variance_floor);
}

DiagonalGaussian gaussian_product(const DiagonalGaussian& prior, const DiagonalGaussian& likelihood) {
  if (prior.mean.size() != likelihood.mean.size()) throw ValidationError("gaussian_product: dimension mismatch");
  const auto& pv = prior.variance.array();
  const auto& lv = likelihood.variance.array();
  DiagonalGaussian out;
  out.mean = ((lv * prior.mean.array() + pv * likelihood.mean.array()) / (pv + lv)).matrix();
  out.variance = ((lv * pv) / (pv + lv)).matrix();
  return out;
}

FusionResult fuse_prototypes(const RowMatrix& samples, const std::vector<int>& labels,
                             const RowMatrix& mean_prototypes, const RowMatrix& completed_prototypes,
                             const FusionConfig& config) {
  if (mean_prototypes.rows() != completed_prototypes.rows() || mean_prototypes.cols() != completed_prototypes.cols()) {
    throw ValidationError("fuse_prototypes: prototype sets differ in shape");
  }
  FusionResult r;
  r.mean_assignment = soft_assign(samples, mean_prototypes, labels, config.lambda);
  r.completed_assignment = soft_assign(samples, completed_prototypes, labels, config.lambda);
  const auto classes = static_cast<int>(mean_prototypes.rows());
  r.fused.resize(classes, samples.cols());
  for (int c = 0; c < classes; ++c) {
    r.mean_based.push_back(weighted_gaussian_estimate(samples, r.mean_assignment, c, config.variance_floor));
    auto moments = weighted_moments(samples, r.completed_assignment, c);
    const Vector floor_margin = moments.variance.array() - config.variance_floor;
    nn::record_kink_pattern(std::span<const double>(floor_margin.data(), static_cast<std::size_t>(floor_margin.size())));
    r.completed_raw_variance.push_back(moments.variance);
    r.completed.push_back(DiagonalGaussian::make(moments.mean, moments.variance, config.variance_floor));
    r.posterior.push_back(gaussian_product(r.completed.back(), r.mean_based.back()));
    r.fused.row(c) = r.posterior.back().mean.transpose();
  }
  return r;
}

RowMatrix fuse_backward(const FusionResult& result, const RowMatrix& samples, const std::vector<int>& labels,
                        const RowMatrix& completed_prototypes, const RowMatrix& fused_grad,
                        const FusionConfig& config) {
  const auto classes = completed_prototypes.rows();
  const auto n = samples.rows();
  const auto& resp = result.completed_assignment.responsibility;

  // d(loss)/d(responsibility) for every (sample, class).
  RowMatrix grad_w = RowMatrix::Zero(n, classes);
  for (Eigen::Index c = 0; c < classes; ++c) {
    const auto& prior = result.completed[c];
    const auto& like = result.mean_based[c];
    const auto& post = result.posterior[c];
    const Vector g = fused_grad.row(c).transpose();
    const Eigen::ArrayXd denom = prior.variance.array() + like.variance.array();
    const Vector g_mean = (g.array() * like.variance.array() / denom).matrix();
    Vector g_var = (g.array() * (like.mean.array() - post.mean.array()) / denom).matrix();
    const Vector& raw = result.completed_raw_variance[c];
    for (Eigen::Index j = 0; j < g_var.size(); ++j) {
      if (!(raw[j] > config.variance_floor)) g_var[j] = 0.0;
    }
    const double total = resp.col(c).sum();
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::ArrayXd centered = samples.row(i).transpose().array() - prior.mean.array();
      grad_w(i, c) = ((g_mean.array() * centered) + g_var.array() * (centered.square() - raw.array())).sum() / total;
    }
  }

  RowMatrix grad_protos = RowMatrix::Zero(classes, completed_prototypes.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels[i] >= 0) continue;
    const Vector p = resp.row(i).transpose();
    const Vector gw = grad_w.row(i).transpose();
    const Vector g_logit = p.cwiseProduct((gw.array() - p.dot(gw)).matrix());
    const Vector x = samples.row(i).transpose();
    for (Eigen::Index c = 0; c < classes; ++c) {
      grad_protos.row(c) +=
          (config.lambda * g_logit[c]) * cosine_grad_b(x, completed_prototypes.row(c).transpose()).transpose();
    }
  }
  return grad_protos;
}

Vector mean_fuse(const Vector& mean_prototype, const Vector& completed_prototype) {
  if (mean_prototype.size() != completed_prototype.size()) throw ValidationError("mean_fuse: dimension mismatch");
  return 0.5 * (mean_prototype + completed_prototype);
}

namespace {

nlohmann::json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace

std::string fusion_to_json(const FusionResult& result) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < result.posterior.size(); ++c) {
    classes.push_back({{"mu", to_json(result.mean_based[c].mean)},
                       {"sigma", to_json(result.mean_based[c].variance.cwiseSqrt())},
                       {"mu_hat", to_json(result.completed[c].mean)},
                       {"sigma_hat", to_json(result.completed[c].variance.cwiseSqrt())},
                       {"mu_fused", to_json(result.posterior[c].mean)},
                       {"sigma_fused", to_json(result.posterior[c].variance.cwiseSqrt())}});
  }
  auto rows = [](const RowMatrix& m) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.push_back(to_json(m.row(i).transpose()));
    return out;
  };
  nlohmann::json doc;
  doc["classes"] = std::move(classes);
  doc["responsibilities"] = rows(result.mean_assignment.responsibility);
  doc["responsibilities_completed"] = rows(result.completed_assignment.responsibility);
  return doc.dump() + "\n";
}

}  // namespace protofuse
