#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "support.hpp"

using namespace protofuse;
using namespace testing;

namespace {

struct Toy {
  World world;
  AttributeStats stats;
  ProtoComNet net;

  explicit Toy(std::uint64_t seed, WorldSpec spec = small_spec(0))
      : world([&] {
          spec.seed = seed;
          return generate_world(spec);
        }()),
        stats(compute_attribute_stats(world.base, world.knowledge)),
        net(small_arch(world.spec.embed_dim, world.spec.semantic_dim), seed + 100) {}
};

std::vector<double> dense_scalar(const nn::LayerStack& stack, const nn::ParamStore& store, std::vector<double> x) {
  for (const auto& layer : stack.layers) {
    const auto& w = store[layer.weight].value;
    const auto& b = store[layer.bias].value;
    std::vector<double> y(static_cast<std::size_t>(layer.out_dim));
    for (int o = 0; o < layer.out_dim; ++o) {
      double acc = b(o, 0);
      for (int i = 0; i < layer.in_dim; ++i) acc += w(o, i) * x[static_cast<std::size_t>(i)];
      y[static_cast<std::size_t>(o)] = (layer.activation == nn::Activation::kRelu && acc < 0) ? 0.0 : acc;
    }
    x = std::move(y);
  }
  return x;
}

std::vector<double> as_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

std::vector<Vector> encode_all(const ProtoComNet& net, const AttributeStats& stats) {
  std::vector<Vector> out;
  for (int a = 0; a < stats.num_attributes(); ++a) out.push_back(encode(net, stats.mean.row(a).transpose()));
  return out;
}

int class_with_attributes(const PrimitiveKnowledge& k, std::size_t at_least) {
  for (int c : k.base_class_ids()) {
    if (k.attributes_of(c).size() >= at_least) return c;
  }
  FAIL("no class with enough attributes");
  return -1;
}

}  // namespace

TEST_CASE("architecture dimensions") {
  const ProtoComNet net(small_arch(12, 6), 1);
  CHECK(net.encoder().in_dim() == 12);
  CHECK(net.encoder().out_dim() == 10);
  CHECK(net.aggregator().in_dim() == 12 + 2 * 6);
  CHECK(net.aggregator().out_dim() == 1);
  CHECK(net.decoder().in_dim() == 10);
  CHECK(net.decoder().out_dim() == 12);
  CHECK(net.scale() == doctest::Approx(10.0).epsilon(1e-14));
  CHECK_FALSE(net.params()[net.log_scale_id()].decay);

  Architecture defaults;
  defaults.embed_dim = 640;
  const ProtoComNet full(defaults, 1);
  CHECK(full.encoder().out_dim() == 256);
  CHECK(full.aggregator().layers[0].out_dim == 300);
  CHECK(full.decoder().layers[0].out_dim == 512);
  CHECK_THROWS_AS(ProtoComNet(small_arch(12, 6), 1, 0.0), ValidationError);
}

TEST_CASE("encoder") {
  ProtoComNet net(small_arch(10, 4), 3);
  auto& w = net.params()[net.encoder().layers[0].weight].value;
  auto& b = net.params()[net.encoder().layers[0].bias].value;
  Rng rng(1);
  const Vector x = random_vector(10, rng);

  const auto ref = dense_scalar(net.encoder(), net.params(), as_std(x));
  const Vector z = encode(net, x);
  for (int i = 0; i < 10; ++i) CHECK(z[i] == doctest::Approx(ref[static_cast<std::size_t>(i)]).epsilon(1e-12));

  w.setIdentity();
  b.setZero();
  const Vector nonneg = x.cwiseAbs();
  CHECK(encode(net, nonneg) == nonneg);

  w.setZero();
  CHECK(encode(net, x).isZero(0.0));
  CHECK_THROWS_AS((void)encode(net, Vector::Ones(3)), ValidationError);
}

TEST_CASE("attribute feature sampling") {
  Toy toy(1);
  Rng rng(5);
  const Vector mu = toy.stats.mean.row(0).transpose();
  CHECK(sample_attribute_feature(toy.stats, 0, Mode::kTest, rng) == mu);

  auto flat = toy.stats;
  flat.stddev.setZero();
  CHECK(sample_attribute_feature(flat, 0, Mode::kTrain, rng) == mu);

  CHECK_THROWS_AS((void)sample_attribute_feature(toy.stats, 999, Mode::kTest, rng), ValidationError);

  SUBCASE("Monte-Carlo moments") {
    const int n = 10000;
    const int d = toy.stats.dim();
    Vector sum = Vector::Zero(d);
    Vector sq = Vector::Zero(d);
    for (int i = 0; i < n; ++i) {
      const Vector z = sample_attribute_feature(toy.stats, 0, Mode::kTrain, rng);
      sum += z;
      sq += z.cwiseProduct(z);
    }
    const Vector mean = sum / n;
    const Vector sd = (sq / n - mean.cwiseProduct(mean)).cwiseSqrt();
    for (int j = 0; j < d; ++j) {
      const double sigma = toy.stats.stddev(0, j);
      CHECK(std::abs(mean[j] - toy.stats.mean(0, j)) < 3.0 * sigma / std::sqrt(n));
      CHECK(std::abs(sd[j] - sigma) < 3.0 * sigma / std::sqrt(2.0 * n));
    }
  }
}

TEST_CASE("aggregation") {
  Toy toy(2);
  const auto& k = toy.world.knowledge;
  const int cls = class_with_attributes(k, 3);
  const Vector p = toy.world.base.row(0);
  const auto latents = encode_all(toy.net, toy.stats);
  const Vector zk = encode(toy.net, p);

  SUBCASE("matches a scalar reference") {
    const auto agg = aggregate(toy.net, k, cls, p, latents, zk);
    std::vector<double> g = as_std(zk);
    for (int a : k.attributes_of(cls)) {
      std::vector<double> in = as_std(p);
      for (int j = 0; j < k.semantic_dim(); ++j) in.push_back(k.class_semantics(cls, j));
      for (int j = 0; j < k.semantic_dim(); ++j) in.push_back(k.attribute_semantics(a, j));
      const double alpha = dense_scalar(toy.net.aggregator(), toy.net.params(), in)[0];
      CHECK(agg.attention[a] == doctest::Approx(alpha).epsilon(1e-12));
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += alpha * latents[static_cast<std::size_t>(a)][static_cast<Eigen::Index>(j)];
    }
    for (std::size_t j = 0; j < g.size(); ++j) CHECK(std::abs(agg.aggregated[static_cast<Eigen::Index>(j)] - g[j]) < 1e-12);
    for (int a = 0; a < k.num_attributes(); ++a) {
      if (!k.associated(cls, a)) CHECK(agg.attention[a] == 0.0);
    }
  }

  SUBCASE("empty attribute row leaves the prototype latent") {
    auto bare = k;
    for (int a = 0; a < bare.num_attributes(); ++a) bare.set_associated(cls, a, false);
    const auto agg = aggregate(toy.net, bare, cls, p, latents, zk);
    CHECK(agg.aggregated == zk);
    CHECK(agg.attention.isZero(0.0));
  }

  SUBCASE("forced unit attention adds the attribute latent") {
    auto one = k;
    const int keep = k.attributes_of(cls)[0];
    for (int a = 0; a < one.num_attributes(); ++a) one.set_associated(cls, a, a == keep);
    auto& last = toy.net.aggregator().layers.back();
    toy.net.params()[last.weight].value.setZero();
    toy.net.params()[last.bias].value.setConstant(1.0);
    const auto agg = aggregate(toy.net, one, cls, p, latents, zk);
    CHECK((agg.aggregated - (latents[static_cast<std::size_t>(keep)] + zk)).cwiseAbs().maxCoeff() < 1e-15);
  }

  SUBCASE("gating removes exactly one term") {
    const auto full = aggregate(toy.net, k, cls, p, latents, zk);
    const int drop = k.attributes_of(cls)[1];
    auto gated = k;
    gated.set_associated(cls, drop, false);
    const auto less = aggregate(toy.net, gated, cls, p, latents, zk);
    const Vector expected = full.aggregated - full.attention[drop] * latents[static_cast<std::size_t>(drop)];
    CHECK((less.aggregated - expected).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("invariant to attribute enumeration order") {
    const int f = k.num_attributes();
    std::vector<int> perm(static_cast<std::size_t>(f));
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[0], perm[2]);
    // New attribute i is old attribute perm[i].
    PrimitiveKnowledge shuffled = k;
    std::vector<Vector> shuffled_latents(static_cast<std::size_t>(f));
    for (int i = 0; i < f; ++i) {
      const int old = perm[static_cast<std::size_t>(i)];
      shuffled.attribute_ids[static_cast<std::size_t>(i)] = k.attribute_ids[static_cast<std::size_t>(old)];
      shuffled.attribute_names[static_cast<std::size_t>(i)] = k.attribute_names[static_cast<std::size_t>(old)];
      shuffled.attribute_semantics.row(i) = k.attribute_semantics.row(old);
      shuffled_latents[static_cast<std::size_t>(i)] = latents[static_cast<std::size_t>(old)];
      for (int c = 0; c < k.num_classes(); ++c) shuffled.set_associated(c, i, k.associated(c, old));
    }
    const auto a = aggregate(toy.net, k, cls, p, latents, zk);
    const auto b = aggregate(toy.net, shuffled, cls, p, shuffled_latents, zk);
    CHECK((a.aggregated - b.aggregated).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("prototype completion") {
  Toy toy(3);
  const auto& k = toy.world.knowledge;
  const int cls = class_with_attributes(k, 2);
  const Vector p = toy.world.base.row(0);
  Rng rng(9);

  const Vector a = complete_prototype(toy.net, k, toy.stats, cls, p, Mode::kTest, rng);
  const Vector b = complete_prototype(toy.net, k, toy.stats, cls, p, Mode::kTest, rng);
  CHECK(a == b);
  CHECK(a.size() == toy.world.spec.embed_dim);

  SUBCASE("test mode equals the trace built from attribute means") {
    AttributeDraws draws;
    for (int attr : k.attributes_of(cls)) {
      draws.attributes.push_back(attr);
      draws.features.push_back(toy.stats.mean.row(attr).transpose());
    }
    CHECK(complete_forward(toy.net, k, cls, p, draws).output() == a);
  }

  SUBCASE("zero decoder outputs zero") {
    for (const auto& layer : toy.net.decoder().layers) {
      toy.net.params()[layer.weight].value.setZero();
      toy.net.params()[layer.bias].value.setZero();
    }
    CHECK(complete_prototype(toy.net, k, toy.stats, cls, p, Mode::kTrain, rng).isZero(0.0));
  }
}

TEST_CASE("completion task sampling") {
  Toy toy(4);
  const auto table = compute_base_prototypes(toy.world.base);
  Rng rng(10);

  const int full = toy.world.spec.samples_per_class;
  for (const auto& t : sample_completion_tasks(toy.world.base, table, full, 5, rng)) {
    CHECK((t.incomplete - t.target).cwiseAbs().maxCoeff() < 1e-12);
  }
  for (const auto& t : sample_completion_tasks(toy.world.base, table, 1, 5, rng)) {
    REQUIRE(t.support.size() == 1);
    CHECK(t.incomplete == toy.world.base.row(t.support[0]));
    CHECK(toy.world.base.labels[t.support[0]] == t.class_id);
    CHECK(t.target == table.prototype(t.class_id));
  }
  for (const auto& t : sample_completion_tasks(toy.world.base, table, 4, 20, rng)) {
    auto s = t.support;
    std::sort(s.begin(), s.end());
    CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
  }
  CHECK_THROWS_AS((void)sample_completion_tasks(toy.world.base, table, full + 1, 1, rng), ValidationError);
}

TEST_CASE("completion task class frequencies are uniform") {
  auto spec = small_spec(6);
  spec.num_base_classes = 64;
  spec.samples_per_class = 4;
  spec.num_attributes = 10;
  const auto world = generate_world(spec);
  const auto table = compute_base_prototypes(world.base);
  Rng rng(11);
  const std::size_t n = 10000;
  std::map<int, int> counts;
  for (const auto& t : sample_completion_tasks(world.base, table, 1, n, rng)) ++counts[t.class_id];
  CHECK(counts.size() == 64);
  const double p = 1.0 / 64.0;
  const double sd = std::sqrt(n * p * (1 - p));
  for (const auto& [cls, c] : counts) CHECK(std::abs(c - n * p) < 3.0 * sd);
}

TEST_CASE("completion loss gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Toy toy(20 + seed);
    const auto table = compute_base_prototypes(toy.world.base);
    Rng rng(seed);
    const auto task = sample_completion_tasks(toy.world.base, table, 1 + static_cast<int>(seed % 3), 1, rng)[0];
    const auto attrs = toy.world.knowledge.attributes_of(task.class_id);
    const auto draws = draw_attribute_features(toy.stats, attrs, Mode::kTrain, rng);
    const nn::LossFunction loss = [&](nn::ParamStore&, bool accumulate) {
      return completion_loss(toy.net, toy.world.knowledge, task, draws, accumulate);
    };
    const auto report = nn::gradient_check(toy.net.params(), loss);
    INFO("seed " << seed << " worst " << report.worst_parameter);
    CHECK(report.max_relative_error < 1e-4);
    CHECK(report.checked > 100);
  }
}

TEST_CASE("completion training") {
  SUBCASE("empty task list is rejected") {
    Toy toy(7);
    CHECK_THROWS_AS((void)train_completion(toy.net, toy.world.knowledge, toy.stats, std::span<const CompletionTask>{},
                                           CompletionTrainConfig{}),
                    ValidationError);
  }

  SUBCASE("identity targets on a three-class world") {
    auto spec = small_spec(8);
    spec.num_base_classes = 3;
    spec.num_novel_classes = 1;
    spec.samples_per_class = 10;
    Toy toy(8, spec);
    const auto table = compute_base_prototypes(toy.world.base);
    Rng rng(1);
    const auto tasks = sample_completion_tasks(toy.world.base, table, spec.samples_per_class, 3, rng);
    CompletionTrainConfig cfg;
    cfg.sgd = {1e-2, 0.9, 0.0, 400};
    cfg.seed = 3;
    const auto history = train_completion(toy.net, toy.world.knowledge, toy.stats, tasks, cfg);
    CHECK(history.epoch_loss.size() == 400);
    CHECK(history.epoch_loss.back() < 1e-3);
  }

  SUBCASE("training is deterministic and reduces loss") {
    Toy a(9);
    Toy b(9);
    const auto table = compute_base_prototypes(a.world.base);
    CompletionTrainConfig cfg;
    cfg.sgd.epochs = 60;
    cfg.seed = 5;
    const auto ha = train_completion(a.net, a.world.knowledge, a.stats, a.world.base, table, cfg);
    const auto hb = train_completion(b.net, b.world.knowledge, b.stats, b.world.base, table, cfg);
    CHECK(ha.epoch_loss == hb.epoch_loss);
    CHECK(nn::serialize_checkpoint(a.net.params()) == nn::serialize_checkpoint(b.net.params()));
    CHECK(ha.epoch_loss.back() * 2.0 < ha.epoch_loss.front());
    CHECK(a.net.scale() == doctest::Approx(10.0).epsilon(1e-14));

    // Fresh 1-shot tasks: completed prototypes land closer to the class mean.
    Rng rng(1234);
    double completed_err = 0;
    double raw_err = 0;
    for (const auto& t : sample_completion_tasks(a.world.base, table, 1, 400, rng)) {
      const Vector out = complete_prototype(a.net, a.world.knowledge, a.stats, t.class_id, t.incomplete, Mode::kTest, rng);
      completed_err += (out - t.target).norm();
      raw_err += (t.incomplete - t.target).norm();
    }
    CHECK(completed_err < raw_err);
  }
}
