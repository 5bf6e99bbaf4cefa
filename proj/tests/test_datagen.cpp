#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "support.hpp"

using namespace protofuse;
using namespace testing;
using nlohmann::json;

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j);
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

void rewrite_json(const std::filesystem::path& path, const std::function<void(json&)>& edit) {
  auto doc = json::parse(read_file(path));
  edit(doc);
  write_file_atomic(path, doc.dump());
}

std::string load_error(const std::filesystem::path& manifest) {
  try {
    (void)load_embeddings(manifest);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

double mean_one_shot_similarity(const World& w, int samples) {
  double total = 0;
  int n = 0;
  for (std::size_t i = 0; i < w.novel.size() && n < samples; ++i, ++n) {
    total += cosine(w.novel.row(i), w.true_centers.at(w.novel.labels[i]));
  }
  return total / n;
}

}  // namespace

TEST_CASE("world generation is deterministic and class-disjoint") {
  const auto a = generate_world(small_spec(1));
  const auto b = generate_world(small_spec(1));
  CHECK(a.base.embeddings == b.base.embeddings);
  CHECK(a.novel.embeddings == b.novel.embeddings);
  CHECK(a.knowledge.association == b.knowledge.association);
  CHECK(generate_world(small_spec(2)).base.embeddings != a.base.embeddings);

  const auto base = a.base.classes();
  const auto novel = a.novel.classes();
  std::vector<int> both;
  std::set_intersection(base.begin(), base.end(), novel.begin(), novel.end(), std::back_inserter(both));
  CHECK(both.empty());
  CHECK(base.size() == 10);
  CHECK(novel.size() == 6);
  for (int c : base) CHECK(a.knowledge.class_is_base[static_cast<std::size_t>(c)]);
  for (int c : novel) CHECK_FALSE(a.knowledge.class_is_base[static_cast<std::size_t>(c)]);
  CHECK(a.base.split == Split::kBase);
  CHECK(a.knowledge.semantic_dim() == 6);
  for (int c = 0; c < a.knowledge.num_classes(); ++c) {
    const auto n = a.knowledge.attributes_of(c).size();
    CHECK(n >= 2);
    CHECK(n <= 4);
  }
}

TEST_CASE("world spec validation and JSON") {
  auto spec = small_spec(3);
  spec.dropout_rate = 1.0;
  CHECK_THROWS_AS(spec.validate(), ValidationError);
  spec = small_spec(3);
  spec.noise_std = -1;
  CHECK_THROWS_AS(spec.validate(), ValidationError);
  spec = small_spec(3);
  spec.num_novel_classes = 0;
  CHECK_THROWS_AS(spec.validate(), ValidationError);

  spec = small_spec(3);
  spec.novel_noise_std = 0.4;
  const auto back = world_spec_from_json(world_spec_to_json(spec));
  CHECK(back.seed == spec.seed);
  CHECK(back.novel_noise_std == 0.4);
  CHECK(back.embed_dim == spec.embed_dim);
  CHECK(world_spec_to_json(back) == world_spec_to_json(spec));
}

TEST_CASE("noise-free world puts every sample on its center") {
  auto spec = small_spec(4);
  spec.noise_std = 0;
  spec.dropout_rate = 0;
  const auto w = generate_world(spec);
  for (const auto* d : {&w.base, &w.novel}) {
    for (std::size_t i = 0; i < d->size(); ++i) CHECK(d->row(i) == w.true_centers.at(d->labels[i]));
  }
  // Centers are the sum of the class's attribute components plus an offset.
  const int c = w.base.labels[0];
  Vector sum = Vector::Zero(spec.embed_dim);
  for (int a : w.knowledge.attributes_of(c)) sum += w.attribute_components.row(a).transpose();
  CHECK((w.true_centers.at(c) - sum).norm() < 6.0 * spec.class_offset_std * std::sqrt(spec.embed_dim));
}

TEST_CASE("attribute dropout biases one-shot prototypes") {
  double with = 0;
  double without = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto spec = small_spec(50 + seed);
    spec.samples_per_class = 40;
    spec.dropout_rate = 0.5;
    with += mean_one_shot_similarity(generate_world(spec), 200);
    spec.dropout_rate = 0.0;
    without += mean_one_shot_similarity(generate_world(spec), 200);
  }
  CHECK(with < without);
}

TEST_CASE("distance to center grows with dropped attributes") {
  const auto w = generate_world(WorldSpec{.seed = 6});
  std::vector<double> dist;
  std::vector<double> dropped;
  for (std::size_t i = 0; i < w.base.size(); ++i) {
    dist.push_back((w.base.row(i) - w.true_centers.at(w.base.labels[i])).norm());
    dropped.push_back(w.base_dropped[i]);
  }
  const double rho = spearman(dist, dropped);
  // Under independence rho is approximately N(0, 1/(n-1)); require 5 sigma.
  CHECK(rho > 5.0 / std::sqrt(static_cast<double>(dist.size() - 1)));
}

TEST_CASE("attribute stats recover attribute components") {
  const auto w = generate_world(WorldSpec{.seed = 7});
  const auto stats = compute_attribute_stats(w.base, w.knowledge);
  const Vector global = w.base.embeddings.colwise().mean().transpose();
  double total = 0;
  for (int a = 0; a < stats.num_attributes(); ++a) {
    total += cosine(stats.mean.row(a).transpose() - global, w.attribute_components.row(a).transpose());
  }
  CHECK(total / stats.num_attributes() > 0.5);
}

TEST_CASE("embedding manifests") {
  const auto dir = scratch_dir("manifest");
  const auto w = generate_world(small_spec(8));
  const auto manifest = save_embeddings(w.novel, dir, "novel");

  SUBCASE("f64 round trip is bit-exact") {
    const auto back = load_embeddings(manifest);
    CHECK(back.embeddings == w.novel.embeddings);
    CHECK(back.labels == w.novel.labels);
    CHECK(back.split == w.novel.split);
    const auto doc = json::parse(read_file(manifest));
    CHECK(doc["checksum"] == sha256_hex(read_file(dir / "novel.bin")));
    CHECK(doc["payload_dtype"] == "f64le");
    CHECK(doc["d"] == w.novel.dim());
  }
  SUBCASE("f32 round trip within single precision") {
    const auto m32 = save_embeddings(w.novel, dir, "novel32", PayloadType::kF32);
    const auto back = load_embeddings(m32);
    CHECK((back.embeddings - w.novel.embeddings).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::filesystem::file_size(dir / "novel32.bin") == w.novel.size() * w.novel.dim() * 4);
  }
  SUBCASE("truncated payload reports byte counts") {
    auto bytes = read_file(dir / "novel.bin");
    bytes.resize(bytes.size() - 8);
    write_file_atomic(dir / "novel.bin", bytes);
    const auto msg = load_error(manifest);
    CHECK(msg.find(std::to_string(bytes.size())) != std::string::npos);
    CHECK(msg.find(std::to_string(bytes.size() + 8)) != std::string::npos);
  }
  SUBCASE("dimension disagreeing with the payload") {
    rewrite_json(manifest, [](json& m) { m["d"] = m["d"].get<int>() + 1; });
    CHECK_FALSE(load_error(manifest).empty());
  }
  SUBCASE("checksum mismatch") {
    auto bytes = read_file(dir / "novel.bin");
    bytes[3] ^= 0x01;
    write_file_atomic(dir / "novel.bin", bytes);
    CHECK(load_error(manifest).find("checksum") != std::string::npos);
  }
  SUBCASE("label outside the declared classes") {
    rewrite_json(manifest, [](json& m) { m["classes"].erase(m["classes"].begin()); });
    CHECK(load_error(manifest).find("unknown class") != std::string::npos);
  }
  SUBCASE("missing manifest field") {
    rewrite_json(manifest, [](json& m) { m.erase("checksum"); });
    CHECK(load_error(manifest).find("checksum") != std::string::npos);
  }
}

TEST_CASE("world directory round trip") {
  const auto dir = scratch_dir("world");
  const auto w = generate_world(small_spec(9));
  save_world(w, dir);
  const auto back = load_world(dir);
  CHECK(back.base.embeddings == w.base.embeddings);
  CHECK(back.novel.labels == w.novel.labels);
  CHECK(back.knowledge.association == w.knowledge.association);
  REQUIRE(back.true_centers.size() == w.true_centers.size());
  for (const auto& [k, c] : w.true_centers) CHECK(back.true_centers.at(k) == c);
}

TEST_CASE("sha256") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
