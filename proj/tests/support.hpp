#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "protofuse/datagen.hpp"
#include "protofuse/episodes.hpp"

namespace testing {

using namespace protofuse;

inline RowMatrix rows(std::initializer_list<std::initializer_list<double>> values) {
  RowMatrix m(static_cast<Eigen::Index>(values.size()), static_cast<Eigen::Index>(values.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : values) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

inline Vector vec(std::initializer_list<double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v[i++] = x;
  return v;
}

inline RowMatrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  RowMatrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Vector random_vector(Eigen::Index d, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Vector v(d);
  for (Eigen::Index i = 0; i < d; ++i) v[i] = n(rng);
  return v;
}

/// Small world suited to unit tests (fast to generate and train on).
inline WorldSpec small_spec(std::uint64_t seed) {
  WorldSpec s;
  s.embed_dim = 12;
  s.semantic_dim = 6;
  s.num_base_classes = 10;
  s.num_novel_classes = 6;
  s.num_attributes = 8;
  s.min_attributes_per_class = 2;
  s.max_attributes_per_class = 4;
  s.samples_per_class = 25;
  s.seed = seed;
  return s;
}

inline Architecture small_arch(int d, int s) {
  Architecture a;
  a.embed_dim = d;
  a.semantic_dim = s;
  a.latent_dim = 10;
  a.aggregator_hidden = 7;
  a.decoder_hidden = 9;
  return a;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("protofuse-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
