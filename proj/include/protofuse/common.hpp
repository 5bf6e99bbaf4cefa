#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace protofuse {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
// Rows are samples; payload files are stored row-major so rows map 1:1.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Rng = std::mt19937_64;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input: bad files, inconsistent shapes, out-of-range configuration.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

enum class Split { kBase, kNovelVal, kNovelTest };

std::string_view to_string(Split split);
Split split_from_string(std::string_view text);

/// A labeled collection of fixed embeddings (one row per sample).
struct FewShotDataset {
  RowMatrix embeddings;
  std::vector<int> labels;
  Split split = Split::kBase;

  [[nodiscard]] int dim() const { return static_cast<int>(embeddings.cols()); }
  [[nodiscard]] std::size_t size() const { return labels.size(); }
  [[nodiscard]] Vector row(std::size_t i) const { return embeddings.row(static_cast<Eigen::Index>(i)).transpose(); }

  /// Sorted distinct class ids.
  [[nodiscard]] std::vector<int> classes() const;
  /// Sample indices per class, each list in ascending order.
  [[nodiscard]] std::map<int, std::vector<std::size_t>> indices_by_class() const;

  void validate() const;
};

double norm_checked(const Vector& v, std::string_view what);

/// Cosine similarity; throws ValidationError when either vector has zero norm.
double cosine(const Vector& a, const Vector& b);

/// Gradient of cos(a, b) with respect to b.
Vector cosine_grad_b(const Vector& a, const Vector& b);

/// Numerically stable softmax.
Vector softmax(const Vector& logits);

/// Index of the maximum entry; ties go to the lowest index.
Eigen::Index argmax(const Vector& v);

/// Derives an independent stream seed (splitmix64 of master and stream id).
std::uint64_t split_seed(std::uint64_t master, std::uint64_t stream);

/// Writes through a temporary sibling file and renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace protofuse
