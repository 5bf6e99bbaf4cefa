#include "protofuse/common.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <system_error>

namespace protofuse {

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kBase:
      return "base";
    case Split::kNovelVal:
      return "novel-val";
    case Split::kNovelTest:
      return "novel-test";
  }
  return "base";
}

Split split_from_string(std::string_view text) {
  if (text == "base") return Split::kBase;
  if (text == "novel-val") return Split::kNovelVal;
  if (text == "novel-test" || text == "novel") return Split::kNovelTest;
  throw ValidationError("unknown split tag '" + std::string(text) + "'");
}

std::vector<int> FewShotDataset::classes() const {
  std::vector<int> out(labels);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::map<int, std::vector<std::size_t>> FewShotDataset::indices_by_class() const {
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(i);
  return out;
}

void FewShotDataset::validate() const {
  if (labels.empty()) throw ValidationError("dataset is empty");
  if (static_cast<std::size_t>(embeddings.rows()) != labels.size()) {
    throw ValidationError("dataset has " + std::to_string(embeddings.rows()) + " embedding rows but " +
                          std::to_string(labels.size()) + " labels");
  }
  if (embeddings.cols() < 1) throw ValidationError("embedding dimension must be positive");
  for (int label : labels) {
    if (label < 0) throw ValidationError("negative class id " + std::to_string(label) + " in labels");
  }
  if (!embeddings.allFinite()) throw ValidationError("dataset contains non-finite embedding values");
}

double norm_checked(const Vector& v, std::string_view what) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw ValidationError("zero-norm or non-finite vector: " + std::string(what));
  }
  return n;
}

double cosine(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ValidationError("cosine: dimension mismatch");
  return a.dot(b) / (norm_checked(a, "cosine lhs") * norm_checked(b, "cosine rhs"));
}

Vector cosine_grad_b(const Vector& a, const Vector& b) {
  const double na = norm_checked(a, "cosine lhs");
  const double nb = norm_checked(b, "cosine rhs");
  const double c = a.dot(b) / (na * nb);
  return a / (na * nb) - c * b / (nb * nb);
}

Vector softmax(const Vector& logits) {
  const double top = logits.maxCoeff();
  Vector e = (logits.array() - top).exp().matrix();
  return e / e.sum();
}

Eigen::Index argmax(const Vector& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

std::uint64_t split_seed(std::uint64_t master, std::uint64_t stream) {
  std::uint64_t z = master + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace protofuse
