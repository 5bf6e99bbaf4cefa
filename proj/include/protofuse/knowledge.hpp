#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "protofuse/common.hpp"

namespace protofuse {

/// Class-attribute association matrix plus semantic embeddings for every
/// class and attribute.
///
/// Classes are indexed by id and ids are dense (0 .. num_classes-1).
/// Attributes are stored densely as well; `attribute_ids` keeps the ids used
/// in the knowledge file, which need not be contiguous.
struct PrimitiveKnowledge {
  std::vector<std::string> class_names;
  std::vector<bool> class_is_base;
  std::vector<int> attribute_ids;
  std::vector<std::string> attribute_names;
  // Row-major num_classes x num_attributes, entries 0/1.
  std::vector<std::uint8_t> association;
  RowMatrix class_semantics;
  RowMatrix attribute_semantics;

  [[nodiscard]] int num_classes() const { return static_cast<int>(class_names.size()); }
  [[nodiscard]] int num_attributes() const { return static_cast<int>(attribute_names.size()); }
  [[nodiscard]] int semantic_dim() const { return static_cast<int>(class_semantics.cols()); }

  [[nodiscard]] bool associated(int class_id, int attribute) const;
  void set_associated(int class_id, int attribute, bool value);
  /// Attributes with R[k, a] = 1, ascending.
  [[nodiscard]] std::vector<int> attributes_of(int class_id) const;
  [[nodiscard]] std::vector<int> base_class_ids() const;
  [[nodiscard]] std::vector<int> novel_class_ids() const;
  [[nodiscard]] bool has_class(int class_id) const { return class_id >= 0 && class_id < num_classes(); }

  void validate() const;
};

/// Parses the JSON knowledge document. `source` names the document in
/// error messages. Attributes that no base class carries are removed
/// together with their novel-class associations.
PrimitiveKnowledge parse_knowledge(const std::string& json_text, const std::string& source = "<knowledge>");
PrimitiveKnowledge load_knowledge(const std::filesystem::path& path);
std::string knowledge_to_json(const PrimitiveKnowledge& knowledge);

/// Per-attribute feature distribution N(mean, diag(stddev^2)) over base samples.
struct AttributeStats {
  RowMatrix mean;
  RowMatrix stddev;
  std::vector<std::size_t> support_count;

  [[nodiscard]] int num_attributes() const { return static_cast<int>(mean.rows()); }
  [[nodiscard]] int dim() const { return static_cast<int>(mean.cols()); }
};

struct ClassPrototypeTable {
  std::vector<int> class_ids;
  RowMatrix prototypes;
  std::vector<std::size_t> sample_count;

  [[nodiscard]] bool contains(int class_id) const;
  [[nodiscard]] Vector prototype(int class_id) const;
};

/// Per-class arithmetic mean of all embeddings.
ClassPrototypeTable compute_base_prototypes(const FewShotDataset& base);

/// Population mean/std over the pooled samples of all base classes that carry
/// each attribute (two-pass). Samples of non-base classes are ignored.
AttributeStats compute_attribute_stats(const FewShotDataset& base, const PrimitiveKnowledge& knowledge);

/// Flips every association entry independently with probability `level`.
PrimitiveKnowledge inject_knowledge_noise(const PrimitiveKnowledge& knowledge, double level, std::uint64_t seed);

struct VarianceReport {
  std::vector<int> class_ids;
  std::vector<double> per_class;
  double averaged = 0.0;
  std::size_t skipped = 0;
};

/// Mean per-dimension (population) variance of each class and its average
/// across classes. Classes with fewer than two samples are skipped.
VarianceReport cluster_variance_report(const FewShotDataset& data);

}  // namespace protofuse
