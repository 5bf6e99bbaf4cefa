#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "protofuse/common.hpp"
#include "protofuse/knowledge.hpp"

namespace protofuse {

/// Parameters of the synthetic embedding world. Every class center is the sum
/// of its attributes' component vectors plus a class offset; each sample drops
/// every attribute component independently with `dropout_rate`.
struct WorldSpec {
  int embed_dim = 64;
  int semantic_dim = 32;
  int num_base_classes = 64;
  int num_novel_classes = 20;
  int num_attributes = 24;
  int min_attributes_per_class = 3;
  int max_attributes_per_class = 6;
  int samples_per_class = 60;
  double noise_std = 0.15;
  // Negative means "same as noise_std".
  double novel_noise_std = -1.0;
  double dropout_rate = 0.5;
  double class_offset_std = 0.03;
  double semantic_noise_std = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] double effective_novel_noise() const { return novel_noise_std < 0.0 ? noise_std : novel_noise_std; }
};

std::string world_spec_to_json(const WorldSpec& spec);
WorldSpec world_spec_from_json(const std::string& text);

struct World {
  WorldSpec spec;
  FewShotDataset base;
  FewShotDataset novel;
  PrimitiveKnowledge knowledge;
  std::map<int, Vector> true_centers;
  RowMatrix attribute_components;
  // Number of attribute components each sample lost, aligned with the rows.
  std::vector<int> base_dropped;
  std::vector<int> novel_dropped;
};

World generate_world(const WorldSpec& spec);

enum class PayloadType { kF32, kF64 };

std::string sha256_hex(std::string_view bytes);

/// Writes `<stem>.json` (manifest), `<stem>.bin` (row-major LE payload) and
/// `<stem>.labels` (one class id per line) into `dir`. Returns the manifest path.
std::filesystem::path save_embeddings(const FewShotDataset& data, const std::filesystem::path& dir,
                                      const std::string& stem, PayloadType dtype = PayloadType::kF64);

/// Loads and validates a manifest: payload size, SHA-256 checksum, label count
/// and label membership in the declared class list.
FewShotDataset load_embeddings(const std::filesystem::path& manifest_path);

/// World directory layout: base.*, novel.*, knowledge.json, world.json (spec + true centers).
void save_world(const World& world, const std::filesystem::path& dir, PayloadType dtype = PayloadType::kF64);

struct LoadedWorld {
  FewShotDataset base;
  FewShotDataset novel;
  PrimitiveKnowledge knowledge;
  std::map<int, Vector> true_centers;
};

LoadedWorld load_world(const std::filesystem::path& dir);

}  // namespace protofuse
