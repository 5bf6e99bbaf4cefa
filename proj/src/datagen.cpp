#include "protofuse/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

namespace protofuse {

using nlohmann::json;

void WorldSpec::validate() const {
  if (embed_dim < 1 || semantic_dim < 1) throw ValidationError("world: dimensions must be at least 1");
  if (num_base_classes < 1 || num_novel_classes < 1 || num_attributes < 1 || samples_per_class < 1) {
    throw ValidationError("world: all counts must be at least 1");
  }
  if (min_attributes_per_class < 1 || max_attributes_per_class < min_attributes_per_class ||
      max_attributes_per_class > num_attributes) {
    throw ValidationError("world: attributes per class must satisfy 1 <= min <= max <= num_attributes");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("world: dropout_rate must lie in [0, 1)");
  if (!(noise_std >= 0.0) || !(class_offset_std >= 0.0) || !(semantic_noise_std >= 0.0)) {
    throw ValidationError("world: standard deviations must be nonnegative");
  }
}

std::string world_spec_to_json(const WorldSpec& spec) {
  json doc{{"embed_dim", spec.embed_dim},
           {"semantic_dim", spec.semantic_dim},
           {"num_base_classes", spec.num_base_classes},
           {"num_novel_classes", spec.num_novel_classes},
           {"num_attributes", spec.num_attributes},
           {"min_attributes_per_class", spec.min_attributes_per_class},
           {"max_attributes_per_class", spec.max_attributes_per_class},
           {"samples_per_class", spec.samples_per_class},
           {"noise_std", spec.noise_std},
           {"novel_noise_std", spec.effective_novel_noise()},
           {"dropout_rate", spec.dropout_rate},
           {"class_offset_std", spec.class_offset_std},
           {"semantic_noise_std", spec.semantic_noise_std},
           {"seed", spec.seed}};
  return doc.dump(1);
}

WorldSpec world_spec_from_json(const std::string& text) {
  const json doc = json::parse(text);
  WorldSpec s;
  s.embed_dim = doc.at("embed_dim").get<int>();
  s.semantic_dim = doc.at("semantic_dim").get<int>();
  s.num_base_classes = doc.at("num_base_classes").get<int>();
  s.num_novel_classes = doc.at("num_novel_classes").get<int>();
  s.num_attributes = doc.at("num_attributes").get<int>();
  s.min_attributes_per_class = doc.at("min_attributes_per_class").get<int>();
  s.max_attributes_per_class = doc.at("max_attributes_per_class").get<int>();
  s.samples_per_class = doc.at("samples_per_class").get<int>();
  s.noise_std = doc.at("noise_std").get<double>();
  s.novel_noise_std = doc.at("novel_noise_std").get<double>();
  s.dropout_rate = doc.at("dropout_rate").get<double>();
  s.class_offset_std = doc.at("class_offset_std").get<double>();
  s.semantic_noise_std = doc.at("semantic_noise_std").get<double>();
  s.seed = doc.at("seed").get<std::uint64_t>();
  return s;
}

namespace {

Vector random_unit(int dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(dim);
  do {
    for (int i = 0; i < dim; ++i) v[i] = normal(rng);
  } while (v.norm() == 0.0);
  return v.normalized();
}

std::vector<int> random_subset(int universe, int size, Rng& rng) {
  std::vector<int> all(static_cast<std::size_t>(universe));
  std::iota(all.begin(), all.end(), 0);
  for (int j = 0; j < size; ++j) {
    std::uniform_int_distribution<int> pick(j, universe - 1);
    std::swap(all[j], all[pick(rng)]);
  }
  all.resize(static_cast<std::size_t>(size));
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

World generate_world(const WorldSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int d = spec.embed_dim;
  const int s = spec.semantic_dim;
  const int f = spec.num_attributes;
  const int num_classes = spec.num_base_classes + spec.num_novel_classes;

  World world;
  world.spec = spec;
  world.attribute_components.resize(f, d);
  for (int a = 0; a < f; ++a) world.attribute_components.row(a) = random_unit(d, rng).transpose();

  PrimitiveKnowledge& kb = world.knowledge;
  kb.class_names.resize(num_classes);
  kb.class_is_base.resize(num_classes);
  kb.association.assign(static_cast<std::size_t>(num_classes) * f, 0);
  for (int a = 0; a < f; ++a) {
    kb.attribute_ids.push_back(a);
    kb.attribute_names.push_back("attr_" + std::to_string(a));
  }
  kb.attribute_semantics.resize(f, s);
  for (int a = 0; a < f; ++a) kb.attribute_semantics.row(a) = random_unit(s, rng).transpose();

  std::uniform_int_distribution<int> subset_size(spec.min_attributes_per_class, spec.max_attributes_per_class);
  for (int k = 0; k < num_classes; ++k) {
    kb.class_is_base[k] = k < spec.num_base_classes;
    kb.class_names[k] = (kb.class_is_base[k] ? "base_" : "novel_") + std::to_string(k);
    for (int a : random_subset(f, subset_size(rng), rng)) kb.set_associated(k, a, true);
  }
  // Every attribute must be carried by some base class so it can transfer.
  std::uniform_int_distribution<int> pick_base(0, spec.num_base_classes - 1);
  for (int a = 0; a < f; ++a) {
    bool covered = false;
    for (int k = 0; k < spec.num_base_classes && !covered; ++k) covered = kb.associated(k, a);
    if (!covered) kb.set_associated(pick_base(rng), a, true);
  }

  kb.class_semantics.resize(num_classes, s);
  for (int k = 0; k < num_classes; ++k) {
    Vector h = Vector::Zero(s);
    const auto attrs = kb.attributes_of(k);
    for (int a : attrs) h += kb.attribute_semantics.row(a).transpose();
    h /= static_cast<double>(attrs.size());
    for (int j = 0; j < s; ++j) h[j] += spec.semantic_noise_std * normal(rng);
    kb.class_semantics.row(k) = h.transpose();
  }

  for (int k = 0; k < num_classes; ++k) {
    Vector center = Vector::Zero(d);
    for (int a : kb.attributes_of(k)) center += world.attribute_components.row(a).transpose();
    for (int j = 0; j < d; ++j) center[j] += spec.class_offset_std * normal(rng);
    world.true_centers.emplace(k, std::move(center));
  }

  auto fill = [&](FewShotDataset& data, std::vector<int>& dropped, int first, int count, double noise, Split split) {
    data.split = split;
    data.embeddings.resize(static_cast<Eigen::Index>(count) * spec.samples_per_class, d);
    data.labels.clear();
    dropped.clear();
    Eigen::Index row = 0;
    for (int k = first; k < first + count; ++k) {
      const auto attrs = kb.attributes_of(k);
      for (int i = 0; i < spec.samples_per_class; ++i) {
        Vector x = world.true_centers.at(k);
        int lost = 0;
        for (int a : attrs) {
          if (unit(rng) < spec.dropout_rate) {
            x -= world.attribute_components.row(a).transpose();
            ++lost;
          }
        }
        for (int j = 0; j < d; ++j) x[j] += noise * normal(rng);
        data.embeddings.row(row++) = x.transpose();
        data.labels.push_back(k);
        dropped.push_back(lost);
      }
    }
  };
  fill(world.base, world.base_dropped, 0, spec.num_base_classes, spec.noise_std, Split::kBase);
  fill(world.novel, world.novel_dropped, spec.num_base_classes, spec.num_novel_classes, spec.effective_novel_noise(),
       Split::kNovelTest);
  kb.validate();
  return world;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

namespace {

template <typename T, typename Bits>
void append_le(std::string& out, T value) {
  const auto bits = std::bit_cast<Bits>(value);
  for (std::size_t i = 0; i < sizeof(Bits); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <typename T, typename Bits>
T read_le(const char* p) {
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(Bits); ++i) bits |= static_cast<Bits>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace

std::filesystem::path save_embeddings(const FewShotDataset& data, const std::filesystem::path& dir,
                                      const std::string& stem, PayloadType dtype) {
  data.validate();
  std::filesystem::create_directories(dir);
  std::string payload;
  const std::size_t width = dtype == PayloadType::kF64 ? 8 : 4;
  payload.reserve(static_cast<std::size_t>(data.embeddings.size()) * width);
  for (Eigen::Index i = 0; i < data.embeddings.rows(); ++i) {
    for (Eigen::Index j = 0; j < data.embeddings.cols(); ++j) {
      if (dtype == PayloadType::kF64) {
        append_le<double, std::uint64_t>(payload, data.embeddings(i, j));
      } else {
        append_le<float, std::uint32_t>(payload, static_cast<float>(data.embeddings(i, j)));
      }
    }
  }
  std::string labels;
  for (int label : data.labels) labels += std::to_string(label) + "\n";

  const std::string payload_file = stem + ".bin";
  const std::string labels_file = stem + ".labels";
  json manifest{{"d", data.dim()},
                {"n", data.size()},
                {"classes", data.classes()},
                {"labels_file", labels_file},
                {"payload_file", payload_file},
                {"payload_dtype", dtype == PayloadType::kF64 ? "f64le" : "f32le"},
                {"checksum", sha256_hex(payload)},
                {"split", std::string(to_string(data.split))}};
  write_file_atomic(dir / payload_file, payload);
  write_file_atomic(dir / labels_file, labels);
  const auto manifest_path = dir / (stem + ".json");
  write_file_atomic(manifest_path, manifest.dump(1) + "\n");
  return manifest_path;
}

FewShotDataset load_embeddings(const std::filesystem::path& manifest_path) {
  const std::string where = manifest_path.string();
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ValidationError(where + ": malformed manifest: " + e.what());
  }
  auto field = [&](const char* key) -> const json& {
    auto it = manifest.find(key);
    if (it == manifest.end()) throw ValidationError(where + ": manifest field '" + key + "' missing");
    return *it;
  };
  std::size_t d = 0;
  std::size_t n = 0;
  std::vector<int> classes;
  std::string dtype;
  std::string checksum;
  std::string payload_file;
  std::string labels_file;
  try {
    d = field("d").get<std::size_t>();
    n = field("n").get<std::size_t>();
    classes = field("classes").get<std::vector<int>>();
    dtype = field("payload_dtype").get<std::string>();
    checksum = field("checksum").get<std::string>();
    payload_file = field("payload_file").get<std::string>();
    labels_file = field("labels_file").get<std::string>();
  } catch (const json::type_error& e) {
    throw ValidationError(where + ": manifest field has the wrong type: " + e.what());
  }
  if (d == 0 || n == 0) throw ValidationError(where + ": d and n must be positive");
  std::size_t width = 0;
  if (dtype == "f64le") {
    width = 8;
  } else if (dtype == "f32le") {
    width = 4;
  } else {
    throw ValidationError(where + ": unsupported payload_dtype '" + dtype + "'");
  }

  const auto base_dir = manifest_path.parent_path();
  const std::string payload = read_file(base_dir / payload_file);
  const std::size_t expected = n * d * width;
  if (payload.size() != expected) {
    throw ValidationError(where + ": payload '" + payload_file + "' has " + std::to_string(payload.size()) +
                          " bytes, expected " + std::to_string(expected) + " (n=" + std::to_string(n) +
                          ", d=" + std::to_string(d) + ", " + dtype + ")");
  }
  const std::string actual_sum = sha256_hex(payload);
  if (actual_sum != checksum) {
    throw ValidationError(where + ": checksum mismatch for '" + payload_file + "' (manifest " + checksum +
                          ", actual " + actual_sum + ")");
  }

  FewShotDataset data;
  data.split = Split::kBase;
  if (auto it = manifest.find("split"); it != manifest.end() && it->is_string()) {
    data.split = split_from_string(it->get<std::string>());
  }
  data.embeddings.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const char* p = payload.data() + (i * d + j) * width;
      data.embeddings(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          width == 8 ? read_le<double, std::uint64_t>(p) : static_cast<double>(read_le<float, std::uint32_t>(p));
    }
  }

  std::istringstream labels(read_file(base_dir / labels_file));
  std::string line;
  std::size_t line_no = 0;
  std::sort(classes.begin(), classes.end());
  while (std::getline(labels, line)) {
    ++line_no;
    if (line.empty()) continue;
    int label = 0;
    try {
      std::size_t used = 0;
      label = std::stoi(line, &used);
      if (used != line.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ValidationError(where + ": labels line " + std::to_string(line_no) + ": not an integer");
    }
    if (!std::binary_search(classes.begin(), classes.end(), label)) {
      throw ValidationError(where + ": labels line " + std::to_string(line_no) + ": unknown class " +
                            std::to_string(label));
    }
    data.labels.push_back(label);
  }
  if (data.labels.size() != n) {
    throw ValidationError(where + ": " + std::to_string(data.labels.size()) + " labels for " + std::to_string(n) +
                          " rows");
  }
  data.validate();
  return data;
}

void save_world(const World& world, const std::filesystem::path& dir, PayloadType dtype) {
  std::filesystem::create_directories(dir);
  save_embeddings(world.base, dir, "base", dtype);
  save_embeddings(world.novel, dir, "novel", dtype);
  write_file_atomic(dir / "knowledge.json", knowledge_to_json(world.knowledge));
  json centers = json::object();
  for (const auto& [k, c] : world.true_centers) {
    centers[std::to_string(k)] = std::vector<double>(c.data(), c.data() + c.size());
  }
  json doc{{"spec", json::parse(world_spec_to_json(world.spec))}, {"true_centers", std::move(centers)}};
  write_file_atomic(dir / "world.json", doc.dump(1) + "\n");
}

LoadedWorld load_world(const std::filesystem::path& dir) {
  LoadedWorld out;
  out.base = load_embeddings(dir / "base.json");
  out.novel = load_embeddings(dir / "novel.json");
  out.knowledge = load_knowledge(dir / "knowledge.json");
  const auto world_path = dir / "world.json";
  if (std::filesystem::exists(world_path)) {
    json doc;
    try {
      doc = json::parse(read_file(world_path));
    } catch (const json::exception& e) {
      throw ValidationError(world_path.string() + ": " + e.what());
    }
    if (auto it = doc.find("true_centers"); it != doc.end()) {
      for (const auto& [key, value] : it->items()) {
        const auto v = value.get<std::vector<double>>();
        out.true_centers.emplace(std::stoi(key), Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
      }
    }
  }
  return out;
}

}  // namespace protofuse
