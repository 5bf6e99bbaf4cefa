#include "protofuse/knowledge.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace protofuse {

using nlohmann::json;

bool PrimitiveKnowledge::associated(int class_id, int attribute) const {
  return association[static_cast<std::size_t>(class_id) * attribute_names.size() + attribute] != 0;
}

void PrimitiveKnowledge::set_associated(int class_id, int attribute, bool value) {
  association[static_cast<std::size_t>(class_id) * attribute_names.size() + attribute] = value ? 1 : 0;
}

std::vector<int> PrimitiveKnowledge::attributes_of(int class_id) const {
  std::vector<int> out;
  for (int a = 0; a < num_attributes(); ++a) {
    if (associated(class_id, a)) out.push_back(a);
  }
  return out;
}

std::vector<int> PrimitiveKnowledge::base_class_ids() const {
  std::vector<int> out;
  for (int k = 0; k < num_classes(); ++k) {
    if (class_is_base[k]) out.push_back(k);
  }
  return out;
}

std::vector<int> PrimitiveKnowledge::novel_class_ids() const {
  std::vector<int> out;
  for (int k = 0; k < num_classes(); ++k) {
    if (!class_is_base[k]) out.push_back(k);
  }
  return out;
}

void PrimitiveKnowledge::validate() const {
  const auto c = static_cast<std::size_t>(num_classes());
  const auto f = static_cast<std::size_t>(num_attributes());
  if (c == 0) throw ValidationError("knowledge has no classes");
  if (class_is_base.size() != c) throw ValidationError("knowledge: split flags do not cover all classes");
  if (attribute_ids.size() != f) throw ValidationError("knowledge: attribute id list size mismatch");
  if (association.size() != c * f) throw ValidationError("knowledge: association matrix has wrong size");
  for (auto v : association) {
    if (v > 1) throw ValidationError("knowledge: association entries must be 0 or 1");
  }
  if (class_semantics.rows() != static_cast<Eigen::Index>(c) ||
      attribute_semantics.rows() != static_cast<Eigen::Index>(f)) {
    throw ValidationError("knowledge: semantic vectors do not cover every class and attribute");
  }
  if (class_semantics.cols() < 1 || (f > 0 && attribute_semantics.cols() != class_semantics.cols())) {
    throw ValidationError("knowledge: semantic vectors must share one positive dimension");
  }
}

namespace {

std::string line_context(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

[[noreturn]] void field_error(const std::string& source, const std::string& pointer, const std::string& what) {
  throw ValidationError(source + ": field " + pointer + ": " + what);
}

const json& require(const json& obj, const char* key, const std::string& source, const std::string& pointer) {
  if (!obj.is_object()) field_error(source, pointer, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) field_error(source, pointer + "/" + key, "missing");
  return *it;
}

std::vector<double> read_vector(const json& node, const std::string& source, const std::string& pointer) {
  if (!node.is_array() || node.empty()) field_error(source, pointer, "expected a non-empty array of numbers");
  std::vector<double> out;
  out.reserve(node.size());
  for (std::size_t i = 0; i < node.size(); ++i) {
    if (!node[i].is_number()) field_error(source, pointer + "/" + std::to_string(i), "expected a number");
    out.push_back(node[i].get<double>());
  }
  return out;
}

}  // namespace

PrimitiveKnowledge parse_knowledge(const std::string& json_text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ValidationError(source + ": " + line_context(json_text, e.byte) + ": " + e.what());
  }

  const json& classes = require(doc, "classes", source, "");
  const json& attributes = require(doc, "attributes", source, "");
  const json& associations = require(doc, "associations", source, "");
  if (!classes.is_array() || classes.empty()) field_error(source, "/classes", "expected a non-empty array");
  if (!attributes.is_array()) field_error(source, "/attributes", "expected an array");
  if (!associations.is_array()) field_error(source, "/associations", "expected an array");

  const auto num_classes = classes.size();
  std::vector<std::string> class_names(num_classes);
  std::vector<bool> is_base(num_classes);
  std::vector<std::vector<double>> class_sem(num_classes);
  std::vector<bool> seen(num_classes, false);
  std::size_t sem_dim = 0;

  for (std::size_t i = 0; i < num_classes; ++i) {
    const std::string ptr = "/classes/" + std::to_string(i);
    const json& entry = classes[i];
    const json& id_node = require(entry, "id", source, ptr);
    if (!id_node.is_number_integer()) field_error(source, ptr + "/id", "expected an integer");
    const auto id = id_node.get<long long>();
    if (id < 0 || static_cast<std::size_t>(id) >= num_classes) {
      field_error(source, ptr + "/id", "class ids must be 0.." + std::to_string(num_classes - 1));
    }
    if (seen[id]) field_error(source, ptr + "/id", "duplicate class id " + std::to_string(id));
    seen[id] = true;
    auto name_it = entry.find("name");
    class_names[id] = (name_it != entry.end() && name_it->is_string()) ? name_it->get<std::string>()
                                                                         : "class_" + std::to_string(id);
    const json& split = require(entry, "split", source, ptr);
    if (!split.is_string()) field_error(source, ptr + "/split", "expected \"base\" or \"novel\"");
    const auto split_text = split.get<std::string>();
    if (split_text != "base" && split_text != "novel") {
      field_error(source, ptr + "/split", "expected \"base\" or \"novel\", got \"" + split_text + "\"");
    }
    is_base[id] = split_text == "base";
    class_sem[id] = read_vector(require(entry, "semantic", source, ptr), source, ptr + "/semantic");
    if (sem_dim == 0) sem_dim = class_sem[id].size();
    if (class_sem[id].size() != sem_dim) {
      field_error(source, ptr + "/semantic",
                  "dimension " + std::to_string(class_sem[id].size()) + " != " + std::to_string(sem_dim));
    }
  }

  const auto num_attr_raw = attributes.size();
  std::vector<int> attr_ids(num_attr_raw);
  std::vector<std::string> attr_names(num_attr_raw);
  std::vector<std::vector<double>> attr_sem(num_attr_raw);
  std::map<long long, std::size_t> attr_index;
  for (std::size_t i = 0; i < num_attr_raw; ++i) {
    const std::string ptr = "/attributes/" + std::to_string(i);
    const json& entry = attributes[i];
    const json& id_node = require(entry, "id", source, ptr);
    if (!id_node.is_number_integer()) field_error(source, ptr + "/id", "expected an integer");
    const auto id = id_node.get<long long>();
    if (!attr_index.emplace(id, i).second) field_error(source, ptr + "/id", "duplicate attribute id");
    attr_ids[i] = static_cast<int>(id);
    auto name_it = entry.find("name");
    attr_names[i] = (name_it != entry.end() && name_it->is_string()) ? name_it->get<std::string>()
                                                                       : "attr_" + std::to_string(id);
    attr_sem[i] = read_vector(require(entry, "semantic", source, ptr), source, ptr + "/semantic");
    if (attr_sem[i].size() != sem_dim) {
      field_error(source, ptr + "/semantic",
                  "dimension " + std::to_string(attr_sem[i].size()) + " != " + std::to_string(sem_dim));
    }
  }

  std::vector<std::uint8_t> raw(num_classes * num_attr_raw, 0);
  for (std::size_t i = 0; i < associations.size(); ++i) {
    const std::string ptr = "/associations/" + std::to_string(i);
    const json& pair = associations[i];
    if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_integer() || !pair[1].is_number_integer()) {
      field_error(source, ptr, "expected [class_id, attribute_id]");
    }
    const auto k = pair[0].get<long long>();
    const auto a = pair[1].get<long long>();
    if (k < 0 || static_cast<std::size_t>(k) >= num_classes) field_error(source, ptr + "/0", "unknown class id");
    auto it = attr_index.find(a);
    if (it == attr_index.end()) field_error(source, ptr + "/1", "unknown attribute id");
    raw[static_cast<std::size_t>(k) * num_attr_raw + it->second] = 1;
  }

  // Attributes never carried by a base class cannot be transferred; drop them.
  std::vector<std::size_t> kept;
  for (std::size_t a = 0; a < num_attr_raw; ++a) {
    for (std::size_t k = 0; k < num_classes; ++k) {
      if (is_base[k] && raw[k * num_attr_raw + a]) {
        kept.push_back(a);
        break;
      }
    }
  }

  PrimitiveKnowledge out;
  out.class_names = std::move(class_names);
  out.class_is_base = std::move(is_base);
  out.class_semantics.resize(static_cast<Eigen::Index>(num_classes), static_cast<Eigen::Index>(sem_dim));
  for (std::size_t k = 0; k < num_classes; ++k) {
    for (std::size_t j = 0; j < sem_dim; ++j) out.class_semantics(k, j) = class_sem[k][j];
  }
  out.attribute_semantics.resize(static_cast<Eigen::Index>(kept.size()), static_cast<Eigen::Index>(sem_dim));
  for (std::size_t i = 0; i < kept.size(); ++i) {
    out.attribute_ids.push_back(attr_ids[kept[i]]);
    out.attribute_names.push_back(attr_names[kept[i]]);
    for (std::size_t j = 0; j < sem_dim; ++j) out.attribute_semantics(i, j) = attr_sem[kept[i]][j];
  }
  out.association.assign(num_classes * kept.size(), 0);
  for (std::size_t k = 0; k < num_classes; ++k) {
    for (std::size_t i = 0; i < kept.size(); ++i) out.association[k * kept.size() + i] = raw[k * num_attr_raw + kept[i]];
  }
  out.validate();
  return out;
}

PrimitiveKnowledge load_knowledge(const std::filesystem::path& path) {
  return parse_knowledge(read_file(path), path.string());
}

std::string knowledge_to_json(const PrimitiveKnowledge& knowledge) {
  json doc;
  json classes = json::array();
  for (int k = 0; k < knowledge.num_classes(); ++k) {
    const Vector sem = knowledge.class_semantics.row(k).transpose();
    classes.push_back({{"id", k},
                       {"name", knowledge.class_names[k]},
                       {"semantic", std::vector<double>(sem.data(), sem.data() + sem.size())},
                       {"split", knowledge.class_is_base[k] ? "base" : "novel"}});
  }
  json attributes = json::array();
  for (int a = 0; a < knowledge.num_attributes(); ++a) {
    const Vector sem = knowledge.attribute_semantics.row(a).transpose();
    attributes.push_back({{"id", knowledge.attribute_ids[a]},
                          {"name", knowledge.attribute_names[a]},
                          {"semantic", std::vector<double>(sem.data(), sem.data() + sem.size())}});
  }
  json assoc = json::array();
  for (int k = 0; k < knowledge.num_classes(); ++k) {
    for (int a : knowledge.attributes_of(k)) assoc.push_back({k, knowledge.attribute_ids[a]});
  }
  doc["classes"] = std::move(classes);
  doc["attributes"] = std::move(attributes);
  doc["associations"] = std::move(assoc);
  return doc.dump(1) + "\n";
}

bool ClassPrototypeTable::contains(int class_id) const {
  return std::binary_search(class_ids.begin(), class_ids.end(), class_id);
}

Vector ClassPrototypeTable::prototype(int class_id) const {
  auto it = std::lower_bound(class_ids.begin(), class_ids.end(), class_id);
  if (it == class_ids.end() || *it != class_id) {
    throw ValidationError("no base prototype for class " + std::to_string(class_id));
  }
  return prototypes.row(it - class_ids.begin()).transpose();
}

ClassPrototypeTable compute_base_prototypes(const FewShotDataset& base) {
  base.validate();
  const auto groups = base.indices_by_class();
  ClassPrototypeTable table;
  table.prototypes.resize(static_cast<Eigen::Index>(groups.size()), base.dim());
  Eigen::Index row = 0;
  for (const auto& [class_id, indices] : groups) {
    Vector sum = Vector::Zero(base.dim());
    for (auto i : indices) sum += base.row(i);
    table.class_ids.push_back(class_id);
    table.sample_count.push_back(indices.size());
    table.prototypes.row(row++) = (sum / static_cast<double>(indices.size())).transpose();
  }
  return table;
}

AttributeStats compute_attribute_stats(const FewShotDataset& base, const PrimitiveKnowledge& knowledge) {
  base.validate();
  knowledge.validate();
  const int f = knowledge.num_attributes();
  const int d = base.dim();
  const auto groups = base.indices_by_class();

  // Base classes with samples, per attribute.
  std::vector<std::vector<const std::vector<std::size_t>*>> members(f);
  for (const auto& [class_id, indices] : groups) {
    if (!knowledge.has_class(class_id) || !knowledge.class_is_base[class_id]) continue;
    for (int a : knowledge.attributes_of(class_id)) members[a].push_back(&indices);
  }

  std::vector<int> empty;
  for (int a = 0; a < f; ++a) {
    if (members[a].empty()) empty.push_back(knowledge.attribute_ids[a]);
  }
  if (!empty.empty()) {
    std::ostringstream msg;
    msg << "attributes without base-class support:";
    for (int id : empty) msg << ' ' << id;
    throw ValidationError(msg.str());
  }

  AttributeStats stats;
  stats.mean = RowMatrix::Zero(f, d);
  stats.stddev = RowMatrix::Zero(f, d);
  stats.support_count.assign(f, 0);
  for (int a = 0; a < f; ++a) {
    Vector sum = Vector::Zero(d);
    std::size_t n = 0;
    for (const auto* indices : members[a]) {
      for (auto i : *indices) sum += base.row(i);
      n += indices->size();
    }
    const Vector mean = sum / static_cast<double>(n);
    Vector sq = Vector::Zero(d);
    for (const auto* indices : members[a]) {
      for (auto i : *indices) sq += (base.row(i) - mean).array().square().matrix();
    }
    stats.mean.row(a) = mean.transpose();
    stats.stddev.row(a) = (sq / static_cast<double>(n)).array().sqrt().matrix().transpose();
    stats.support_count[a] = n;
  }
  return stats;
}

PrimitiveKnowledge inject_knowledge_noise(const PrimitiveKnowledge& knowledge, double level, std::uint64_t seed) {
  if (!(level >= 0.0 && level <= 1.0)) {
    throw ValidationError("knowledge noise level must lie in [0, 1], got " + std::to_string(level));
  }
  PrimitiveKnowledge out = knowledge;
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (auto& entry : out.association) {
    if (unit(rng) < level) entry = entry ? 0 : 1;
  }
  return out;
}

VarianceReport cluster_variance_report(const FewShotDataset& data) {
  data.validate();
  VarianceReport report;
  double total = 0.0;
  for (const auto& [class_id, indices] : data.indices_by_class()) {
    if (indices.size() < 2) {
      ++report.skipped;
      continue;
    }
    Vector mean = Vector::Zero(data.dim());
    for (auto i : indices) mean += data.row(i);
    mean /= static_cast<double>(indices.size());
    Vector sq = Vector::Zero(data.dim());
    for (auto i : indices) sq += (data.row(i) - mean).array().square().matrix();
    const double v = sq.mean() / static_cast<double>(indices.size());
    report.class_ids.push_back(class_id);
    report.per_class.push_back(v);
    total += v;
  }
  if (!report.per_class.empty()) report.averaged = total / static_cast<double>(report.per_class.size());
  return report;
}

}  // namespace protofuse
