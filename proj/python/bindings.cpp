#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "protofuse/datagen.hpp"
#include "protofuse/episodes.hpp"
#include "protofuse/fusion.hpp"
#include "protofuse/knowledge.hpp"
#include "protofuse/protocomnet.hpp"

namespace py = pybind11;
using namespace protofuse;

namespace {

FewShotDataset make_dataset(RowMatrix embeddings, std::vector<int> labels, const std::string& split) {
  FewShotDataset d{std::move(embeddings), std::move(labels), split_from_string(split)};
  d.validate();
  return d;
}

py::dict fusion_dict(const FusionResult& r) {
  py::dict out;
  out["fused"] = r.fused;
  out["responsibilities"] = r.mean_assignment.responsibility;
  out["responsibilities_completed"] = r.completed_assignment.responsibility;
  auto means = [](const std::vector<DiagonalGaussian>& gs) {
    RowMatrix m(static_cast<Eigen::Index>(gs.size()), gs.empty() ? 0 : gs[0].dim());
    RowMatrix v(m.rows(), m.cols());
    for (std::size_t k = 0; k < gs.size(); ++k) {
      m.row(static_cast<Eigen::Index>(k)) = gs[k].mean.transpose();
      v.row(static_cast<Eigen::Index>(k)) = gs[k].variance.transpose();
    }
    return std::make_pair(m, v);
  };
  const auto [mu, var] = means(r.mean_based);
  const auto [mu_hat, var_hat] = means(r.completed);
  out["mu"] = mu;
  out["var"] = var;
  out["mu_hat"] = mu_hat;
  out["var_hat"] = var_hat;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Prototype completion network and Gaussian prototype fusion";

  auto base_error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base_error.ptr());
  py::register_exception<NumericError>(m, "NumericError", base_error.ptr());

  py::class_<FewShotDataset>(m, "FewShotDataset")
      .def(py::init(&make_dataset), py::arg("embeddings"), py::arg("labels"), py::arg("split") = "base")
      .def_readonly("embeddings", &FewShotDataset::embeddings)
      .def_readonly("labels", &FewShotDataset::labels)
      .def_property_readonly("split", [](const FewShotDataset& d) { return std::string(to_string(d.split)); })
      .def_property_readonly("dim", &FewShotDataset::dim)
      .def("classes", &FewShotDataset::classes)
      .def("__len__", &FewShotDataset::size);

  py::class_<PrimitiveKnowledge>(m, "PrimitiveKnowledge")
      .def_static("from_json", [](const std::string& text) { return parse_knowledge(text); })
      .def_static("load", &load_knowledge)
      .def("to_json", &knowledge_to_json)
      .def_property_readonly("num_classes", &PrimitiveKnowledge::num_classes)
      .def_property_readonly("num_attributes", &PrimitiveKnowledge::num_attributes)
      .def_property_readonly("semantic_dim", &PrimitiveKnowledge::semantic_dim)
      .def_readonly("class_names", &PrimitiveKnowledge::class_names)
      .def_readonly("attribute_names", &PrimitiveKnowledge::attribute_names)
      .def("attributes_of", &PrimitiveKnowledge::attributes_of)
      .def("base_class_ids", &PrimitiveKnowledge::base_class_ids)
      .def("novel_class_ids", &PrimitiveKnowledge::novel_class_ids);

  py::class_<AttributeStats>(m, "AttributeStats")
      .def_readonly("mean", &AttributeStats::mean)
      .def_readonly("stddev", &AttributeStats::stddev)
      .def_readonly("support_count", &AttributeStats::support_count);

  py::class_<ClassPrototypeTable>(m, "ClassPrototypeTable")
      .def_readonly("class_ids", &ClassPrototypeTable::class_ids)
      .def_readonly("prototypes", &ClassPrototypeTable::prototypes);

  m.def("compute_attribute_stats", &compute_attribute_stats, py::arg("base"), py::arg("knowledge"));
  m.def("compute_base_prototypes", &compute_base_prototypes, py::arg("base"));

  py::class_<WorldSpec>(m, "WorldSpec")
      .def(py::init([](std::uint64_t seed) { return WorldSpec{.seed = seed}; }), py::arg("seed") = 0)
      .def_readwrite("embed_dim", &WorldSpec::embed_dim)
      .def_readwrite("semantic_dim", &WorldSpec::semantic_dim)
      .def_readwrite("num_base_classes", &WorldSpec::num_base_classes)
      .def_readwrite("num_novel_classes", &WorldSpec::num_novel_classes)
      .def_readwrite("num_attributes", &WorldSpec::num_attributes)
      .def_readwrite("min_attributes_per_class", &WorldSpec::min_attributes_per_class)
      .def_readwrite("max_attributes_per_class", &WorldSpec::max_attributes_per_class)
      .def_readwrite("samples_per_class", &WorldSpec::samples_per_class)
      .def_readwrite("noise_std", &WorldSpec::noise_std)
      .def_readwrite("novel_noise_std", &WorldSpec::novel_noise_std)
      .def_readwrite("dropout_rate", &WorldSpec::dropout_rate)
      .def_readwrite("class_offset_std", &WorldSpec::class_offset_std)
      .def_readwrite("semantic_noise_std", &WorldSpec::semantic_noise_std)
      .def_readwrite("seed", &WorldSpec::seed)
      .def("to_json", &world_spec_to_json);

  py::class_<World>(m, "World")
      .def_readonly("spec", &World::spec)
      .def_readonly("base", &World::base)
      .def_readonly("novel", &World::novel)
      .def_readonly("knowledge", &World::knowledge)
      .def_readonly("true_centers", &World::true_centers);

  py::class_<LoadedWorld>(m, "LoadedWorld")
      .def_readonly("base", &LoadedWorld::base)
      .def_readonly("novel", &LoadedWorld::novel)
      .def_readonly("knowledge", &LoadedWorld::knowledge)
      .def_readonly("true_centers", &LoadedWorld::true_centers);

  m.def("generate_world", &generate_world, py::arg("spec"));
  m.def(
      "save_world",
      [](const World& w, const std::filesystem::path& dir, const std::string& dtype) {
        if (dtype != "f64le" && dtype != "f32le") throw ValidationError("payload dtype must be f64le or f32le");
        save_world(w, dir, dtype == "f32le" ? PayloadType::kF32 : PayloadType::kF64);
      },
      py::arg("world"), py::arg("dir"), py::arg("dtype") = "f64le");
  m.def("load_world", &load_world, py::arg("dir"));
  m.def("sha256_hex", [](py::bytes b) { return sha256_hex(std::string(b)); });

  m.def("cosine", &cosine);
  m.def("classify", &classify, py::arg("query"), py::arg("prototypes"), py::arg("scale"));

  py::class_<DiagonalGaussian>(m, "DiagonalGaussian")
      .def(py::init([](Vector mean, Vector variance, double floor) {
             return DiagonalGaussian::make(std::move(mean), std::move(variance), floor);
           }),
           py::arg("mean"), py::arg("variance"), py::arg("floor") = kDefaultVarianceFloor)
      .def_readonly("mean", &DiagonalGaussian::mean)
      .def_readonly("variance", &DiagonalGaussian::variance);

  m.def("gaussian_product", &gaussian_product, py::arg("prior"), py::arg("likelihood"));
  m.def(
      "soft_assign",
      [](const RowMatrix& x, const RowMatrix& p, const std::vector<int>& labels, double lambda) {
        return soft_assign(x, p, labels, lambda).responsibility;
      },
      py::arg("samples"), py::arg("prototypes"), py::arg("labels"), py::arg("lam") = kDefaultLambda);
  m.def(
      "fuse_prototypes",
      [](const RowMatrix& x, const std::vector<int>& labels, const RowMatrix& mean, const RowMatrix& completed,
         double lambda, double floor) {
        return fusion_dict(fuse_prototypes(x, labels, mean, completed, FusionConfig{lambda, floor}));
      },
      py::arg("samples"), py::arg("labels"), py::arg("mean_prototypes"), py::arg("completed_prototypes"),
      py::arg("lam") = kDefaultLambda, py::arg("variance_floor") = kDefaultVarianceFloor);

  py::class_<Architecture>(m, "Architecture")
      .def(py::init([](int embed_dim, int semantic_dim, int latent_dim, int aggregator_hidden, int decoder_hidden) {
             Architecture a{embed_dim, semantic_dim, latent_dim, aggregator_hidden, decoder_hidden};
             a.validate();
             return a;
           }),
           py::arg("embed_dim"), py::arg("semantic_dim") = 300, py::arg("latent_dim") = 256,
           py::arg("aggregator_hidden") = 300, py::arg("decoder_hidden") = 512)
      .def_readonly("embed_dim", &Architecture::embed_dim)
      .def_readonly("semantic_dim", &Architecture::semantic_dim)
      .def_readonly("latent_dim", &Architecture::latent_dim)
      .def_readonly("aggregator_hidden", &Architecture::aggregator_hidden)
      .def_readonly("decoder_hidden", &Architecture::decoder_hidden);

  py::class_<ProtoComNet>(m, "ProtoComNet")
      .def(py::init<const Architecture&, std::uint64_t, double>(), py::arg("arch"), py::arg("seed") = 0,
           py::arg("initial_scale") = 10.0)
      .def_property_readonly("architecture", &ProtoComNet::architecture)
      .def_property_readonly("scale", &ProtoComNet::scale)
      .def("save", [](const ProtoComNet& net, const std::filesystem::path& p) { nn::save_checkpoint(net.params(), p); })
      .def("load", [](ProtoComNet& net, const std::filesystem::path& p) { nn::load_checkpoint(p, net.params()); })
      .def(
          "complete",
          [](const ProtoComNet& net, const PrimitiveKnowledge& kb, const AttributeStats& stats, int class_id,
             const Vector& prototype) {
            Rng rng(0);
            return complete_prototype(net, kb, stats, class_id, prototype, Mode::kTest, rng);
          },
          py::arg("knowledge"), py::arg("stats"), py::arg("class_id"), py::arg("prototype"));

  m.def(
      "train_completion",
      [](ProtoComNet& net, const FewShotDataset& base, const PrimitiveKnowledge& kb, int epochs, double lr,
         int k_shot, std::size_t tasks_per_epoch, std::size_t batch_size, std::uint64_t seed) {
        CompletionTrainConfig cfg;
        cfg.sgd.epochs = epochs;
        cfg.sgd.learning_rate = lr;
        cfg.k_shot = k_shot;
        cfg.tasks_per_epoch = tasks_per_epoch;
        cfg.batch_size = batch_size;
        cfg.seed = seed;
        const auto stats = compute_attribute_stats(base, kb);
        const auto protos = compute_base_prototypes(base);
        py::gil_scoped_release release;
        return train_completion(net, kb, stats, base, protos, cfg).epoch_loss;
      },
      py::arg("net"), py::arg("base"), py::arg("knowledge"), py::arg("epochs") = 100, py::arg("lr") = 1e-2,
      py::arg("k_shot") = 1, py::arg("tasks_per_epoch") = 0, py::arg("batch_size") = 1, py::arg("seed") = 0);

  m.def(
      "meta_train",
      [](ProtoComNet& net, const FewShotDataset& base, const PrimitiveKnowledge& kb, int epochs, double lr,
         int n_way, int k_shot, int queries, std::size_t episodes_per_epoch, double lambda, std::uint64_t seed) {
        MetaTrainConfig cfg;
        cfg.sgd.epochs = epochs;
        cfg.sgd.learning_rate = lr;
        cfg.n_way = n_way;
        cfg.k_shot = k_shot;
        cfg.queries_per_class = queries;
        cfg.episodes_per_epoch = episodes_per_epoch;
        cfg.fusion.lambda = lambda;
        cfg.seed = seed;
        const auto stats = compute_attribute_stats(base, kb);
        py::gil_scoped_release release;
        return meta_train(net, base, kb, stats, cfg).epoch_loss;
      },
      py::arg("net"), py::arg("base"), py::arg("knowledge"), py::arg("epochs") = 40, py::arg("lr") = 1e-4,
      py::arg("n_way") = 5, py::arg("k_shot") = 1, py::arg("queries") = 15, py::arg("episodes_per_epoch") = 100,
      py::arg("lam") = kDefaultLambda, py::arg("seed") = 0);

  py::class_<EvalConfig>(m, "EvalConfig")
      .def(py::init([](const std::string& mode, int n_way, int k_shot, int queries, std::size_t episodes,
                       std::uint64_t seed, unsigned threads, double lambda, double floor) {
             return EvalConfig{prototype_mode_from_string(mode), n_way, k_shot, queries, episodes, seed, threads,
                               FusionConfig{lambda, floor}};
           }),
           py::arg("mode") = "gauss-fusion", py::arg("n_way") = 5, py::arg("k_shot") = 1, py::arg("queries") = 15,
           py::arg("episodes") = 600, py::arg("seed") = 0, py::arg("threads") = 0, py::arg("lam") = kDefaultLambda,
           py::arg("variance_floor") = kDefaultVarianceFloor)
      .def_property_readonly("mode", [](const EvalConfig& c) { return std::string(to_string(c.mode)); })
      .def_readonly("n_way", &EvalConfig::n_way)
      .def_readonly("k_shot", &EvalConfig::k_shot)
      .def_readonly("episodes", &EvalConfig::episodes)
      .def_readonly("seed", &EvalConfig::seed);

  py::class_<EvalReport>(m, "EvalReport")
      .def_property_readonly("mode", [](const EvalReport& r) { return std::string(to_string(r.mode)); })
      .def_readonly("per_episode", &EvalReport::per_episode)
      .def_readonly("mean_accuracy", &EvalReport::mean_accuracy)
      .def_readonly("ci95", &EvalReport::ci95)
      .def("to_json", &EvalReport::to_json);

  m.def(
      "evaluate",
      [](const ProtoComNet& net, const FewShotDataset& data, const PrimitiveKnowledge& kb, const AttributeStats& stats,
         const EvalConfig& cfg) {
        py::gil_scoped_release release;
        return evaluate(net, data, kb, stats, cfg);
      },
      py::arg("net"), py::arg("data"), py::arg("knowledge"), py::arg("stats"), py::arg("config"));
}
