// protofuse: command-line driver for world generation, completion training,
// meta-training, evaluation and the diagnostic reports.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "protofuse/datagen.hpp"
#include "protofuse/episodes.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace protofuse;

namespace {

struct WorldInputs {
  std::string world_dir;
  std::string knowledge_path;
};

struct LoadedInputs {
  LoadedWorld world;
  AttributeStats stats;
};

LoadedInputs load_inputs(const WorldInputs& in) {
  LoadedInputs out;
  out.world = load_world(in.world_dir);
  if (!in.knowledge_path.empty()) out.world.knowledge = load_knowledge(in.knowledge_path);
  out.stats = compute_attribute_stats(out.world.base, out.world.knowledge);
  return out;
}

void require_new(const fs::path& path, bool overwrite) {
  if (!overwrite && fs::exists(path)) {
    throw Error("output '" + path.string() + "' exists; pass --overwrite to replace it");
  }
}

fs::path sidecar_path(const fs::path& checkpoint) {
  auto p = checkpoint;
  p += ".json";
  return p;
}

json architecture_json(const Architecture& a) {
  return {{"embed_dim", a.embed_dim},
          {"semantic_dim", a.semantic_dim},
          {"latent_dim", a.latent_dim},
          {"aggregator_hidden", a.aggregator_hidden},
          {"decoder_hidden", a.decoder_hidden}};
}

struct LoadedModel {
  ProtoComNet net;
  json sidecar;
};

LoadedModel load_model(const fs::path& checkpoint) {
  json sidecar;
  try {
    sidecar = json::parse(read_file(sidecar_path(checkpoint)));
  } catch (const json::exception& e) {
    throw ValidationError(sidecar_path(checkpoint).string() + ": " + e.what());
  }
  Architecture arch;
  try {
    const auto& a = sidecar.at("architecture");
    arch.embed_dim = a.at("embed_dim").get<int>();
    arch.semantic_dim = a.at("semantic_dim").get<int>();
    arch.latent_dim = a.at("latent_dim").get<int>();
    arch.aggregator_hidden = a.at("aggregator_hidden").get<int>();
    arch.decoder_hidden = a.at("decoder_hidden").get<int>();
  } catch (const json::exception& e) {
    throw ValidationError(sidecar_path(checkpoint).string() + ": bad architecture block: " + e.what());
  }
  LoadedModel model{ProtoComNet(arch, 0), std::move(sidecar)};
  nn::load_checkpoint(checkpoint, model.net.params());
  return model;
}

void save_model(const ProtoComNet& net, const fs::path& checkpoint, json training, json history) {
  json sidecar;
  sidecar["format"] = "PCN1";
  sidecar["architecture"] = architecture_json(net.architecture());
  sidecar["scale_gamma"] = net.scale();
  sidecar["training"] = std::move(training);
  sidecar["history"] = std::move(history);
  nn::save_checkpoint(net.params(), checkpoint);
  write_file_atomic(sidecar_path(checkpoint), sidecar.dump(1) + "\n");
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

const FewShotDataset& pick_split(const LoadedWorld& world, const std::string& split) {
  if (split == "base") return world.base;
  if (split == "novel") return world.novel;
  throw ValidationError("unknown split '" + split + "' (expected base or novel)");
}

struct EvalFlags {
  std::string mode = "gauss-fusion";
  int n_way = 5;
  int k_shot = 1;
  int queries = 15;
  std::size_t episodes = 600;
  std::uint64_t seed = 0;
  double lambda = kDefaultLambda;
  double variance_floor = kDefaultVarianceFloor;
  unsigned threads = 0;
  std::string split = "novel";

  [[nodiscard]] EvalConfig config() const {
    EvalConfig c;
    c.mode = prototype_mode_from_string(mode);
    c.n_way = n_way;
    c.k_shot = k_shot;
    c.queries_per_class = queries;
    c.episodes = episodes;
    c.seed = seed;
    c.threads = threads;
    c.fusion.lambda = lambda;
    c.fusion.variance_floor = variance_floor;
    return c;
  }
};

void add_eval_flags(CLI::App* cmd, EvalFlags& f, bool with_mode) {
  if (with_mode) {
    cmd->add_option("--mode", f.mode, "mean-only | completed-only | mean-fusion | gauss-fusion")
        ->check(CLI::IsMember({"mean-only", "completed-only", "mean-fusion", "gauss-fusion"}));
  }
  cmd->add_option("--n-way", f.n_way, "Classes per episode")->check(CLI::PositiveNumber);
  cmd->add_option("--k-shot", f.k_shot, "Support samples per class")->check(CLI::PositiveNumber);
  cmd->add_option("--queries", f.queries, "Query samples per class")->check(CLI::NonNegativeNumber);
  cmd->add_option("--episodes", f.episodes, "Number of episodes");
  cmd->add_option("--seed", f.seed, "Master seed")->required();
  cmd->add_option("--lambda", f.lambda, "Soft-assignment sharpness")->check(CLI::PositiveNumber);
  cmd->add_option("--variance-floor", f.variance_floor, "Fusion variance floor")->check(CLI::PositiveNumber);
  cmd->add_option("--threads", f.threads, "Worker threads (0: PROTOFUSE_THREADS or all cores)");
  cmd->add_option("--split", f.split, "Evaluation split")->check(CLI::IsMember({"novel", "base"}));
}

std::string report_table(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  out << "mode             n-way  k-shot  episodes  accuracy  ci95\n";
  for (const auto& r : reports) {
    char line[160];
    std::snprintf(line, sizeof line, "%-16s %5d  %6d  %8zu  %7s%%  %s%%\n", std::string(to_string(r.mode)).c_str(),
                  r.n_way, r.k_shot, r.episodes, percent(r.mean_accuracy).c_str(), percent(r.ci95).c_str());
    out << line;
  }
  return out.str();
}

json report_json(const EvalReport& r) { return json::parse(r.to_json()); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype completion and Gaussian fusion for few-shot classification"};
  app.require_subcommand(1);
  app.fallthrough();
  bool overwrite = false;
  app.add_flag("--overwrite", overwrite, "Replace existing output files");

  // gen
  WorldSpec spec;
  std::string gen_out;
  std::string payload_dtype = "f64le";
  auto* gen = app.add_subcommand("gen", "Generate a synthetic embedding world");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", spec.seed, "Generator seed")->required();
  gen->add_option("--embed-dim", spec.embed_dim);
  gen->add_option("--semantic-dim", spec.semantic_dim);
  gen->add_option("--base-classes", spec.num_base_classes);
  gen->add_option("--novel-classes", spec.num_novel_classes);
  gen->add_option("--attributes", spec.num_attributes);
  gen->add_option("--min-attributes", spec.min_attributes_per_class);
  gen->add_option("--max-attributes", spec.max_attributes_per_class);
  gen->add_option("--samples-per-class", spec.samples_per_class);
  gen->add_option("--noise-std", spec.noise_std);
  gen->add_option("--novel-noise-std", spec.novel_noise_std, "Defaults to --noise-std");
  gen->add_option("--dropout", spec.dropout_rate, "Probability a sample loses each attribute component");
  gen->add_option("--class-offset-std", spec.class_offset_std);
  gen->add_option("--semantic-noise-std", spec.semantic_noise_std);
  gen->add_option("--payload-dtype", payload_dtype)->check(CLI::IsMember({"f64le", "f32le"}));

  // train-completion
  WorldInputs tc_in;
  std::string tc_out;
  CompletionTrainConfig tc;
  Architecture tc_arch;
  std::uint64_t tc_seed = 0;
  auto* train = app.add_subcommand("train-completion", "Train the completion network on base-class tasks");
  train->add_option("--world", tc_in.world_dir, "World directory")->required();
  train->add_option("--knowledge", tc_in.knowledge_path, "Override the world's knowledge.json");
  train->add_option("--out", tc_out, "Checkpoint path")->required();
  train->add_option("--seed", tc_seed, "Seed for initialization and task sampling")->required();
  train->add_option("--epochs", tc.sgd.epochs);
  train->add_option("--lr", tc.sgd.learning_rate)->check(CLI::PositiveNumber);
  train->add_option("--momentum", tc.sgd.momentum);
  train->add_option("--weight-decay", tc.sgd.weight_decay);
  train->add_option("--k-shot", tc.k_shot)->check(CLI::PositiveNumber);
  train->add_option("--tasks-per-epoch", tc.tasks_per_epoch, "0: 4x number of base classes");
  train->add_option("--batch-size", tc.batch_size)->check(CLI::PositiveNumber);
  train->add_option("--latent-dim", tc_arch.latent_dim);
  train->add_option("--aggregator-hidden", tc_arch.aggregator_hidden);
  train->add_option("--decoder-hidden", tc_arch.decoder_hidden);
  double gamma0 = 10.0;
  train->add_option("--gamma0", gamma0, "Initial classifier scale")->check(CLI::PositiveNumber);

  // meta-train
  WorldInputs mt_in;
  std::string mt_checkpoint;
  std::string mt_out;
  MetaTrainConfig mt;
  auto* meta = app.add_subcommand("meta-train", "Fine-tune the completion network and scale on base episodes");
  meta->add_option("--world", mt_in.world_dir)->required();
  meta->add_option("--knowledge", mt_in.knowledge_path);
  meta->add_option("--checkpoint", mt_checkpoint, "Input checkpoint")->required();
  meta->add_option("--out", mt_out, "Output checkpoint")->required();
  meta->add_option("--seed", mt.seed)->required();
  meta->add_option("--epochs", mt.sgd.epochs);
  meta->add_option("--lr", mt.sgd.learning_rate)->check(CLI::PositiveNumber);
  meta->add_option("--momentum", mt.sgd.momentum);
  meta->add_option("--weight-decay", mt.sgd.weight_decay);
  meta->add_option("--n-way", mt.n_way)->check(CLI::PositiveNumber);
  meta->add_option("--k-shot", mt.k_shot)->check(CLI::PositiveNumber);
  meta->add_option("--queries", mt.queries_per_class)->check(CLI::PositiveNumber);
  meta->add_option("--episodes-per-epoch", mt.episodes_per_epoch);
  meta->add_option("--lambda", mt.fusion.lambda)->check(CLI::PositiveNumber);

  // eval
  WorldInputs ev_in;
  std::string ev_checkpoint;
  std::string ev_report;
  EvalFlags ev;
  auto* eval = app.add_subcommand("eval", "Evaluate one prototype mode on sampled episodes");
  eval->add_option("--world", ev_in.world_dir)->required();
  eval->add_option("--knowledge", ev_in.knowledge_path);
  eval->add_option("--checkpoint", ev_checkpoint)->required();
  eval->add_option("--report", ev_report, "EvalReport JSON output");
  add_eval_flags(eval, ev, true);

  // ablate
  WorldInputs ab_in;
  std::string ab_checkpoint;
  std::string ab_report;
  EvalFlags ab;
  auto* ablate = app.add_subcommand("ablate", "Evaluate all four prototype modes on the same episodes");
  ablate->add_option("--world", ab_in.world_dir)->required();
  ablate->add_option("--knowledge", ab_in.knowledge_path);
  ablate->add_option("--checkpoint", ab_checkpoint)->required();
  ablate->add_option("--report", ab_report, "JSON output with one EvalReport per mode");
  add_eval_flags(ablate, ab, false);

  // noise-sweep
  WorldInputs ns_in;
  std::string ns_checkpoint;
  std::string ns_report;
  std::vector<double> ns_levels{0.0, 0.1, 0.2, 0.3};
  std::uint64_t ns_noise_seed = 0;
  EvalFlags ns;
  auto* sweep = app.add_subcommand("noise-sweep", "Accuracy under knowledge noise, with and without Gaussian fusion");
  sweep->add_option("--world", ns_in.world_dir)->required();
  sweep->add_option("--knowledge", ns_in.knowledge_path);
  sweep->add_option("--checkpoint", ns_checkpoint)->required();
  sweep->add_option("--report", ns_report);
  sweep->add_option("--gamma-noise", ns_levels, "Noise levels (comma separated)")->delimiter(',');
  sweep->add_option("--noise-seed", ns_noise_seed, "Seed for knowledge corruption");
  add_eval_flags(sweep, ns, false);

  // report
  WorldInputs rp_in;
  std::string rp_checkpoint;
  std::string rp_report;
  std::string rp_csv;
  std::string rp_centers = "class-mean";
  std::size_t rp_window = 50;
  EvalFlags rp;
  rp.episodes = 1000;
  auto* report = app.add_subcommand("report", "Prototype similarity table and rank curve");
  report->add_option("--world", rp_in.world_dir)->required();
  report->add_option("--knowledge", rp_in.knowledge_path);
  report->add_option("--checkpoint", rp_checkpoint)->required();
  report->add_option("--report", rp_report, "Similarity JSON output");
  report->add_option("--csv", rp_csv, "Rank curve CSV output");
  report->add_option("--centers", rp_centers, "class-mean | generator")->check(CLI::IsMember({"class-mean", "generator"}));
  report->add_option("--window", rp_window, "Moving-average window")->check(CLI::PositiveNumber);
  add_eval_flags(report, rp, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const fs::path dir = gen_out;
      require_new(dir / "world.json", overwrite);
      const World world = generate_world(spec);
      const auto dtype = payload_dtype == "f32le" ? PayloadType::kF32 : PayloadType::kF64;
      save_world(world, dir, dtype);
      const auto base_var = cluster_variance_report(world.base);
      const auto novel_var = cluster_variance_report(world.novel);
      std::cout << "world written to " << dir.string() << "\n"
                << "base:  " << world.base.size() << " samples, " << spec.num_base_classes
                << " classes, averaged variance " << fixed(base_var.averaged, 5) << "\n"
                << "novel: " << world.novel.size() << " samples, " << spec.num_novel_classes
                << " classes, averaged variance " << fixed(novel_var.averaged, 5) << "\n";
    } else if (*train) {
      require_new(tc_out, overwrite);
      auto in = load_inputs(tc_in);
      tc_arch.embed_dim = in.world.base.dim();
      tc_arch.semantic_dim = in.world.knowledge.semantic_dim();
      tc.seed = split_seed(tc_seed, 1);
      ProtoComNet net(tc_arch, split_seed(tc_seed, 0), gamma0);
      const auto table = compute_base_prototypes(in.world.base);
      const auto history = train_completion(net, in.world.knowledge, in.stats, in.world.base, table, tc);
      json training{{"phase", "completion"},
                    {"seed", tc_seed},
                    {"epochs", tc.sgd.epochs},
                    {"learning_rate", tc.sgd.learning_rate},
                    {"momentum", tc.sgd.momentum},
                    {"weight_decay", tc.sgd.weight_decay},
                    {"k_shot", tc.k_shot},
                    {"batch_size", tc.batch_size},
                    {"losses", history.epoch_loss}};
      save_model(net, tc_out, training, json::array());
      std::cout << "completion training: " << history.epoch_loss.size() << " epochs";
      if (!history.epoch_loss.empty()) {
        std::cout << ", loss " << fixed(history.epoch_loss.front(), 6) << " -> " << fixed(history.epoch_loss.back(), 6);
      }
      std::cout << "\ncheckpoint written to " << tc_out << "\n";
    } else if (*meta) {
      require_new(mt_out, overwrite);
      auto in = load_inputs(mt_in);
      auto model = load_model(mt_checkpoint);
      const auto history = meta_train(model.net, in.world.base, in.world.knowledge, in.stats, mt);
      json previous = model.sidecar.value("history", json::array());
      previous.push_back(model.sidecar.value("training", json::object()));
      json training{{"phase", "meta"},
                    {"seed", mt.seed},
                    {"epochs", mt.sgd.epochs},
                    {"learning_rate", mt.sgd.learning_rate},
                    {"momentum", mt.sgd.momentum},
                    {"weight_decay", mt.sgd.weight_decay},
                    {"n_way", mt.n_way},
                    {"k_shot", mt.k_shot},
                    {"queries", mt.queries_per_class},
                    {"episodes_per_epoch", mt.episodes_per_epoch},
                    {"lambda", mt.fusion.lambda},
                    {"losses", history.epoch_loss}};
      save_model(model.net, mt_out, training, previous);
      std::cout << "meta-training: " << history.epoch_loss.size() << " epochs";
      if (!history.epoch_loss.empty()) {
        std::cout << ", loss " << fixed(history.epoch_loss.front()) << " -> " << fixed(history.epoch_loss.back());
      }
      std::cout << ", scale " << fixed(model.net.scale()) << "\ncheckpoint written to " << mt_out << "\n";
    } else if (*eval) {
      if (!ev_report.empty()) require_new(ev_report, overwrite);
      auto in = load_inputs(ev_in);
      auto model = load_model(ev_checkpoint);
      const auto r = evaluate(model.net, pick_split(in.world, ev.split), in.world.knowledge, in.stats, ev.config());
      if (!ev_report.empty()) write_file_atomic(ev_report, r.to_json());
      std::cout << report_table({r});
    } else if (*ablate) {
      if (!ab_report.empty()) require_new(ab_report, overwrite);
      auto in = load_inputs(ab_in);
      auto model = load_model(ab_checkpoint);
      std::vector<EvalReport> reports;
      json rows = json::array();
      for (auto m : {PrototypeMode::kMeanOnly, PrototypeMode::kCompletedOnly, PrototypeMode::kMeanFusion,
                     PrototypeMode::kGaussFusion}) {
        auto cfg = ab.config();
        cfg.mode = m;
        reports.push_back(evaluate(model.net, pick_split(in.world, ab.split), in.world.knowledge, in.stats, cfg));
        rows.push_back(report_json(reports.back()));
      }
      if (!ab_report.empty()) write_file_atomic(ab_report, json{{"rows", rows}}.dump(1) + "\n");
      std::cout << report_table(reports);
    } else if (*sweep) {
      if (!ns_report.empty()) require_new(ns_report, overwrite);
      auto in = load_inputs(ns_in);
      auto model = load_model(ns_checkpoint);
      json rows = json::array();
      std::ostringstream table;
      table << "mode            ";
      for (double g : ns_levels) table << "  gamma=" << fixed(g, 2);
      table << "\n";
      for (auto m : {PrototypeMode::kCompletedOnly, PrototypeMode::kGaussFusion}) {
        char name[32];
        std::snprintf(name, sizeof name, "%-16s", std::string(to_string(m)).c_str());
        table << name;
        json accs = json::array();
        for (double g : ns_levels) {
          const auto noisy = inject_knowledge_noise(in.world.knowledge, g, ns_noise_seed);
          auto cfg = ns.config();
          cfg.mode = m;
          const auto r = evaluate(model.net, pick_split(in.world, ns.split), noisy, in.stats, cfg);
          accs.push_back({{"noise_gamma", g}, {"mean_acc", r.mean_accuracy}, {"ci95", r.ci95}});
          char cell[32];
          std::snprintf(cell, sizeof cell, "  %9s%%", percent(r.mean_accuracy).c_str());
          table << cell;
        }
        table << "\n";
        rows.push_back({{"mode", std::string(to_string(m))}, {"results", accs}});
      }
      if (!ns_report.empty()) {
        write_file_atomic(ns_report, json{{"noise_seed", ns_noise_seed}, {"seed", ns.seed}, {"rows", rows}}.dump(1) + "\n");
      }
      std::cout << table.str();
    } else if (*report) {
      if (!rp_report.empty()) require_new(rp_report, overwrite);
      if (!rp_csv.empty()) require_new(rp_csv, overwrite);
      auto in = load_inputs(rp_in);
      auto model = load_model(rp_checkpoint);
      const auto& data = pick_split(in.world, rp.split);
      std::map<int, Vector> centers;
      if (rp_centers == "generator") {
        if (in.world.true_centers.empty()) throw ValidationError("world has no generator centers (world.json)");
        centers = in.world.true_centers;
      } else {
        centers = class_means(data);
      }
      const auto sim = prototype_similarity_report(model.net, data, in.world.knowledge, in.stats, centers, rp.config());
      const auto curve = rank_curve_report(model.net, data, in.world.knowledge, in.stats, centers, rp_window);
      if (!rp_report.empty()) {
        json doc{{"episodes", sim.episodes},
                 {"n_way", rp.n_way},
                 {"k_shot", rp.k_shot},
                 {"seed", rp.seed},
                 {"centers", rp_centers},
                 {"cos_mean", sim.mean_based},
                 {"cos_completed", sim.completed},
                 {"cos_fused", sim.fused}};
        write_file_atomic(rp_report, doc.dump(1) + "\n");
      }
      if (!rp_csv.empty()) {
        std::ostringstream csv;
        csv << "rank,raw,completed\n";
        for (std::size_t r = 0; r < curve.raw.size(); ++r) {
          csv << r << ',' << fixed(curve.raw[r], 6) << ',' << fixed(curve.completed[r], 6) << '\n';
        }
        write_file_atomic(rp_csv, csv.str());
      }
      std::cout << "prototype          cosine to center (" << sim.episodes << " episodes)\n"
                << "mean-based         " << fixed(sim.mean_based) << "\n"
                << "completed          " << fixed(sim.completed) << "\n"
                << "gauss-fused        " << fixed(sim.fused) << "\n";
      if (curve.shortened_windows > 0) {
        std::cerr << "warning: " << curve.shortened_windows << " classes had fewer than " << rp_window
                  << " samples; their smoothing window was shortened\n";
      }
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& ch : msg) {
      if (ch == '\n') ch = ' ';
    }
    std::cerr << "error: " << msg << "\n";
    return 1;
  }
  return 0;
}
