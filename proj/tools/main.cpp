// abnn: pretrain / train / attack / eval / run / gradcheck / costmodel.
//
// Exit codes: 0 success, 1 a stage failed or a cost-model verification did
// not hold, 2 bad command line or config.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "abnn/checkpoint.hpp"
#include "abnn/experiment.hpp"
#include "abnn/gradcheck.hpp"
#include "abnn/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "run this seed instead of the config's");
  cmd->add_option("--out", c.out, "output directory (default: the config's output_dir)");
}

// Config with --seed / --out applied. Single-seed verbs need exactly one seed.
abnn::ExperimentConfig resolve(const Common& c, bool single_seed) {
  auto cfg = abnn::load_config(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (single_seed && cfg.seeds.size() != 1) {
    throw abnn::ConfigError("/seeds", "this command runs one seed; pick one with --seed");
  }
  return cfg;
}

void require_file(const fs::path& p, const char* stage, const char* hint) {
  if (!fs::is_regular_file(p)) throw abnn::StageError(stage, "missing " + p.string() + "; " + hint);
}

int cmd_pretrain(const Common& c) {
  const auto cfg = resolve(c, true);
  abnn::check_inputs(cfg);
  const auto seed = cfg.seeds.front();
  const auto data = abnn::load_experiment_data(cfg, seed);
  abnn::TrainResult result;
  std::shared_ptr<abnn::SubstituteModel> sub;
  try {
    sub = abnn::run_pretrain(cfg, data, seed, &result);
    fs::create_directories(cfg.output_dir);
    abnn::save_checkpoint(cfg.output_dir / abnn::kSubstituteCheckpoint, sub->state());
  } catch (const std::exception& e) {
    throw abnn::StageError("pretrain", e.what());
  }
  char digest[19];
  std::snprintf(digest, sizeof digest, "0x%016llx", static_cast<unsigned long long>(abnn::parameter_digest(*sub)));
  std::ofstream(cfg.output_dir / "pretrain-manifest.json")
      << json({{"seed", seed},
               {"classes", data.pretrain.class_subset},
               {"samples", data.pretrain.size()},
               {"epoch_losses", result.epoch_losses},
               {"steps", result.passes.steps()},
               {"substitute_digest", digest}})
             .dump(2)
      << "\n";
  std::cout << "substitute trained on classes";
  for (int k : data.pretrain.class_subset) std::cout << ' ' << k;
  std::cout << ", final loss " << result.epoch_losses.back() << ", digest " << digest << "\n";
  return kOk;
}

int cmd_train(const Common& c) {
  const auto cfg = resolve(c, true);
  abnn::check_inputs(cfg);
  require_file(cfg.output_dir / abnn::kSubstituteCheckpoint, "train", "run `pretrain` first");
  const auto seed = cfg.seeds.front();
  const auto data = abnn::load_experiment_data(cfg, seed);
  auto sub = abnn::load_substitute(cfg, data, cfg.output_dir);
  const auto digest = abnn::parameter_digest(*sub);
  abnn::TrainedModels models;
  try {
    models = abnn::run_train(cfg, data, sub, seed);
    abnn::save_trained(models, cfg.output_dir);
    abnn::write_training_manifest(cfg, models, seed, digest, cfg.output_dir);
  } catch (const std::exception& e) {
    throw abnn::StageError("train", e.what());
  }
  bool ok = abnn::parameter_digest(*sub) == digest;
  if (!ok) std::cerr << "[train] substitute parameters changed during target training\n";
  for (const auto& m : abnn::training_summaries(cfg, models)) {
    std::cout << m.method << ": " << m.steps << " steps, " << m.passes_per_step() << " passes/step (predicted "
              << m.predicted_passes_per_step << ") " << (m.cost_verified ? "verified" : "MISMATCH") << "\n";
    ok = ok && m.cost_verified;
  }
  return ok ? kOk : kFailed;
}

int cmd_attack(const Common& c, const std::string& method, const std::string& attack, const std::string& gradient) {
  const auto cfg = resolve(c, true);
  abnn::check_inputs(cfg);
  for (const char* f : {abnn::kSubstituteCheckpoint, abnn::kAbnnCheckpoint, abnn::kPlainCheckpoint,
                        abnn::kPgdAtCheckpoint}) {
    require_file(cfg.output_dir / f, "attack", "run `train` first");
  }
  const auto seed = cfg.seeds.front();
  const auto data = abnn::load_experiment_data(cfg, seed);
  auto models = abnn::load_trained(cfg, data, cfg.output_dir);
  models.abnn->set_input_gradient(gradient == "target-only" ? abnn::InputGradient::kTargetOnly
                                                            : abnn::InputGradient::kFullFramework);
  abnn::Classifier* model = method == "abnn"         ? static_cast<abnn::Classifier*>(models.abnn.get())
                            : method == "no-defense" ? models.plain.get()
                                                     : models.pgd_at.get();
  abnn::AttackSpec spec = cfg.roa;
  if (attack == "pgd") spec = cfg.pgd;
  abnn::DatasetContainer adv;
  try {
    adv = abnn::generate_adversarial(*model, data.test, spec, cfg.eval_batch_size);
  } catch (const std::exception& e) {
    throw abnn::StageError("attack", e.what());
  }
  const auto path = cfg.output_dir / ("adversarial-" + method + "-" + attack + ".abnnd");
  abnn::save_dataset(path, adv);
  std::cout << "wrote " << adv.size() << " adversarial images to " << path.string() << "\n";
  return kOk;
}

int cmd_eval(const Common& c) {
  const auto cfg = resolve(c, true);
  abnn::check_inputs(cfg);
  for (const char* f : {abnn::kSubstituteCheckpoint, abnn::kAbnnCheckpoint, abnn::kPlainCheckpoint,
                        abnn::kPgdAtCheckpoint, "train-manifest.json"}) {
    require_file(cfg.output_dir / f, "eval", "run `train` first");
  }
  const auto seed = cfg.seeds.front();
  const auto data = abnn::load_experiment_data(cfg, seed);
  auto models = abnn::load_trained(cfg, data, cfg.output_dir);
  abnn::SeedReport report;
  report.seed = seed;
  report.classes_disjoint = true;
  for (int a : cfg.data.pretrain_classes) {
    for (int b : cfg.data.target_classes) report.classes_disjoint = report.classes_disjoint && a != b;
  }
  report.methods = abnn::read_training_manifest(cfg.output_dir, &report.substitute_digest_before);
  try {
    abnn::evaluate_trained(cfg, data, models, report.methods, seed);
  } catch (const std::exception& e) {
    throw abnn::StageError("eval", e.what());
  }
  report.substitute_digest_after = abnn::parameter_digest(*models.substitute);
  abnn::write_seed_report(cfg, report, cfg.output_dir);
  std::cout << abnn::results_csv(report.methods);
  return report.succeeded() ? kOk : kFailed;
}

int cmd_run(const Common& c) {
  const auto cfg = resolve(c, false);
  const auto reports = abnn::run_experiment(cfg);
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << "seed " << r.seed << (r.succeeded() ? "" : " (FAILED checks)") << "\n"
              << abnn::results_csv(r.methods);
    ok = ok && r.succeeded();
  }
  if (reports.size() > 1) {
    std::cout << "median over " << reports.size() << " seeds\n" << abnn::results_csv(abnn::median_over_seeds(reports));
  }
  return ok ? kOk : kFailed;
}

int cmd_gradcheck(std::size_t trials, std::uint64_t seed, double tolerance, const std::string& out) {
  const auto cases = abnn::run_gradcheck_suite(trials, seed);
  bool ok = true;
  json rows = json::array();
  for (const auto& gc : cases) {
    const bool pass = gc.max_relative_error < tolerance && gc.checked > 0;
    ok = ok && pass;
    std::printf("%-28s trials=%zu max_rel_err=%.3e checked=%zu skipped=%zu %s\n", gc.name.c_str(), gc.trials,
                static_cast<double>(gc.max_relative_error), gc.checked, gc.skipped, pass ? "ok" : "FAIL");
    rows.push_back({{"name", gc.name},
                    {"trials", gc.trials},
                    {"max_relative_error", gc.max_relative_error},
                    {"worst_seed", gc.worst_seed},
                    {"worst_analytic", gc.worst_analytic},
                    {"worst_numeric", gc.worst_numeric},
                    {"checked", gc.checked},
                    {"skipped", gc.skipped},
                    {"pass", pass}});
  }
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "gradcheck.json")
        << json({{"tolerance", tolerance}, {"seed", seed}, {"cases", rows}}).dump(2) << "\n";
  }
  return ok ? kOk : kFailed;
}

int cmd_costmodel(const std::string& arg) {
  const std::string prefix = "t_max=";
  if (arg.rfind(prefix, 0) != 0) throw CLI::ValidationError("costmodel", "expected t_max=<k>, got '" + arg + "'");
  int t = 0;
  try {
    std::size_t used = 0;
    t = std::stoi(arg.substr(prefix.size()), &used);
    if (used != arg.size() - prefix.size()) throw std::invalid_argument(arg);
  } catch (const std::exception&) {
    throw CLI::ValidationError("costmodel", "t_max must be an integer, got '" + arg + "'");
  }
  if (t < 1) throw CLI::ValidationError("costmodel", "t_max must be at least 1");
  std::printf("training cost per step, in units of one network pass N (t_max=%d)\n", t);
  std::printf("  no defense   %lluN\n", static_cast<unsigned long long>(abnn::cost_no_defense()));
  std::printf("  abnn         %lluN\n", static_cast<unsigned long long>(abnn::cost_abnn()));
  std::printf("  pgd-at       %lluN\n", static_cast<unsigned long long>(abnn::cost_pgd_at(t)));
  std::printf("  oudefend     %lluN\n", static_cast<unsigned long long>(abnn::cost_oudefend(t)));
  std::printf("  pgd-at/abnn  %.4f\n", abnn::cost_ratio(t));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ABNN adversarial defense: training, attacks and cost accounting"};
  app.require_subcommand(1);
  app.footer("Environment: ABNN_DATA_ROOT  CIFAR-10 binary directory when data.root is not set");

  Common common;
  auto* pretrain = app.add_subcommand("pretrain", "train and freeze the substitute network");
  auto* train = app.add_subcommand("train", "train the abnn target, the undefended baseline and pgd-at");
  auto* attack = app.add_subcommand("attack", "export an adversarial copy of the test split");
  auto* eval = app.add_subcommand("eval", "evaluate trained models; writes report.json and results.csv");
  auto* run = app.add_subcommand("run", "full pipeline for every seed of the config");
  for (auto* cmd : {pretrain, train, attack, eval, run}) add_common(cmd, common);

  std::string method = "abnn", attack_kind = "pgd", gradient = "full";
  attack->add_option("--model", method, "model to attack")
      ->check(CLI::IsMember({"abnn", "no-defense", "pgd-at"}));
  attack->add_option("--attack", attack_kind, "attack")->check(CLI::IsMember({"pgd", "roa"}));
  attack->add_option("--gradient", gradient, "abnn input gradient")->check(CLI::IsMember({"full", "target-only"}));

  std::size_t trials = 100;
  std::uint64_t gc_seed = 0;
  double tolerance = 1e-4;
  std::string gc_out;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable operation");
  gradcheck->add_option("--trials", trials, "random cases per operation")->check(CLI::PositiveNumber);
  gradcheck->add_option("--seed", gc_seed, "base seed");
  gradcheck->add_option("--tolerance", tolerance, "maximum relative error");
  gradcheck->add_option("--out", gc_out, "directory for gradcheck.json");

  std::string t_arg;
  auto* costmodel = app.add_subcommand("costmodel", "per-step training cost of each method");
  costmodel->add_option("t_max", t_arg, "t_max=<k>")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*pretrain) return cmd_pretrain(common);
    if (*train) return cmd_train(common);
    if (*attack) return cmd_attack(common, method, attack_kind, gradient);
    if (*eval) return cmd_eval(common);
    if (*run) return cmd_run(common);
    if (*gradcheck) return cmd_gradcheck(trials, gc_seed, tolerance, gc_out);
    if (*costmodel) return cmd_costmodel(t_arg);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const abnn::ConfigError& e) {
    std::cerr << "[config] " << e.what() << "\n";
    return kUsage;
  } catch (const abnn::StageError& e) {
    std::cerr << e.what() << "\n";
    return kFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
