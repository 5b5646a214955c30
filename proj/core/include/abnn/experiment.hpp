#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "abnn/attacks.hpp"
#include "abnn/data.hpp"
#include "abnn/networks.hpp"
#include "abnn/training.hpp"

namespace abnn {

/// Malformed configuration. `where` is a JSON pointer to the offending field,
/// or "line L, column C" for syntax errors.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string where, const std::string& what)
      : std::runtime_error(where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

/// Failure of one pipeline stage; the message is prefixed "[stage] ".
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

enum class Task { kImageToy, kCifarSubset };

enum class AttackGradient { kFullFramework, kTargetOnly, kBoth };

struct DataConfig {
  std::string root;  // cifar-subset only; falls back to $ABNN_DATA_ROOT
  std::vector<int> pretrain_classes;
  std::vector<int> target_classes;
  std::size_t pretrain_samples = 0;  // 0: everything available
  std::size_t train_samples = 0;
  std::size_t test_samples = 0;
  // image-toy only
  std::size_t image_size = 16;
  Scalar amplitude = Scalar(0.25);
  Scalar blob_radius = Scalar(3);
  Scalar noise = Scalar(0.1);
  Scalar margin = Scalar(1);
};

struct ExperimentConfig {
  Task task = Task::kImageToy;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "abnn-out";
  DataConfig data;
  std::vector<ConvBlockSpec> substitute_blocks;
  std::vector<ConvBlockSpec> target_blocks;
  SGDConfig pretrain;
  SGDConfig train;
  PGDConfig pgd_at;
  PGDConfig pgd;
  ROAConfig roa;
  AttackGradient attack_gradient = AttackGradient::kBoth;
  std::size_t eval_batch_size = 100;
};

/// Parses and validates a JSON config. Unknown keys, wrong types and out of
/// range values throw ConfigError naming the field.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Checks that every file the config refers to exists. Throws StageError("config").
void check_inputs(const ExperimentConfig& cfg);

/// The three datasets of one seed. Pretraining and target classes are disjoint.
struct ExperimentData {
  DatasetContainer pretrain;
  DatasetContainer train;
  DatasetContainer test;
};
ExperimentData load_experiment_data(const ExperimentConfig& cfg, std::uint64_t seed);

struct MethodResult {
  std::string method;  // "no-defense", "abnn" or "pgd-at"
  Scalar clean_acc = 0;
  Scalar pgd_acc = 0;
  Scalar roa_acc = 0;
  std::uint64_t steps = 0;
  std::uint64_t passes_total = 0;
  std::uint64_t predicted_passes_per_step = 0;
  bool cost_verified = false;
  std::vector<Scalar> epoch_losses;
  std::uint64_t attack_calls_during_training = 0;
  // abnn only: attacks that treat the substitute branch as constant
  std::optional<Scalar> pgd_acc_target_only;
  std::optional<Scalar> roa_acc_target_only;

  double passes_per_step() const {
    return steps == 0 ? 0.0 : static_cast<double>(passes_total) / static_cast<double>(steps);
  }
};

struct SeedReport {
  std::uint64_t seed = 0;
  std::vector<MethodResult> methods;  // no-defense, abnn, pgd-at
  std::vector<Scalar> pretrain_losses;
  std::uint64_t substitute_digest_before = 0;
  std::uint64_t substitute_digest_after = 0;
  bool classes_disjoint = false;

  const MethodResult& method(const std::string& name) const;
  bool succeeded() const;
};

/// Trains a fresh substitute on the pretraining split; frozen on return.
std::shared_ptr<SubstituteModel> run_pretrain(const ExperimentConfig& cfg, const ExperimentData& data,
                                              std::uint64_t seed, TrainResult* result = nullptr);

struct TrainedModels {
  std::shared_ptr<SubstituteModel> substitute;
  std::unique_ptr<ABNNModel> abnn;
  std::unique_ptr<PlainModel> plain;
  std::unique_ptr<PlainModel> pgd_at;
  TrainResult abnn_run;
  TrainResult plain_run;
  TrainResult pgd_at_run;
};
TrainedModels run_train(const ExperimentConfig& cfg, const ExperimentData& data,
                        std::shared_ptr<SubstituteModel> substitute, std::uint64_t seed);

/// Training fields (steps, passes, cost verdict, losses) of the three methods.
std::vector<MethodResult> training_summaries(const ExperimentConfig& cfg, const TrainedModels& models);

/// Fills the accuracy fields of `methods` by evaluating on the test split.
void evaluate_trained(const ExperimentConfig& cfg, const ExperimentData& data, TrainedModels& models,
                      std::vector<MethodResult>& methods, std::uint64_t seed);

/// train-manifest.json: what the `eval` verb needs from a separate `train` run.
void write_training_manifest(const ExperimentConfig& cfg, const TrainedModels& models, std::uint64_t seed,
                             std::uint64_t substitute_digest, const std::filesystem::path& dir);
std::vector<MethodResult> read_training_manifest(const std::filesystem::path& dir, std::uint64_t* substitute_digest);

/// Full pipeline for one seed: pretrain, train, eval. Writes checkpoints,
/// report.json and results.csv into `dir`.
SeedReport run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir);

/// Runs every seed of the config (seed-<s>/ subdirectories when there is more
/// than one) and writes the merged summary.json / summary.csv sorted by seed.
std::vector<SeedReport> run_experiment(const ExperimentConfig& cfg);

// Checkpoint file names inside a run directory.
inline constexpr const char* kSubstituteCheckpoint = "substitute.ckpt";
inline constexpr const char* kAbnnCheckpoint = "abnn-target.ckpt";
inline constexpr const char* kPlainCheckpoint = "no-defense.ckpt";
inline constexpr const char* kPgdAtCheckpoint = "pgd-at.ckpt";

/// Builds the models of `cfg` and loads their weights from `dir`.
std::shared_ptr<SubstituteModel> load_substitute(const ExperimentConfig& cfg, const ExperimentData& data,
                                                 const std::filesystem::path& dir);
TrainedModels load_trained(const ExperimentConfig& cfg, const ExperimentData& data, const std::filesystem::path& dir);
void save_trained(const TrainedModels& models, const std::filesystem::path& dir);

/// CSV with the fixed header "method,clean_acc,pgd_acc,roa_acc,passes_per_step".
std::string results_csv(const std::vector<MethodResult>& methods);
void write_seed_report(const ExperimentConfig& cfg, const SeedReport& report, const std::filesystem::path& dir);

/// Median of each method's metrics across seeds.
std::vector<MethodResult> median_over_seeds(const std::vector<SeedReport>& reports);

}  // namespace abnn
