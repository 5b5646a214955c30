#include "abnn/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "abnn/checkpoint.hpp"

namespace abnn {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------- config parsing

std::string child(const std::string& path, const std::string& key) { return path + "/" + key; }
std::string child(const std::string& path, std::size_t i) { return path + "/" + std::to_string(i); }

void expect_object(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(path.empty() ? "/" : path, "expected an object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [k, _] : j.items()) {
    if (!keys.count(k)) throw ConfigError(child(path, k), "unknown key");
  }
}

const json* find(const json& j, const char* key) {
  auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

double read_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path, "expected a number");
  return j.get<double>();
}

std::uint64_t read_count(const json& j, const std::string& path) {
  if (!j.is_number_integer() || j.get<std::int64_t>() < 0) throw ConfigError(path, "expected a non-negative integer");
  return j.get<std::uint64_t>();
}

template <typename T>
void opt_number(const json& obj, const std::string& path, const char* key, T& out) {
  if (const auto* v = find(obj, key)) out = static_cast<T>(read_number(*v, child(path, key)));
}

template <typename T>
void opt_count(const json& obj, const std::string& path, const char* key, T& out) {
  if (const auto* v = find(obj, key)) out = static_cast<T>(read_count(*v, child(path, key)));
}

void opt_bool(const json& obj, const std::string& path, const char* key, bool& out) {
  if (const auto* v = find(obj, key)) {
    if (!v->is_boolean()) throw ConfigError(child(path, key), "expected true or false");
    out = v->get<bool>();
  }
}

void opt_string(const json& obj, const std::string& path, const char* key, std::string& out) {
  if (const auto* v = find(obj, key)) {
    if (!v->is_string()) throw ConfigError(child(path, key), "expected a string");
    out = v->get<std::string>();
  }
}

std::vector<int> read_classes(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) throw ConfigError(path, "expected a non-empty array of class ids");
  std::vector<int> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto id = read_count(j[i], child(path, i));
    if (std::find(out.begin(), out.end(), static_cast<int>(id)) != out.end()) {
      throw ConfigError(child(path, i), "duplicate class id");
    }
    out.push_back(static_cast<int>(id));
  }
  return out;
}

std::vector<ConvBlockSpec> read_blocks(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) throw ConfigError(path, "expected a non-empty array of blocks");
  std::vector<ConvBlockSpec> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto p = child(path, i);
    expect_object(j[i], p, {"out_channels", "kernel", "stride", "pool"});
    ConvBlockSpec b;
    if (!find(j[i], "out_channels")) throw ConfigError(child(p, "out_channels"), "required");
    opt_count(j[i], p, "out_channels", b.out_channels);
    opt_count(j[i], p, "kernel", b.kernel);
    opt_count(j[i], p, "stride", b.stride);
    opt_bool(j[i], p, "pool", b.pool);
    if (b.out_channels == 0) throw ConfigError(child(p, "out_channels"), "must be positive");
    if (b.kernel == 0 || b.kernel % 2 == 0) throw ConfigError(child(p, "kernel"), "must be odd and positive");
    if (b.stride == 0) throw ConfigError(child(p, "stride"), "must be positive");
    out.push_back(b);
  }
  return out;
}

SGDConfig read_sgd(const json& j, const std::string& path, SGDConfig out) {
  expect_object(j, path, {"learning_rate", "momentum", "epochs", "batch_size", "gradient_clip"});
  opt_number(j, path, "learning_rate", out.learning_rate);
  opt_number(j, path, "gradient_clip", out.clip_norm);
  opt_number(j, path, "momentum", out.momentum);
  opt_count(j, path, "epochs", out.epochs);
  opt_count(j, path, "batch_size", out.batch_size);
  if (!(out.learning_rate > 0)) throw ConfigError(child(path, "learning_rate"), "must be positive");
  if (!(out.momentum >= 0 && out.momentum < 1)) throw ConfigError(child(path, "momentum"), "must be in [0, 1)");
  if (out.epochs < 1) throw ConfigError(child(path, "epochs"), "must be at least 1");
  if (out.batch_size < 2) throw ConfigError(child(path, "batch_size"), "must be at least 2");
  if (!(out.clip_norm >= 0)) throw ConfigError(child(path, "gradient_clip"), "must be non-negative (0 disables)");
  return out;
}

PGDConfig read_pgd(const json& j, const std::string& path, int min_t) {
  expect_object(j, path, {"epsilon", "t_max", "step_size", "random_start"});
  PGDConfig out;
  opt_number(j, path, "epsilon", out.epsilon);
  opt_count(j, path, "t_max", out.t_max);
  opt_bool(j, path, "random_start", out.random_start);
  if (!(out.epsilon >= 0 && out.epsilon < 1)) throw ConfigError(child(path, "epsilon"), "must be in [0, 1)");
  if (out.t_max < min_t) throw ConfigError(child(path, "t_max"), "must be at least " + std::to_string(min_t));
  out = PGDConfig::standard(out.epsilon, out.t_max, out.random_start);
  opt_number(j, path, "step_size", out.step_size);
  if (!(out.step_size > 0)) throw ConfigError(child(path, "step_size"), "must be positive");
  return out;
}

ROAConfig read_roa(const json& j, const std::string& path) {
  expect_object(j, path,
                {"area_fraction", "rect_height", "rect_width", "search_stride", "fill_value", "step_size", "t_max"});
  ROAConfig out;
  opt_number(j, path, "area_fraction", out.area_fraction);
  opt_count(j, path, "rect_height", out.rect_height);
  opt_count(j, path, "rect_width", out.rect_width);
  opt_count(j, path, "search_stride", out.search_stride);
  opt_number(j, path, "fill_value", out.fill_value);
  opt_number(j, path, "step_size", out.step_size);
  opt_count(j, path, "t_max", out.t_max);
  if (!(out.area_fraction > 0 && out.area_fraction <= 1)) {
    throw ConfigError(child(path, "area_fraction"), "must be in (0, 1]");
  }
  if ((out.rect_height == 0) != (out.rect_width == 0)) {
    throw ConfigError(child(path, out.rect_height ? "rect_width" : "rect_height"),
                      "rect_height and rect_width are given together or not at all");
  }
  if (out.search_stride == 0) throw ConfigError(child(path, "search_stride"), "must be positive");
  if (!(out.fill_value >= 0 && out.fill_value <= 1)) throw ConfigError(child(path, "fill_value"), "must be in [0, 1]");
  if (!(out.step_size > 0)) throw ConfigError(child(path, "step_size"), "must be positive");
  return out;
}

std::vector<ConvBlockSpec> default_blocks(std::initializer_list<std::size_t> channels) {
  std::vector<ConvBlockSpec> out;
  for (auto c : channels) out.push_back({c, 3, 1, out.size() < 2});
  return out;
}

bool disjoint(const std::vector<int>& a, const std::vector<int>& b) {
  return std::none_of(a.begin(), a.end(), [&](int v) { return std::find(b.begin(), b.end(), v) != b.end(); });
}

// ---------------------------------------------------------------- seeds

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Independent stream per (experiment seed, purpose).
enum class Stream : std::uint64_t {
  kPretrainData = 1,
  kTrainData,
  kTestData,
  kSubstituteInit,
  kTargetInit,
  kPlainInit,
  kPgdAtInit,
  kPretrainShuffle,
  kTargetShuffle,
  kPlainShuffle,
  kPgdAtShuffle,
  kPgdAtAttack,
  kEvalAttack,
};

std::uint64_t derive(std::uint64_t seed, Stream s) { return splitmix(splitmix(seed) ^ static_cast<std::uint64_t>(s)); }

fs::path data_root(const ExperimentConfig& cfg) {
  if (!cfg.data.root.empty()) return cfg.data.root;
  if (const char* env = std::getenv("ABNN_DATA_ROOT")) return env;
  return {};
}

DatasetContainer take(DatasetContainer d, std::size_t n) {
  if (n == 0 || n >= d.size()) return d;
  return d.subset(0, n);
}

std::string hex(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

const char* gradient_name(AttackGradient g) {
  switch (g) {
    case AttackGradient::kFullFramework: return "full";
    case AttackGradient::kTargetOnly: return "target-only";
    case AttackGradient::kBoth: return "both";
  }
  return "?";
}

json blocks_json(const std::vector<ConvBlockSpec>& blocks) {
  json out = json::array();
  for (const auto& b : blocks) {
    out.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"stride", b.stride}, {"pool", b.pool}});
  }
  return out;
}

json sgd_json(const SGDConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"momentum", c.momentum}, {"epochs", c.epochs},
          {"batch_size", c.batch_size}, {"gradient_clip", c.clip_norm}};
}

json pgd_json(const PGDConfig& c) {
  return {{"epsilon", c.epsilon}, {"t_max", c.t_max}, {"step_size", c.step_size}, {"random_start", c.random_start}};
}

json config_json(const ExperimentConfig& cfg) {
  json data = {{"pretrain_classes", cfg.data.pretrain_classes},
               {"target_classes", cfg.data.target_classes},
               {"pretrain_samples", cfg.data.pretrain_samples},
               {"train_samples", cfg.data.train_samples},
               {"test_samples", cfg.data.test_samples}};
  if (cfg.task == Task::kImageToy) {
    data["image_size"] = cfg.data.image_size;
    data["amplitude"] = cfg.data.amplitude;
    data["blob_radius"] = cfg.data.blob_radius;
    data["noise"] = cfg.data.noise;
    data["margin"] = cfg.data.margin;
  } else {
    data["root"] = cfg.data.root;
  }
  return {
      {"task", cfg.task == Task::kImageToy ? "image-toy" : "cifar-subset"},
      {"seeds", cfg.seeds},
      {"output_dir", cfg.output_dir.string()},
      {"data", data},
      {"models", {{"substitute", blocks_json(cfg.substitute_blocks)}, {"target", blocks_json(cfg.target_blocks)}}},
      {"training", {{"pretrain", sgd_json(cfg.pretrain)}, {"train", sgd_json(cfg.train)}}},
      {"attacks",
       {{"pgd", pgd_json(cfg.pgd)},
        {"pgd_at", pgd_json(cfg.pgd_at)},
        {"roa",
         {{"area_fraction", cfg.roa.area_fraction},
          {"rect_height", cfg.roa.rect_height},
          {"rect_width", cfg.roa.rect_width},
          {"search_stride", cfg.roa.search_stride},
          {"fill_value", cfg.roa.fill_value},
          {"step_size", cfg.roa.step_size},
          {"t_max", cfg.roa.t_max}}},
        {"gradient", gradient_name(cfg.attack_gradient)},
        {"eval_batch_size", cfg.eval_batch_size}}},
  };
}

json method_json(const MethodResult& m) {
  json j = {{"method", m.method},
            {"clean_acc", m.clean_acc},
            {"pgd_acc", m.pgd_acc},
            {"roa_acc", m.roa_acc},
            {"passes_per_step", m.passes_per_step()},
            {"steps", m.steps},
            {"passes_total", m.passes_total},
            {"predicted_passes_per_step", m.predicted_passes_per_step},
            {"cost_verified", m.cost_verified},
            {"epoch_losses", m.epoch_losses},
            {"attack_calls_during_training", m.attack_calls_during_training}};
  if (m.pgd_acc_target_only) j["pgd_acc_target_only"] = *m.pgd_acc_target_only;
  if (m.roa_acc_target_only) j["roa_acc_target_only"] = *m.roa_acc_target_only;
  return j;
}

MethodResult method_from_json(const json& j) {
  MethodResult m;
  m.method = j.at("method").get<std::string>();
  m.clean_acc = j.at("clean_acc").get<Scalar>();
  m.pgd_acc = j.at("pgd_acc").get<Scalar>();
  m.roa_acc = j.at("roa_acc").get<Scalar>();
  m.steps = j.at("steps").get<std::uint64_t>();
  m.passes_total = j.at("passes_total").get<std::uint64_t>();
  m.predicted_passes_per_step = j.at("predicted_passes_per_step").get<std::uint64_t>();
  m.cost_verified = j.at("cost_verified").get<bool>();
  m.epoch_losses = j.at("epoch_losses").get<std::vector<Scalar>>();
  m.attack_calls_during_training = j.at("attack_calls_during_training").get<std::uint64_t>();
  return m;
}

MethodResult training_summary(const std::string& method, const TrainResult& run, std::uint64_t predicted) {
  MethodResult m;
  m.method = method;
  m.steps = run.passes.steps();
  m.passes_total = run.passes.total_passes();
  m.predicted_passes_per_step = predicted;
  m.cost_verified = verify_cost_model(run.passes, predicted);
  m.epoch_losses = run.epoch_losses;
  m.attack_calls_during_training = run.attack_calls;
  return m;
}

std::size_t image_channels(const ExperimentData& data) { return data.train.channels; }
std::size_t target_classes(const ExperimentData& data) { return data.train.num_classes; }

}  // namespace

// ---------------------------------------------------------------- config

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    // Convert the byte offset into a line/column pair.
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < json_text.size(); ++i) {
      if (json_text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("line " + std::to_string(line) + ", column " + std::to_string(col), "invalid JSON");
  }

  ExperimentConfig cfg;
  expect_object(root, "", {"task", "seed", "seeds", "output_dir", "data", "models", "training", "attacks"});

  std::string task = "image-toy";
  opt_string(root, "", "task", task);
  if (task == "image-toy") {
    cfg.task = Task::kImageToy;
  } else if (task == "cifar-subset") {
    cfg.task = Task::kCifarSubset;
  } else {
    throw ConfigError("/task", "must be \"image-toy\" or \"cifar-subset\"");
  }

  if (find(root, "seed") && find(root, "seeds")) throw ConfigError("/seeds", "give either seed or seeds, not both");
  if (const auto* s = find(root, "seed")) cfg.seeds = {read_count(*s, "/seed")};
  if (const auto* s = find(root, "seeds")) {
    if (!s->is_array() || s->empty()) throw ConfigError("/seeds", "expected a non-empty array");
    cfg.seeds.clear();
    for (std::size_t i = 0; i < s->size(); ++i) {
      const auto v = read_count((*s)[i], child("/seeds", i));
      if (std::find(cfg.seeds.begin(), cfg.seeds.end(), v) != cfg.seeds.end()) {
        throw ConfigError(child("/seeds", i), "duplicate seed");
      }
      cfg.seeds.push_back(v);
    }
  }
  std::string out_dir = cfg.output_dir.string();
  opt_string(root, "", "output_dir", out_dir);
  if (out_dir.empty()) throw ConfigError("/output_dir", "must not be empty");
  cfg.output_dir = out_dir;

  if (cfg.task == Task::kImageToy) {
    cfg.data.pretrain_classes = {0, 1};
    cfg.data.target_classes = {2, 3};
    cfg.data.pretrain_samples = 1024;
    cfg.data.train_samples = 1024;
    cfg.data.test_samples = 500;
  } else {
    cfg.data.pretrain_classes = {0, 1, 2, 3, 4};
    cfg.data.target_classes = {5, 6, 7, 8, 9};
  }
  if (const auto* d = find(root, "data")) {
    expect_object(*d, "/data",
                  {"root", "pretrain_classes", "target_classes", "pretrain_samples", "train_samples", "test_samples",
                   "image_size", "amplitude", "blob_radius", "noise", "margin"});
    if (cfg.task == Task::kImageToy && find(*d, "root")) {
      throw ConfigError("/data/root", "only valid for task cifar-subset");
    }
    if (cfg.task == Task::kCifarSubset) {
      for (const char* k : {"image_size", "amplitude", "blob_radius", "noise", "margin"}) {
        if (find(*d, k)) throw ConfigError(child("/data", k), "only valid for task image-toy");
      }
    }
    opt_string(*d, "/data", "root", cfg.data.root);
    if (const auto* c = find(*d, "pretrain_classes")) cfg.data.pretrain_classes = read_classes(*c, "/data/pretrain_classes");
    if (const auto* c = find(*d, "target_classes")) cfg.data.target_classes = read_classes(*c, "/data/target_classes");
    opt_count(*d, "/data", "pretrain_samples", cfg.data.pretrain_samples);
    opt_count(*d, "/data", "train_samples", cfg.data.train_samples);
    opt_count(*d, "/data", "test_samples", cfg.data.test_samples);
    opt_count(*d, "/data", "image_size", cfg.data.image_size);
    opt_number(*d, "/data", "amplitude", cfg.data.amplitude);
    opt_number(*d, "/data", "blob_radius", cfg.data.blob_radius);
    opt_number(*d, "/data", "noise", cfg.data.noise);
    opt_number(*d, "/data", "margin", cfg.data.margin);
  }
  auto check_classes = [&](const std::vector<int>& cls, const char* key) {
    if (cls.size() < 2) throw ConfigError(child("/data", key), "needs at least two classes");
    if (cfg.task == Task::kCifarSubset) {
      for (std::size_t i = 0; i < cls.size(); ++i) {
        if (cls[i] > 9) throw ConfigError(child(child("/data", key), i), "CIFAR-10 class ids are 0..9");
      }
    }
  };
  check_classes(cfg.data.pretrain_classes, "pretrain_classes");
  check_classes(cfg.data.target_classes, "target_classes");
  if (!disjoint(cfg.data.pretrain_classes, cfg.data.target_classes)) {
    throw ConfigError("/data/target_classes", "must be disjoint from pretrain_classes");
  }
  if (cfg.task == Task::kImageToy) {
    if (cfg.data.image_size < 4) throw ConfigError("/data/image_size", "must be at least 4");
    for (auto [key, n] : {std::pair{"pretrain_samples", cfg.data.pretrain_samples},
                          std::pair{"train_samples", cfg.data.train_samples},
                          std::pair{"test_samples", cfg.data.test_samples}}) {
      if (n == 0) throw ConfigError(child("/data", key), "must be positive for image-toy");
    }
    if (!(cfg.data.amplitude > 0 && cfg.data.amplitude <= Scalar(0.5))) {
      throw ConfigError("/data/amplitude", "must be in (0, 0.5]");
    }
    if (!(cfg.data.blob_radius > 0)) throw ConfigError("/data/blob_radius", "must be positive");
    if (!(cfg.data.noise >= 0)) throw ConfigError("/data/noise", "must be non-negative");
    if (!(cfg.data.margin >= 0)) throw ConfigError("/data/margin", "must be non-negative");
  }

  cfg.substitute_blocks = default_blocks({8, 16, 32, 32});
  cfg.target_blocks = default_blocks({16, 32, 64, 64});
  if (const auto* m = find(root, "models")) {
    expect_object(*m, "/models", {"substitute", "target"});
    if (const auto* b = find(*m, "substitute")) cfg.substitute_blocks = read_blocks(*b, "/models/substitute");
    if (const auto* b = find(*m, "target")) cfg.target_blocks = read_blocks(*b, "/models/target");
  }

  if (const auto* t = find(root, "training")) {
    expect_object(*t, "/training", {"pretrain", "train"});
    if (const auto* s = find(*t, "pretrain")) cfg.pretrain = read_sgd(*s, "/training/pretrain", cfg.pretrain);
    if (const auto* s = find(*t, "train")) cfg.train = read_sgd(*s, "/training/train", cfg.train);
  }

  cfg.pgd = PGDConfig::standard(Scalar(8) / 255, 5);
  cfg.pgd_at = cfg.pgd;
  if (const auto* a = find(root, "attacks")) {
    expect_object(*a, "/attacks", {"pgd", "pgd_at", "roa", "gradient", "eval_batch_size"});
    if (const auto* p = find(*a, "pgd")) cfg.pgd = read_pgd(*p, "/attacks/pgd", 0);
    cfg.pgd_at = cfg.pgd;
    if (const auto* p = find(*a, "pgd_at")) cfg.pgd_at = read_pgd(*p, "/attacks/pgd_at", 1);
    if (cfg.pgd_at.t_max < 1) throw ConfigError("/attacks/pgd/t_max", "adversarial training needs t_max >= 1");
    if (const auto* r = find(*a, "roa")) cfg.roa = read_roa(*r, "/attacks/roa");
    std::string g = gradient_name(cfg.attack_gradient);
    opt_string(*a, "/attacks", "gradient", g);
    if (g == "full") {
      cfg.attack_gradient = AttackGradient::kFullFramework;
    } else if (g == "target-only") {
      cfg.attack_gradient = AttackGradient::kTargetOnly;
    } else if (g == "both") {
      cfg.attack_gradient = AttackGradient::kBoth;
    } else {
      throw ConfigError("/attacks/gradient", "must be \"full\", \"target-only\" or \"both\"");
    }
    opt_count(*a, "/attacks", "eval_batch_size", cfg.eval_batch_size);
    if (cfg.eval_batch_size < 2) throw ConfigError("/attacks/eval_batch_size", "must be at least 2");
  }

  const std::size_t side = cfg.task == Task::kImageToy ? cfg.data.image_size : kCifarSide;
  if (cfg.roa.rect_height > side || cfg.roa.rect_width > side) {
    throw ConfigError("/attacks/roa", "rectangle larger than the image");
  }
  try {
    if (!cfg.roa.rect_height) (void)rectangle_for_area(side, side, cfg.roa.area_fraction);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("/attacks/roa/area_fraction", e.what());
  }
  // The spatial extent must survive every pooling and stride of both stacks.
  for (auto [blocks, where] : {std::pair{&cfg.substitute_blocks, "/models/substitute"},
                               std::pair{&cfg.target_blocks, "/models/target"}}) {
    std::size_t s = side;
    for (std::size_t i = 0; i < blocks->size(); ++i) {
      const auto& b = (*blocks)[i];
      s = (s - 1) / b.stride + 1;
      if (b.pool) s /= 2;
      if (s == 0) throw ConfigError(child(where, i), "feature map shrinks to zero");
    }
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string(), "cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void check_inputs(const ExperimentConfig& cfg) {
  if (cfg.task != Task::kCifarSubset) return;
  const auto root = data_root(cfg);
  if (root.empty()) throw StageError("config", "cifar-subset needs data.root or $ABNN_DATA_ROOT");
  for (bool train : {true, false}) {
    for (const auto& f : cifar10_split_files(root, train)) {
      if (!fs::is_regular_file(f)) throw StageError("config", "missing CIFAR-10 file " + f.string());
    }
  }
}

ExperimentData load_experiment_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  ExperimentData out;
  if (cfg.task == Task::kCifarSubset) {
    const auto root = data_root(cfg);
    const auto train_files = cifar10_split_files(root, true);
    const auto test_files = cifar10_split_files(root, false);
    out.pretrain = take(load_cifar10_binary(train_files, cfg.data.pretrain_classes), cfg.data.pretrain_samples);
    out.train = take(load_cifar10_binary(train_files, cfg.data.target_classes), cfg.data.train_samples);
    out.test = take(load_cifar10_binary(test_files, cfg.data.target_classes), cfg.data.test_samples);
    return out;
  }
  SyntheticSpec spec;
  spec.height = spec.width = cfg.data.image_size;
  spec.amplitude = cfg.data.amplitude;
  spec.blob_radius = cfg.data.blob_radius;
  spec.noise = cfg.data.noise;
  spec.margin = cfg.data.margin;

  spec.classes = cfg.data.pretrain_classes;
  spec.samples = cfg.data.pretrain_samples;
  out.pretrain = gen_synthetic(spec, derive(seed, Stream::kPretrainData));
  spec.classes = cfg.data.target_classes;
  spec.samples = cfg.data.train_samples;
  out.train = gen_synthetic(spec, derive(seed, Stream::kTrainData));
  spec.samples = cfg.data.test_samples;
  out.test = gen_synthetic(spec, derive(seed, Stream::kTestData));
  return out;
}

// ---------------------------------------------------------------- stages

std::shared_ptr<SubstituteModel> run_pretrain(const ExperimentConfig& cfg, const ExperimentData& data,
                                              std::uint64_t seed, TrainResult* result) {
  auto sub = build_substitute(cfg.substitute_blocks, data.pretrain.num_classes, derive(seed, Stream::kSubstituteInit),
                              data.pretrain.channels);
  auto sgd = cfg.pretrain;
  sgd.seed = derive(seed, Stream::kPretrainShuffle);
  auto r = pretrain_substitute(data.pretrain, *sub, sgd);
  if (result) *result = std::move(r);
  return sub;
}

namespace {

// Prefixes a failure with the method being trained.
template <class F>
TrainResult labelled(const char* method, F&& train) {
  try {
    return train();
  } catch (const NumericError& e) {
    throw NumericError(std::string(method) + ": " + e.what());
  }
}

}  // namespace

TrainedModels run_train(const ExperimentConfig& cfg, const ExperimentData& data,
                        std::shared_ptr<SubstituteModel> substitute, std::uint64_t seed) {
  TrainedModels m;
  m.substitute = std::move(substitute);
  const auto classes = target_classes(data);
  m.abnn = std::make_unique<ABNNModel>(build_abnn(cfg.target_blocks, m.substitute, classes,
                                                  derive(seed, Stream::kTargetInit)));
  auto sgd = cfg.train;
  sgd.seed = derive(seed, Stream::kTargetShuffle);
  m.abnn_run = labelled("abnn", [&] { return train_target(data.train, *m.abnn, sgd); });

  m.plain = std::make_unique<PlainModel>(
      build_plain("no-defense", cfg.target_blocks, classes, derive(seed, Stream::kPlainInit), image_channels(data)));
  sgd.seed = derive(seed, Stream::kPlainShuffle);
  m.plain_run = labelled("no-defense", [&] { return train_plain(data.train, *m.plain, sgd); });

  m.pgd_at = std::make_unique<PlainModel>(
      build_plain("pgd-at", cfg.target_blocks, classes, derive(seed, Stream::kPgdAtInit), image_channels(data)));
  sgd.seed = derive(seed, Stream::kPgdAtShuffle);
  auto attack = cfg.pgd_at;
  attack.seed = derive(seed, Stream::kPgdAtAttack);
  m.pgd_at_run = labelled("pgd-at", [&] { return train_pgd_at(data.train, *m.pgd_at, sgd, attack); });
  return m;
}

std::vector<MethodResult> training_summaries(const ExperimentConfig& cfg, const TrainedModels& m) {
  return {training_summary("no-defense", m.plain_run, cost_no_defense()),
          training_summary("abnn", m.abnn_run, cost_abnn()),
          training_summary("pgd-at", m.pgd_at_run, cost_pgd_at(cfg.pgd_at.t_max))};
}

namespace {

void evaluate_methods(const ExperimentConfig& cfg, const ExperimentData& data, TrainedModels& models,
                      std::vector<MethodResult>& methods, std::uint64_t seed) {
  auto pgd = cfg.pgd;
  pgd.seed = derive(seed, Stream::kEvalAttack);
  const auto bs = cfg.eval_batch_size;
  for (auto& m : methods) {
    Classifier* model = m.method == "abnn"         ? static_cast<Classifier*>(models.abnn.get())
                        : m.method == "no-defense" ? models.plain.get()
                                                   : models.pgd_at.get();
    m.clean_acc = evaluate_under_attack(*model, data.test, NoAttack{}, bs);
    if (m.method != "abnn") {
      m.pgd_acc = evaluate_under_attack(*model, data.test, pgd, bs);
      m.roa_acc = evaluate_under_attack(*model, data.test, cfg.roa, bs);
      continue;
    }
    auto& abnn = *models.abnn;
    if (cfg.attack_gradient != AttackGradient::kTargetOnly) {
      abnn.set_input_gradient(InputGradient::kFullFramework);
      m.pgd_acc = evaluate_under_attack(abnn, data.test, pgd, bs);
      m.roa_acc = evaluate_under_attack(abnn, data.test, cfg.roa, bs);
    }
    if (cfg.attack_gradient != AttackGradient::kFullFramework) {
      abnn.set_input_gradient(InputGradient::kTargetOnly);
      m.pgd_acc_target_only = evaluate_under_attack(abnn, data.test, pgd, bs);
      m.roa_acc_target_only = evaluate_under_attack(abnn, data.test, cfg.roa, bs);
      if (cfg.attack_gradient == AttackGradient::kTargetOnly) {
        m.pgd_acc = *m.pgd_acc_target_only;
        m.roa_acc = *m.roa_acc_target_only;
      }
    }
    abnn.set_input_gradient(InputGradient::kFullFramework);
  }
}

}  // namespace

void evaluate_trained(const ExperimentConfig& cfg, const ExperimentData& data, TrainedModels& models,
                      std::vector<MethodResult>& methods, std::uint64_t seed) {
  evaluate_methods(cfg, data, models, methods, seed);
}

// ---------------------------------------------------------------- persistence

void save_trained(const TrainedModels& m, const fs::path& dir) {
  fs::create_directories(dir);
  save_checkpoint(dir / kSubstituteCheckpoint, m.substitute->state());
  save_checkpoint(dir / kAbnnCheckpoint, m.abnn->target().state());
  save_checkpoint(dir / kPlainCheckpoint, m.plain->state());
  save_checkpoint(dir / kPgdAtCheckpoint, m.pgd_at->state());
}

std::shared_ptr<SubstituteModel> load_substitute(const ExperimentConfig& cfg, const ExperimentData& data,
                                                 const fs::path& dir) {
  auto sub = build_substitute(cfg.substitute_blocks, data.pretrain.num_classes, 0, data.pretrain.channels);
  sub->load_state(load_checkpoint(dir / kSubstituteCheckpoint));
  freeze(*sub);
  sub->set_mode(NormMode::kEval);
  return sub;
}

TrainedModels load_trained(const ExperimentConfig& cfg, const ExperimentData& data, const fs::path& dir) {
  TrainedModels m;
  m.substitute = load_substitute(cfg, data, dir);
  const auto classes = target_classes(data);
  m.abnn = std::make_unique<ABNNModel>(build_abnn(cfg.target_blocks, m.substitute, classes, 0));
  m.abnn->target().load_state(load_checkpoint(dir / kAbnnCheckpoint));
  m.plain = std::make_unique<PlainModel>(build_plain("no-defense", cfg.target_blocks, classes, 0, image_channels(data)));
  m.plain->load_state(load_checkpoint(dir / kPlainCheckpoint));
  m.pgd_at = std::make_unique<PlainModel>(build_plain("pgd-at", cfg.target_blocks, classes, 0, image_channels(data)));
  m.pgd_at->load_state(load_checkpoint(dir / kPgdAtCheckpoint));
  for (auto* p : {m.plain.get(), m.pgd_at.get()}) p->set_mode(NormMode::kEval);
  return m;
}

std::string results_csv(const std::vector<MethodResult>& methods) {
  std::string out = "method,clean_acc,pgd_acc,roa_acc,passes_per_step\n";
  char buf[160];
  for (const auto& m : methods) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f\n", m.method.c_str(), static_cast<double>(m.clean_acc),
                  static_cast<double>(m.pgd_acc), static_cast<double>(m.roa_acc), m.passes_per_step());
    out += buf;
  }
  return out;
}

const MethodResult& SeedReport::method(const std::string& name) const {
  for (const auto& m : methods) {
    if (m.method == name) return m;
  }
  throw std::out_of_range("no method " + name);
}

bool SeedReport::succeeded() const {
  const bool costs = std::all_of(methods.begin(), methods.end(), [](const auto& m) { return m.cost_verified; });
  return costs && classes_disjoint && substitute_digest_before == substitute_digest_after &&
         method("abnn").attack_calls_during_training == 0;
}

void write_seed_report(const ExperimentConfig& cfg, const SeedReport& r, const fs::path& dir) {
  fs::create_directories(dir);
  json methods = json::array();
  for (const auto& m : r.methods) methods.push_back(method_json(m));
  const int t = cfg.pgd_at.t_max;
  json report = {
      {"schema_version", 1},
      {"seed", r.seed},
      {"config", config_json(cfg)},
      {"classes_disjoint", r.classes_disjoint},
      {"substitute",
       {{"pretrain_losses", r.pretrain_losses},
        {"digest_before_target_training", hex(r.substitute_digest_before)},
        {"digest_after_pipeline", hex(r.substitute_digest_after)},
        {"unchanged", r.substitute_digest_before == r.substitute_digest_after}}},
      {"methods", methods},
      {"cost_model",
       {{"t_max", t},
        {"no_defense", cost_no_defense()},
        {"abnn", cost_abnn()},
        {"pgd_at", cost_pgd_at(t)},
        {"oudefend", cost_oudefend(t)},
        {"pgd_at_over_abnn", cost_ratio(t)}}},
      {"verdicts",
       {{"no_defense_cost", r.method("no-defense").cost_verified},
        {"abnn_cost", r.method("abnn").cost_verified},
        {"pgd_at_cost", r.method("pgd-at").cost_verified},
        {"abnn_clean_only", r.method("abnn").attack_calls_during_training == 0},
        {"substitute_unchanged", r.substitute_digest_before == r.substitute_digest_after},
        {"success", r.succeeded()}}},
  };
  write_text(dir / "report.json", report.dump(2) + "\n");
  write_text(dir / "results.csv", results_csv(r.methods));
}

SeedReport run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  SeedReport r;
  r.seed = seed;
  r.classes_disjoint = disjoint(cfg.data.pretrain_classes, cfg.data.target_classes);

  ExperimentData data;
  try {
    data = load_experiment_data(cfg, seed);
  } catch (const std::exception& e) {
    throw StageError("data", e.what());
  }

  std::shared_ptr<SubstituteModel> sub;
  try {
    TrainResult pre;
    sub = run_pretrain(cfg, data, seed, &pre);
    r.pretrain_losses = pre.epoch_losses;
  } catch (const std::exception& e) {
    throw StageError("pretrain", e.what());
  }
  r.substitute_digest_before = parameter_digest(*sub);

  TrainedModels models;
  try {
    models = run_train(cfg, data, sub, seed);
    save_trained(models, dir);
  } catch (const std::exception& e) {
    throw StageError("train", e.what());
  }

  try {
    r.methods = training_summaries(cfg, models);
    evaluate_methods(cfg, data, models, r.methods, seed);
  } catch (const std::exception& e) {
    throw StageError("eval", e.what());
  }
  r.substitute_digest_after = parameter_digest(*sub);

  try {
    write_seed_report(cfg, r, dir);
  } catch (const std::exception& e) {
    throw StageError("report", e.what());
  }
  return r;
}

std::vector<MethodResult> median_over_seeds(const std::vector<SeedReport>& reports) {
  if (reports.empty()) return {};
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
  };
  std::vector<MethodResult> out;
  for (const auto& first : reports.front().methods) {
    MethodResult m;
    m.method = first.method;
    std::vector<double> clean, pgd, roa, pgd_t, roa_t;
    m.cost_verified = true;
    for (const auto& r : reports) {
      const auto& x = r.method(first.method);
      clean.push_back(x.clean_acc);
      pgd.push_back(x.pgd_acc);
      roa.push_back(x.roa_acc);
      if (x.pgd_acc_target_only) pgd_t.push_back(*x.pgd_acc_target_only);
      if (x.roa_acc_target_only) roa_t.push_back(*x.roa_acc_target_only);
      m.steps += x.steps;
      m.passes_total += x.passes_total;
      m.cost_verified = m.cost_verified && x.cost_verified;
    }
    m.clean_acc = static_cast<Scalar>(median(clean));
    m.pgd_acc = static_cast<Scalar>(median(pgd));
    m.roa_acc = static_cast<Scalar>(median(roa));
    if (pgd_t.size() == reports.size()) m.pgd_acc_target_only = static_cast<Scalar>(median(pgd_t));
    if (roa_t.size() == reports.size()) m.roa_acc_target_only = static_cast<Scalar>(median(roa_t));
    m.predicted_passes_per_step = first.predicted_passes_per_step;
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<SeedReport> run_experiment(const ExperimentConfig& cfg) {
  check_inputs(cfg);
  auto seeds = cfg.seeds;
  std::sort(seeds.begin(), seeds.end());
  std::vector<SeedReport> reports;
  for (auto s : seeds) {
    const auto dir = seeds.size() == 1 ? cfg.output_dir : cfg.output_dir / ("seed-" + std::to_string(s));
    reports.push_back(run_seed(cfg, s, dir));
  }
  if (seeds.size() > 1) {
    json runs = json::array();
    std::string csv = "seed,method,clean_acc,pgd_acc,roa_acc,passes_per_step\n";
    for (const auto& r : reports) {
      json methods = json::array();
      for (const auto& m : r.methods) methods.push_back(method_json(m));
      runs.push_back({{"seed", r.seed}, {"success", r.succeeded()}, {"methods", methods}});
      std::istringstream rows(results_csv(r.methods));
      std::string line;
      std::getline(rows, line);  // header
      while (std::getline(rows, line)) csv += std::to_string(r.seed) + "," + line + "\n";
    }
    json medians = json::array();
    for (const auto& m : median_over_seeds(reports)) {
      json j = {{"method", m.method}, {"clean_acc", m.clean_acc}, {"pgd_acc", m.pgd_acc}, {"roa_acc", m.roa_acc},
                {"passes_per_step", m.passes_per_step()}, {"cost_verified", m.cost_verified}};
      if (m.pgd_acc_target_only) j["pgd_acc_target_only"] = *m.pgd_acc_target_only;
      if (m.roa_acc_target_only) j["roa_acc_target_only"] = *m.roa_acc_target_only;
      medians.push_back(j);
    }
    try {
      write_text(cfg.output_dir / "summary.json",
                 json({{"seeds", seeds}, {"runs", runs}, {"median", medians}}).dump(2) + "\n");
      write_text(cfg.output_dir / "summary.csv", csv);
    } catch (const std::exception& e) {
      throw StageError("report", e.what());
    }
  }
  return reports;
}

void write_training_manifest(const ExperimentConfig& cfg, const TrainedModels& m, std::uint64_t seed,
                             std::uint64_t digest, const fs::path& dir) {
  json methods = json::array();
  for (const auto& r : training_summaries(cfg, m)) methods.push_back(method_json(r));
  write_text(dir / "train-manifest.json",
             json({{"seed", seed}, {"config", config_json(cfg)}, {"substitute_digest", hex(digest)},
                   {"methods", methods}})
                     .dump(2) +
                 "\n");
}

std::vector<MethodResult> read_training_manifest(const fs::path& dir, std::uint64_t* digest) {
  std::ifstream in(dir / "train-manifest.json");
  if (!in) throw std::runtime_error("missing " + (dir / "train-manifest.json").string() + "; run `train` first");
  const auto j = json::parse(in);
  std::vector<MethodResult> out;
  for (const auto& m : j.at("methods")) out.push_back(method_from_json(m));
  if (digest) *digest = std::stoull(j.at("substitute_digest").get<std::string>(), nullptr, 16);
  return out;
}

}  // namespace abnn
