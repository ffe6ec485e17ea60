#include "m2d/io.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace m2d::io {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

constexpr int kConfigVersion = 1;
constexpr int kTrajectoryVersion = 1;
constexpr int kCheckpointVersion = 1;
constexpr int kRunManifestVersion = 1;

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void reject_unknown_keys(const json& obj, const std::vector<std::string>& allowed,
                         const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const auto& k : allowed) known = known || k == it.key();
    if (!known)
      throw ConfigError("unknown field \"" + it.key() + "\" in " + where);
  }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for \"" + key + "\": " + e.what());
  }
}

std::ofstream open_out(const std::string& path, bool binary = false) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw DataError("cannot open for writing: " + path);
  return out;
}

std::ifstream open_in(const std::string& path, bool binary = false) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw DataError("cannot open for reading: " + path);
  return in;
}

// Simple exclusive ownership of a run directory.
class DirLock {
 public:
  DirLock(const std::string& dir, bool force) : path_(dir + "/lock") {
    fs::create_directories(dir);
    if (force) ::unlink(path_.c_str());
    int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw DataError("run directory is locked by another process: " + dir +
                      " (use --force to override)");
    ::close(fd);
  }
  ~DirLock() { ::unlink(path_.c_str()); }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
};

}  // namespace

void ExperimentConfig::validate() const {
  check_arg(suite.num_tasks >= 1, "config: suite.num_tasks must be >= 1");
  check_arg(suite.demos_per_task >= 1, "config: suite.demos_per_task must be >= 1");
  policy.validate();
  train::TrainConfig t = train;
  t.seed = 0;
  t.validate();
  check_arg(!seeds.empty(), "config: seeds must be nonempty");
  check_arg(!out_dir.empty(), "config: out_dir must be nonempty");
}

ExperimentConfig config_from_json_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be an object");
  reject_unknown_keys(root, {"format", "version", "suite", "policy", "train",
                             "out_dir", "seeds"},
                      "config root");
  if (get_or<int>(root, "version", kConfigVersion) != kConfigVersion)
    throw ConfigError("unsupported config version");

  ExperimentConfig cfg;
  if (root.contains("suite")) {
    const json& s = root.at("suite");
    reject_unknown_keys(s, {"kind", "num_tasks", "demos_per_task", "seed"},
                        "config.suite");
    if (s.contains("kind"))
      cfg.suite.kind = sim::suite_kind_from_string(s.at("kind").get<std::string>());
    cfg.suite.num_tasks = get_or<int>(s, "num_tasks", cfg.suite.num_tasks);
    cfg.suite.demos_per_task = get_or<int>(s, "demos_per_task", cfg.suite.demos_per_task);
    cfg.suite.seed = get_or<uint64_t>(s, "seed", cfg.suite.seed);
  }
  if (root.contains("policy")) {
    const json& p = root.at("policy");
    reject_unknown_keys(
        p, {"latent_dim", "context_len", "components", "action_dim", "enc_hidden"},
        "config.policy");
    cfg.policy.latent_dim = get_or<int>(p, "latent_dim", cfg.policy.latent_dim);
    cfg.policy.context_len = get_or<int>(p, "context_len", cfg.policy.context_len);
    cfg.policy.components = get_or<int>(p, "components", cfg.policy.components);
    cfg.policy.action_dim = get_or<int>(p, "action_dim", cfg.policy.action_dim);
    cfg.policy.enc_hidden = get_or<int>(p, "enc_hidden", cfg.policy.enc_hidden);
  }
  // Per-suite preset unless given explicitly.
  double preset_ip = cfg.suite.kind == sim::SuiteKind::kGoal ? 0.25 : 0.05;
  cfg.train.weights = losses::LossWeights{preset_ip, 0.05, 0.05, preset_ip};
  if (root.contains("train")) {
    const json& t = root.at("train");
    reject_unknown_keys(t,
                        {"epochs", "batch_size", "learning_rate", "lambda_i",
                         "lambda_t", "lambda_e", "lambda_p", "kl_samples",
                         "eval_epochs", "eval_episodes", "replay_mix",
                         "replay_capacity", "grad_clip", "eval_threads", "method"},
                        "config.train");
    cfg.train.epochs = get_or<int>(t, "epochs", cfg.train.epochs);
    cfg.train.batch_size = get_or<int>(t, "batch_size", cfg.train.batch_size);
    cfg.train.learning_rate = get_or<double>(t, "learning_rate", cfg.train.learning_rate);
    cfg.train.weights.lambda_i = get_or<double>(t, "lambda_i", cfg.train.weights.lambda_i);
    cfg.train.weights.lambda_t = get_or<double>(t, "lambda_t", cfg.train.weights.lambda_t);
    cfg.train.weights.lambda_e = get_or<double>(t, "lambda_e", cfg.train.weights.lambda_e);
    cfg.train.weights.lambda_p = get_or<double>(t, "lambda_p", cfg.train.weights.lambda_p);
    cfg.train.kl_samples = get_or<int>(t, "kl_samples", cfg.train.kl_samples);
    cfg.train.eval_epochs =
        get_or<std::vector<int>>(t, "eval_epochs", cfg.train.eval_epochs);
    cfg.train.eval_episodes = get_or<int>(t, "eval_episodes", cfg.train.eval_episodes);
    cfg.train.replay_mix = get_or<double>(t, "replay_mix", cfg.train.replay_mix);
    cfg.train.replay_capacity =
        get_or<int>(t, "replay_capacity", cfg.train.replay_capacity);
    cfg.train.grad_clip = get_or<double>(t, "grad_clip", cfg.train.grad_clip);
    cfg.train.eval_threads = get_or<int>(t, "eval_threads", cfg.train.eval_threads);
    if (t.contains("method"))
      cfg.train.method = train::method_from_string(t.at("method").get<std::string>());
  }
  cfg.out_dir = get_or<std::string>(root, "out_dir", cfg.out_dir);
  cfg.seeds = get_or<std::vector<uint64_t>>(root, "seeds", cfg.seeds);
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json_text(ss.str());
}

std::string config_to_json_text(const ExperimentConfig& cfg) {
  json root;
  root["format"] = "m2d-config";
  root["version"] = kConfigVersion;
  root["suite"] = {{"kind", sim::to_string(cfg.suite.kind)},
                   {"num_tasks", cfg.suite.num_tasks},
                   {"demos_per_task", cfg.suite.demos_per_task},
                   {"seed", cfg.suite.seed}};
  root["policy"] = {{"latent_dim", cfg.policy.latent_dim},
                    {"context_len", cfg.policy.context_len},
                    {"components", cfg.policy.components},
                    {"action_dim", cfg.policy.action_dim},
                    {"enc_hidden", cfg.policy.enc_hidden}};
  root["train"] = {{"epochs", cfg.train.epochs},
                   {"batch_size", cfg.train.batch_size},
                   {"learning_rate", cfg.train.learning_rate},
                   {"lambda_i", cfg.train.weights.lambda_i},
                   {"lambda_t", cfg.train.weights.lambda_t},
                   {"lambda_e", cfg.train.weights.lambda_e},
                   {"lambda_p", cfg.train.weights.lambda_p},
                   {"kl_samples", cfg.train.kl_samples},
                   {"eval_epochs", cfg.train.eval_epochs},
                   {"eval_episodes", cfg.train.eval_episodes},
                   {"replay_mix", cfg.train.replay_mix},
                   {"replay_capacity", cfg.train.replay_capacity},
                   {"grad_clip", cfg.train.grad_clip},
                   {"eval_threads", cfg.train.eval_threads},
                   {"method", train::to_string(cfg.train.method)}};
  root["out_dir"] = cfg.out_dir;
  root["seeds"] = cfg.seeds;
  return root.dump();
}

std::string config_hash(const ExperimentConfig& cfg) {
  // FNV-1a of the canonical JSON form.
  std::string text = config_to_json_text(cfg);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, h);
  return buf;
}

void save_trajectories(const std::string& path, sim::SuiteKind kind,
                       const std::vector<sim::Trajectory>& trajectories) {
  std::ofstream out = open_out(path);
  for (const auto& traj : trajectories) {
    json rec;
    rec["v"] = kTrajectoryVersion;
    rec["task"] = traj.task_id;
    rec["suite"] = sim::to_string(kind);
    rec["success"] = traj.success;
    std::vector<double> obs;
    std::vector<double> act;
    obs.reserve(traj.steps.size() * sim::kObsDim);
    act.reserve(traj.steps.size() * 3);
    for (const auto& step : traj.steps) {
      obs.insert(obs.end(), step.obs.agentview.begin(), step.obs.agentview.end());
      obs.insert(obs.end(), step.obs.handeye.begin(), step.obs.handeye.end());
      obs.insert(obs.end(), step.obs.lang.begin(), step.obs.lang.end());
      obs.insert(obs.end(), step.obs.joint.begin(), step.obs.joint.end());
      obs.push_back(step.obs.gripper[0]);
      act.push_back(step.action.dx);
      act.push_back(step.action.dy);
      act.push_back(step.action.grip);
    }
    rec["len"] = traj.steps.size();
    rec["obs"] = obs;
    rec["act"] = act;
    out << rec.dump() << "\n";
  }
}

std::vector<sim::Trajectory> load_trajectories(const std::string& path) {
  std::ifstream in = open_in(path);
  std::vector<sim::Trajectory> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": bad record: " + e.what());
    }
    if (get_or<int>(rec, "v", -1) != kTrajectoryVersion)
      throw DataError(path + ": unsupported trajectory format version");
    sim::Trajectory traj;
    traj.task_id = rec.at("task").get<int>();
    traj.success = rec.at("success").get<bool>();
    size_t len = rec.at("len").get<size_t>();
    auto obs = rec.at("obs").get<std::vector<double>>();
    auto act = rec.at("act").get<std::vector<double>>();
    if (obs.size() != len * sim::kObsDim || act.size() != len * 3)
      throw DataError(path + ":" + std::to_string(line_no) + ": length fields disagree");
    traj.steps.resize(len);
    const double* po = obs.data();
    for (size_t t = 0; t < len; ++t) {
      sim::MultiModalObs& o = traj.steps[t].obs;
      std::copy(po, po + sim::kAgentViewDim, o.agentview.begin());
      po += sim::kAgentViewDim;
      std::copy(po, po + sim::kHandEyeDim, o.handeye.begin());
      po += sim::kHandEyeDim;
      std::copy(po, po + sim::kLangDim, o.lang.begin());
      po += sim::kLangDim;
      std::copy(po, po + sim::kJointDim, o.joint.begin());
      po += sim::kJointDim;
      o.gripper[0] = *po++;
      traj.steps[t].action = {act[t * 3], act[t * 3 + 1], act[t * 3 + 2]};
    }
    out.push_back(std::move(traj));
  }
  return out;
}

void save_checkpoint(const std::string& path, const policy::PolicyParams& params) {
  json header;
  header["version"] = kCheckpointVersion;
  header["config"] = {{"latent_dim", params.config.latent_dim},
                      {"context_len", params.config.context_len},
                      {"components", params.config.components},
                      {"action_dim", params.config.action_dim},
                      {"enc_hidden", params.config.enc_hidden}};
  json tensors = json::array();
  for (const auto& [name, v] : params.params.items)
    tensors.push_back({{"name", name}, {"shape", v->val.shape()}});
  header["tensors"] = tensors;
  std::string head = header.dump();

  std::ofstream out = open_out(path, /*binary=*/true);
  out.write("M2DCKPT1", 8);
  uint64_t head_len = head.size();
  out.write(reinterpret_cast<const char*>(&head_len), sizeof(head_len));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const auto& [name, v] : params.params.items)
    out.write(reinterpret_cast<const char*>(v->val.data()),
              static_cast<std::streamsize>(v->val.size() * sizeof(double)));
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

policy::PolicyParams load_checkpoint(const std::string& path) {
  std::ifstream in = open_in(path, /*binary=*/true);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != "M2DCKPT1")
    throw DataError("corrupt checkpoint (bad magic): " + path);
  uint64_t head_len = 0;
  in.read(reinterpret_cast<char*>(&head_len), sizeof(head_len));
  if (!in || head_len == 0 || head_len > (1u << 20))
    throw DataError("corrupt checkpoint (bad header length): " + path);
  std::string head(head_len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_len));
  if (!in) throw DataError("corrupt checkpoint (truncated header): " + path);
  json header;
  try {
    header = json::parse(head);
  } catch (const json::exception& e) {
    throw DataError("corrupt checkpoint (header JSON): " + path + ": " + e.what());
  }
  if (get_or<int>(header, "version", -1) != kCheckpointVersion)
    throw DataError("unsupported checkpoint version: " + path);

  policy::PolicyConfig config;
  const json& c = header.at("config");
  config.latent_dim = c.at("latent_dim").get<int>();
  config.context_len = c.at("context_len").get<int>();
  config.components = c.at("components").get<int>();
  config.action_dim = c.at("action_dim").get<int>();
  config.enc_hidden = c.at("enc_hidden").get<int>();

  policy::PolicyParams params = policy::init_params(config, 0);
  const json& tensors = header.at("tensors");
  if (tensors.size() != params.params.items.size())
    throw DataError("corrupt checkpoint (tensor count): " + path);
  for (size_t i = 0; i < params.params.items.size(); ++i) {
    auto& [name, v] = params.params.items[i];
    const json& t = tensors.at(i);
    if (t.at("name").get<std::string>() != name ||
        t.at("shape").get<std::vector<int>>() != v->val.shape())
      throw DataError("corrupt checkpoint (tensor layout): " + path);
    in.read(reinterpret_cast<char*>(v->val.data()),
            static_cast<std::streamsize>(v->val.size() * sizeof(double)));
    if (!in) throw DataError("corrupt checkpoint (truncated data): " + path);
  }
  return params;
}

void save_success_tensor(const std::string& path, const eval::SuccessTensor& c) {
  std::ofstream out = open_out(path);
  out << "task_i,task_j,epoch,rate\n";
  for (int i = 0; i < c.num_tasks(); ++i)
    for (int j = 0; j <= i; ++j)
      for (int e : c.eval_epochs())
        out << (i + 1) << "," << (j + 1) << "," << e << "," << fmt_double(c.at(i, j, e))
            << "\n";
}

eval::SuccessTensor load_success_tensor(const std::string& path) {
  std::ifstream in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || line != "task_i,task_j,epoch,rate")
    throw DataError("bad success tensor header in " + path);
  struct Row {
    int i, j, e;
    double rate;
  };
  std::vector<Row> rows;
  int max_task = 0;
  std::vector<int> epochs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Row r{};
    char* end = nullptr;
    r.i = static_cast<int>(std::strtol(line.c_str(), &end, 10));
    r.j = static_cast<int>(std::strtol(end + 1, &end, 10));
    r.e = static_cast<int>(std::strtol(end + 1, &end, 10));
    r.rate = std::strtod(end + 1, nullptr);
    rows.push_back(r);
    max_task = std::max(max_task, r.i);
    if (std::find(epochs.begin(), epochs.end(), r.e) == epochs.end())
      epochs.push_back(r.e);
  }
  std::sort(epochs.begin(), epochs.end());
  eval::SuccessTensor c(max_task, epochs);
  for (const Row& r : rows) c.set(r.i - 1, r.j - 1, r.e, r.rate);
  if (!c.complete()) throw DataError("incomplete success tensor in " + path);
  return c;
}

void save_drift(const std::string& path, const std::vector<eval::DriftRecord>& drift) {
  std::ofstream out = open_out(path);
  out << "step,agentview,handeye,lang,joint,gripper\n";
  for (const auto& d : drift)
    out << (d.step + 1) << "," << fmt_double(d.agentview) << "," << fmt_double(d.handeye)
        << "," << fmt_double(d.lang) << "," << fmt_double(d.joint) << ","
        << fmt_double(d.gripper) << "\n";
}

std::vector<eval::DriftRecord> load_drift(const std::string& path) {
  std::ifstream in = open_in(path);
  std::string line;
  if (!std::getline(in, line) || line != "step,agentview,handeye,lang,joint,gripper")
    throw DataError("bad drift header in " + path);
  std::vector<eval::DriftRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    eval::DriftRecord d;
    char* end = nullptr;
    d.step = static_cast<int>(std::strtol(line.c_str(), &end, 10)) - 1;
    d.agentview = std::strtod(end + 1, &end);
    d.handeye = std::strtod(end + 1, &end);
    d.lang = std::strtod(end + 1, &end);
    d.joint = std::strtod(end + 1, &end);
    d.gripper = std::strtod(end + 1, nullptr);
    out.push_back(d);
  }
  return out;
}

namespace {

std::string data_dir(const ExperimentConfig& cfg) { return cfg.out_dir + "/data"; }

std::string demo_path(const ExperimentConfig& cfg, int task_id) {
  return data_dir(cfg) + "/task_" + std::to_string(task_id + 1) + ".jsonl";
}

std::vector<std::vector<sim::Trajectory>> load_all_demos(const ExperimentConfig& cfg) {
  std::vector<std::vector<sim::Trajectory>> demos;
  for (int k = 0; k < cfg.suite.num_tasks; ++k) {
    std::string path = demo_path(cfg, k);
    if (!fs::exists(path))
      throw DataError("missing demo file " + path + " (run gen-data first)");
    demos.push_back(load_trajectories(path));
    if (static_cast<int>(demos.back().size()) != cfg.suite.demos_per_task)
      throw DataError(path + ": expected " + std::to_string(cfg.suite.demos_per_task) +
                      " trajectories, found " + std::to_string(demos.back().size()));
  }
  return demos;
}

json metrics_row(const std::string& run_id, const ExperimentConfig& cfg,
                 train::Method method, uint64_t seed, const eval::LifelongMetrics& m) {
  return json{{"run_id", run_id},
              {"method", train::to_string(method)},
              {"suite", sim::to_string(cfg.suite.kind)},
              {"seed", seed},
              {"fwt", m.fwt},
              {"nbt", m.nbt},
              {"auc", m.auc}};
}

void save_metrics_csv(const std::string& path, const std::vector<json>& rows) {
  std::ofstream out = open_out(path);
  out << "run_id,method,suite,seed,fwt,nbt,auc\n";
  for (const auto& r : rows)
    out << r.at("run_id").get<std::string>() << "," << r.at("method").get<std::string>()
        << "," << r.at("suite").get<std::string>() << ","
        << r.at("seed").get<uint64_t>() << "," << fmt_double(r.at("fwt").get<double>())
        << "," << fmt_double(r.at("nbt").get<double>()) << ","
        << fmt_double(r.at("auc").get<double>()) << "\n";
}

std::string checkpoint_name(int task_index, int epoch) {
  return "checkpoints/task_" + std::to_string(task_index + 1) + "_epoch_" +
         std::to_string(epoch) + ".ckpt";
}

}  // namespace

std::string run_dir(const ExperimentConfig& cfg, train::Method method, uint64_t seed) {
  return cfg.out_dir + "/runs/" + train::to_string(method) + "/seed_" +
         std::to_string(seed);
}

void gen_data_cmd(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  sim::TaskSuite suite = sim::make_suite(cfg.suite.kind, cfg.suite.num_tasks,
                                         cfg.suite.seed);
  json manifest;
  manifest["format"] = "m2d-suite";
  manifest["version"] = 1;
  manifest["kind"] = sim::to_string(cfg.suite.kind);
  manifest["num_tasks"] = cfg.suite.num_tasks;
  manifest["demos_per_task"] = cfg.suite.demos_per_task;
  manifest["seed"] = cfg.suite.seed;
  json files = json::array();
  for (int k = 0; k < cfg.suite.num_tasks; ++k) {
    const sim::TaskSpec& task = suite.tasks[static_cast<size_t>(k)];
    std::vector<sim::Trajectory> demos =
        sim::collect_demos(task, cfg.suite.demos_per_task, cfg.suite.seed);
    std::string path = demo_path(cfg, k);
    save_trajectories(path, cfg.suite.kind, demos);
    files.push_back(fs::path(path).filename().string());
    log << "task " << (k + 1) << ": wrote " << demos.size() << " demos to " << path
        << "\n";
  }
  manifest["files"] = files;
  std::ofstream out = open_out(data_dir(cfg) + "/suite.json");
  out << manifest.dump(2) << "\n";
  log << "suite manifest: " << data_dir(cfg) << "/suite.json\n";
}

void train_cmd(const ExperimentConfig& cfg, const TrainOptions& options,
               std::ostream& log) {
  cfg.validate();
  std::vector<uint64_t> seeds = options.seeds.empty() ? cfg.seeds : options.seeds;
  sim::TaskSuite suite = sim::make_suite(cfg.suite.kind, cfg.suite.num_tasks,
                                         cfg.suite.seed);
  auto demos = load_all_demos(cfg);

  for (uint64_t seed : seeds) {
    std::string dir = run_dir(cfg, options.method, seed);
    std::string manifest_path = dir + "/manifest.json";
    if (!options.force && fs::exists(manifest_path)) {
      std::ifstream min(manifest_path);
      json m = json::parse(min);
      if (get_or<bool>(m, "complete", false)) {
        log << "skipping completed run " << dir << " (use --force to redo)\n";
        continue;
      }
    }
    DirLock lock(dir, options.force);
    auto t0 = std::chrono::steady_clock::now();

    ExperimentConfig run_cfg = cfg;
    run_cfg.train.method = options.method;
    train::TrainConfig tc = run_cfg.train;
    tc.seed = seed;

    std::ofstream train_log = open_out(dir + "/train_log.jsonl");
    json checkpoints = json::array();
    train::RunHooks hooks;
    hooks.on_epoch = [&](const train::EpochLog& e) {
      json rec{{"task", e.task + 1},          {"epoch", e.epoch},
               {"bc_nll", e.loss.bc_nll},     {"l_agentview", e.loss.l_agentview},
               {"l_handeye", e.loss.l_handeye}, {"l_text", e.loss.l_text},
               {"l_extra", e.loss.l_extra},   {"l_policy", e.loss.l_policy},
               {"total", e.loss.total},       {"wall_seconds", e.wall_seconds}};
      train_log << rec.dump() << "\n";
    };
    hooks.on_checkpoint = [&](int task, int epoch, const policy::PolicyParams& p) {
      std::string rel = checkpoint_name(task, epoch);
      save_checkpoint(dir + "/" + rel, p);
      checkpoints.push_back(rel);
    };

    log << "training " << train::to_string(options.method) << " seed " << seed
        << " -> " << dir << "\n";
    train::LifelongReport report =
        train::run_lifelong(suite, demos, run_cfg.policy, tc, hooks);

    save_success_tensor(dir + "/success_tensor.csv", report.success);
    save_drift(dir + "/drift.csv", report.drift);
    eval::LifelongMetrics m = eval::compute_metrics(report.success);
    std::string run_id = train::to_string(options.method) + "_seed" + std::to_string(seed);
    save_metrics_csv(dir + "/metrics.csv",
                     {metrics_row(run_id, run_cfg, options.method, seed, m)});

    auto t1 = std::chrono::steady_clock::now();
    json manifest;
    manifest["format"] = "m2d-run";
    manifest["version"] = kRunManifestVersion;
    manifest["method"] = train::to_string(options.method);
    manifest["seed"] = seed;
    manifest["config"] = json::parse(config_to_json_text(run_cfg));
    manifest["config_hash"] = config_hash(run_cfg);
    manifest["complete"] = true;
    manifest["checkpoints"] = checkpoints;
    manifest["files"] = {{"success_tensor", "success_tensor.csv"},
                         {"drift", "drift.csv"},
                         {"metrics", "metrics.csv"},
                         {"log", "train_log.jsonl"}};
    manifest["wall_seconds"] = std::chrono::duration<double>(t1 - t0).count();
    std::ofstream mout = open_out(manifest_path);
    mout << manifest.dump(2) << "\n";
    log << "  fwt=" << fmt_double(m.fwt) << " nbt=" << fmt_double(m.nbt)
        << " auc=" << fmt_double(m.auc) << "\n";
  }
}

namespace {

struct RunRef {
  std::string dir;
  json manifest;
  ExperimentConfig config;
  train::Method method;
  uint64_t seed;
};

RunRef load_run(const std::string& dir) {
  std::string manifest_path = dir + "/manifest.json";
  if (!fs::exists(manifest_path))
    throw DataError("no run manifest in " + dir);
  RunRef ref;
  ref.dir = dir;
  try {
    std::ifstream min(manifest_path);
    ref.manifest = json::parse(min);
  } catch (const json::exception& e) {
    throw DataError("corrupt manifest " + manifest_path + ": " + e.what());
  }
  if (get_or<int>(ref.manifest, "version", -1) != kRunManifestVersion)
    throw DataError("unsupported manifest version in " + manifest_path);
  ref.config = config_from_json_text(ref.manifest.at("config").dump());
  ref.method = train::method_from_string(ref.manifest.at("method").get<std::string>());
  ref.seed = ref.manifest.at("seed").get<uint64_t>();
  return ref;
}

std::vector<RunRef> collect_runs(const std::string& root) {
  if (fs::exists(root + "/manifest.json")) return {load_run(root)};
  std::vector<std::string> dirs;
  if (fs::is_directory(root)) {
    for (const auto& entry : fs::directory_iterator(root))
      if (entry.is_directory() && fs::exists(entry.path() / "manifest.json"))
        dirs.push_back(entry.path().string());
  }
  if (dirs.empty())
    throw DataError("no runs found under " + root +
                    " (expected manifest.json or seed subdirectories)");
  std::sort(dirs.begin(), dirs.end());
  std::vector<RunRef> runs;
  runs.reserve(dirs.size());
  for (const auto& d : dirs) runs.push_back(load_run(d));
  return runs;
}

eval::SuccessTensor recompute_success(const RunRef& run) {
  const ExperimentConfig& cfg = run.config;
  sim::TaskSuite suite = sim::make_suite(cfg.suite.kind, cfg.suite.num_tasks,
                                         cfg.suite.seed);
  eval::SuccessTensor c(cfg.suite.num_tasks, cfg.train.eval_epochs);
  for (int i = 0; i < cfg.suite.num_tasks; ++i) {
    for (int epoch : cfg.train.eval_epochs) {
      std::string path = run.dir + "/" + checkpoint_name(i, epoch);
      policy::PolicyParams params = load_checkpoint(path);
      policy::EvalPolicy frozen(params);
      uint64_t eval_seed = train::checkpoint_eval_seed(run.seed, i, epoch);
      for (int j = 0; j <= i; ++j)
        c.set(i, j, epoch,
              eval::rollout_success(frozen, suite.tasks[static_cast<size_t>(j)],
                                    cfg.train.eval_episodes, eval_seed,
                                    cfg.train.eval_threads));
    }
  }
  return c;
}

struct Stats {
  double mean = 0.0, se = 0.0;
};

Stats mean_se(const std::vector<double>& xs) {
  Stats s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double var = 0.0;
    for (double x : xs) var += (x - s.mean) * (x - s.mean);
    var /= static_cast<double>(xs.size() - 1);
    s.se = std::sqrt(var / static_cast<double>(xs.size()));
  }
  return s;
}

}  // namespace

void eval_cmd(const std::string& run_dir_path, bool recompute,
              const std::string& out_file, std::ostream& out) {
  std::vector<RunRef> runs = collect_runs(run_dir_path);
  std::vector<json> rows;
  std::vector<double> fwt, nbt, auc;
  for (const auto& run : runs) {
    eval::SuccessTensor c = recompute
                                ? recompute_success(run)
                                : load_success_tensor(run.dir + "/success_tensor.csv");
    eval::LifelongMetrics m = eval::compute_metrics(c);
    std::string run_id =
        train::to_string(run.method) + "_seed" + std::to_string(run.seed);
    rows.push_back(metrics_row(run_id, run.config, run.method, run.seed, m));
    fwt.push_back(m.fwt);
    nbt.push_back(m.nbt);
    auc.push_back(m.auc);
  }
  std::ostringstream table;
  table << "run_id,method,suite,seed,fwt,nbt,auc\n";
  for (const auto& r : rows)
    table << r.at("run_id").get<std::string>() << ","
          << r.at("method").get<std::string>() << "," << r.at("suite").get<std::string>()
          << "," << r.at("seed").get<uint64_t>() << ","
          << fmt_double(r.at("fwt").get<double>()) << ","
          << fmt_double(r.at("nbt").get<double>()) << ","
          << fmt_double(r.at("auc").get<double>()) << "\n";
  Stats sf = mean_se(fwt), sn = mean_se(nbt), sa = mean_se(auc);
  const auto& first = rows.front();
  table << "mean," << first.at("method").get<std::string>() << ","
        << first.at("suite").get<std::string>() << ",-," << fmt_double(sf.mean) << ","
        << fmt_double(sn.mean) << "," << fmt_double(sa.mean) << "\n";
  table << "stderr," << first.at("method").get<std::string>() << ","
        << first.at("suite").get<std::string>() << ",-," << fmt_double(sf.se) << ","
        << fmt_double(sn.se) << "," << fmt_double(sa.se) << "\n";

  out << table.str();
  // Drift table: mean over runs per step and modality.
  std::map<int, std::array<std::vector<double>, 5>> by_step;
  for (const auto& run : runs) {
    for (const auto& d : load_drift(run.dir + "/drift.csv")) {
      auto& slot = by_step[d.step];
      slot[0].push_back(d.agentview);
      slot[1].push_back(d.handeye);
      slot[2].push_back(d.lang);
      slot[3].push_back(d.joint);
      slot[4].push_back(d.gripper);
    }
  }
  std::ostringstream drift_table;
  drift_table << "step,agentview,handeye,lang,joint,gripper\n";
  for (const auto& [step, mods] : by_step) {
    drift_table << (step + 1);
    for (const auto& xs : mods) drift_table << "," << fmt_double(mean_se(xs).mean);
    drift_table << "\n";
  }
  out << drift_table.str();
  if (!out_file.empty()) {
    std::ofstream f = open_out(out_file);
    f << table.str() << drift_table.str();
  }
}

void report_cmd(const std::vector<std::string>& run_dirs,
                const std::string& out_prefix, std::ostream& out) {
  check_arg(!run_dirs.empty(), "report: need at least one run directory");
  std::vector<RunRef> runs;
  for (const auto& d : run_dirs)
    for (auto& r : collect_runs(d)) runs.push_back(std::move(r));

  const SuiteConfig& ref_suite = runs.front().config.suite;
  for (const auto& r : runs) {
    const SuiteConfig& s = r.config.suite;
    if (s.kind != ref_suite.kind || s.num_tasks != ref_suite.num_tasks ||
        s.seed != ref_suite.seed || s.demos_per_task != ref_suite.demos_per_task)
      throw ConfigError("report: runs use different suites (" + r.dir + ")");
  }

  std::ofstream curves = open_out(out_prefix + "_success_curves.csv");
  curves << "method,seed,task_i,task_j,epoch,rate\n";
  std::ofstream drift_curves = open_out(out_prefix + "_drift_curves.csv");
  drift_curves << "method,seed,step,modality,value\n";
  std::map<std::string, std::array<std::vector<double>, 3>> by_method;

  for (const auto& run : runs) {
    eval::SuccessTensor c = load_success_tensor(run.dir + "/success_tensor.csv");
    eval::LifelongMetrics m = eval::compute_metrics(c);

    // Consistency check against the metrics recorded at training time.
    std::ifstream mf(run.dir + "/metrics.csv");
    if (mf) {
      std::string header, row;
      std::getline(mf, header);
      std::getline(mf, row);
      size_t p = row.rfind(',');
      size_t p2 = row.rfind(',', p - 1);
      size_t p3 = row.rfind(',', p2 - 1);
      double stored_fwt = std::strtod(row.c_str() + p3 + 1, nullptr);
      double stored_nbt = std::strtod(row.c_str() + p2 + 1, nullptr);
      double stored_auc = std::strtod(row.c_str() + p + 1, nullptr);
      if (stored_fwt != m.fwt || stored_nbt != m.nbt || stored_auc != m.auc)
        throw DataError("report: stored metrics disagree with success tensor in " +
                        run.dir);
    }

    std::string method = train::to_string(run.method);
    for (int i = 0; i < c.num_tasks(); ++i)
      for (int j = 0; j <= i; ++j)
        for (int e : c.eval_epochs())
          curves << method << "," << run.seed << "," << (i + 1) << "," << (j + 1) << ","
                 << e << "," << fmt_double(c.at(i, j, e)) << "\n";
    for (const auto& d : load_drift(run.dir + "/drift.csv")) {
      const std::pair<const char*, double> mods[5] = {{"agentview", d.agentview},
                                                      {"handeye", d.handeye},
                                                      {"lang", d.lang},
                                                      {"joint", d.joint},
                                                      {"gripper", d.gripper}};
      for (const auto& [name, value] : mods)
        drift_curves << method << "," << run.seed << "," << (d.step + 1) << "," << name
                     << "," << fmt_double(value) << "\n";
    }
    auto& agg = by_method[method];
    agg[0].push_back(m.fwt);
    agg[1].push_back(m.nbt);
    agg[2].push_back(m.auc);
  }

  std::ofstream cmp = open_out(out_prefix + "_comparison.csv");
  cmp << "method,fwt_mean,fwt_se,nbt_mean,nbt_se,auc_mean,auc_se\n";
  out << "method,fwt_mean,fwt_se,nbt_mean,nbt_se,auc_mean,auc_se\n";
  for (const auto& [method, agg] : by_method) {
    Stats f = mean_se(agg[0]), n = mean_se(agg[1]), a = mean_se(agg[2]);
    std::ostringstream row;
    row << method << "," << fmt_double(f.mean) << "," << fmt_double(f.se) << ","
        << fmt_double(n.mean) << "," << fmt_double(n.se) << "," << fmt_double(a.mean)
        << "," << fmt_double(a.se) << "\n";
    cmp << row.str();
    out << row.str();
  }
}

}  // namespace m2d::io
