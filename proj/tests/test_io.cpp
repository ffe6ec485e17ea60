#include <doctest.h>

#include <cstdio>
#include <unistd.h>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "m2d/io.hpp"

using namespace m2d;
using namespace m2d::io;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("m2d_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string str() const { return path.string(); }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig tiny_experiment(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.suite.kind = sim::SuiteKind::kObject;
  cfg.suite.num_tasks = 2;
  cfg.suite.demos_per_task = 3;
  cfg.suite.seed = 5;
  cfg.policy.latent_dim = 16;
  cfg.policy.enc_hidden = 8;
  cfg.policy.context_len = 2;
  cfg.policy.components = 2;
  cfg.train.epochs = 2;
  cfg.train.eval_epochs = {1, 2};
  cfg.train.eval_episodes = 2;
  cfg.train.batch_size = 8;
  cfg.train.kl_samples = 4;
  cfg.out_dir = out_dir;
  cfg.seeds = {100};
  return cfg;
}

}  // namespace

TEST_CASE("config: defaults, lambda preset per suite kind, strict keys") {
  ExperimentConfig goal = config_from_json_text(R"({"suite": {"kind": "GOAL"}})");
  CHECK(goal.train.weights.lambda_i == 0.25);
  CHECK(goal.train.weights.lambda_p == 0.25);
  CHECK(goal.train.weights.lambda_t == 0.05);
  CHECK(goal.train.weights.lambda_e == 0.05);

  ExperimentConfig object = config_from_json_text(R"({"suite": {"kind": "OBJECT"}})");
  CHECK(object.train.weights.lambda_i == 0.05);
  CHECK(object.train.weights.lambda_p == 0.05);
  CHECK(object.policy.latent_dim == 64);
  CHECK(object.train.epochs == 50);
  CHECK(object.train.replay_capacity == 1000);

  ExperimentConfig overridden = config_from_json_text(
      R"({"suite": {"kind": "GOAL"}, "train": {"lambda_i": 0.5}})");
  CHECK(overridden.train.weights.lambda_i == 0.5);
  CHECK(overridden.train.weights.lambda_p == 0.25);

  CHECK_THROWS_AS(config_from_json_text(R"({"suite": {"kind": "NOPE"}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json_text(R"({"unknown_field": 1})"), ConfigError);
  CHECK_THROWS_AS(config_from_json_text(R"({"train": {"lambda_q": 0.1}})"), ConfigError);
  CHECK_THROWS_AS(config_from_json_text("not json"), ConfigError);
  CHECK_THROWS_AS(config_from_json_text(R"({"train": {"epochs": 0}})"),
                  std::invalid_argument);

  // round trip through the canonical text form
  ExperimentConfig cfg = tiny_experiment("x");
  ExperimentConfig back = config_from_json_text(config_to_json_text(cfg));
  CHECK(config_hash(cfg) == config_hash(back));
}

TEST_CASE("trajectory files round-trip and reject bad versions") {
  TempDir tmp;
  sim::TaskSuite suite = sim::make_suite(sim::SuiteKind::kSpatial, 2, 3);
  auto demos = sim::collect_demos(suite.tasks[0], 4, 9);
  std::string path = tmp.str() + "/demos.jsonl";
  save_trajectories(path, suite.kind, demos);
  auto loaded = load_trajectories(path);
  REQUIRE(loaded.size() == demos.size());
  for (size_t i = 0; i < demos.size(); ++i) {
    CHECK(loaded[i].task_id == demos[i].task_id);
    CHECK(loaded[i].success == demos[i].success);
    REQUIRE(loaded[i].steps.size() == demos[i].steps.size());
    for (size_t t = 0; t < demos[i].steps.size(); ++t) {
      CHECK(loaded[i].steps[t].obs.agentview == demos[i].steps[t].obs.agentview);
      CHECK(loaded[i].steps[t].obs.lang == demos[i].steps[t].obs.lang);
      CHECK(loaded[i].steps[t].action.dx == demos[i].steps[t].action.dx);
      CHECK(loaded[i].steps[t].action.grip == demos[i].steps[t].action.grip);
    }
  }
  // saving again produces identical bytes
  std::string once = read_file(path);
  save_trajectories(path, suite.kind, demos);
  CHECK(read_file(path) == once);

  std::ofstream bad(tmp.str() + "/bad.jsonl");
  bad << R"({"v": 99, "task": 0, "suite": "OBJECT", "success": true, "len": 0, "obs": [], "act": []})"
      << "\n";
  bad.close();
  CHECK_THROWS_AS(load_trajectories(tmp.str() + "/bad.jsonl"), DataError);
}

TEST_CASE("checkpoints round-trip bit-exactly and reject corruption") {
  TempDir tmp;
  policy::PolicyConfig c;
  c.latent_dim = 16;
  c.enc_hidden = 8;
  c.context_len = 2;
  c.components = 2;
  policy::PolicyParams params = policy::init_params(c, 77);
  std::string path = tmp.str() + "/policy.ckpt";
  save_checkpoint(path, params);
  policy::PolicyParams loaded = load_checkpoint(path);
  CHECK(loaded.config == params.config);
  REQUIRE(loaded.params.items.size() == params.params.items.size());
  for (size_t i = 0; i < params.params.items.size(); ++i) {
    const auto& [name, v] = params.params.items[i];
    CHECK(loaded.params.items[i].first == name);
    for (int64_t j = 0; j < v->val.size(); ++j)
      CHECK(loaded.params.items[i].second->val[j] == v->val[j]);
  }

  // teacher snapshots round-trip through serialization bit-exactly
  train::TeacherSnapshot teacher = train::snapshot_teacher(params, 0);
  save_checkpoint(path, teacher.params);
  policy::PolicyParams back = load_checkpoint(path);
  for (size_t i = 0; i < back.params.items.size(); ++i)
    for (int64_t j = 0; j < back.params.items[i].second->val.size(); ++j)
      CHECK(back.params.items[i].second->val[j] ==
            teacher.params.params.items[i].second->val[j]);

  std::ofstream bad(tmp.str() + "/bad.ckpt", std::ios::binary);
  bad << "NOTMAGIC garbage";
  bad.close();
  CHECK_THROWS_AS(load_checkpoint(tmp.str() + "/bad.ckpt"), DataError);
}

TEST_CASE("success tensor and drift tables round-trip through CSV") {
  TempDir tmp;
  eval::SuccessTensor c(2, {1, 2});
  c.set(0, 0, 1, 0.25);
  c.set(0, 0, 2, 0.3333333333333333);
  c.set(1, 0, 1, 0.1);
  c.set(1, 0, 2, 0.2);
  c.set(1, 1, 1, 0.9);
  c.set(1, 1, 2, 1.0);
  std::string path = tmp.str() + "/st.csv";
  save_success_tensor(path, c);
  eval::SuccessTensor back = load_success_tensor(path);
  CHECK(back == c);

  std::vector<eval::DriftRecord> drift{{1, 0.5, 0.25, 0.125, 0.1, 0.0625}};
  save_drift(tmp.str() + "/drift.csv", drift);
  auto drift_back = load_drift(tmp.str() + "/drift.csv");
  REQUIRE(drift_back.size() == 1);
  CHECK(drift_back[0].step == 1);
  CHECK(drift_back[0].agentview == 0.5);
  CHECK(drift_back[0].gripper == 0.0625);
}

TEST_CASE("gen-data: files, determinism, and schema failures") {
  TempDir tmp;
  ExperimentConfig cfg = tiny_experiment(tmp.str());
  std::ostringstream log;
  gen_data_cmd(cfg, log);
  for (int k = 1; k <= 2; ++k) {
    std::string path = tmp.str() + "/data/task_" + std::to_string(k) + ".jsonl";
    CHECK(fs::exists(path));
    CHECK(load_trajectories(path).size() == 3);
  }
  CHECK(fs::exists(tmp.str() + "/data/suite.json"));

  std::string before = read_file(tmp.str() + "/data/task_1.jsonl");
  std::ostringstream log2;
  gen_data_cmd(cfg, log2);
  CHECK(read_file(tmp.str() + "/data/task_1.jsonl") == before);
}

TEST_CASE("train/eval/report: run directories, manifests, reruns") {
  TempDir tmp;
  ExperimentConfig cfg = tiny_experiment(tmp.str());
  std::ostringstream log;
  gen_data_cmd(cfg, log);

  TrainOptions opts;
  opts.method = train::Method::kEr;
  train_cmd(cfg, opts, log);
  std::string dir = run_dir(cfg, train::Method::kEr, 100);
  CHECK(fs::exists(dir + "/manifest.json"));
  CHECK(fs::exists(dir + "/success_tensor.csv"));
  CHECK(fs::exists(dir + "/drift.csv"));
  CHECK(fs::exists(dir + "/metrics.csv"));
  CHECK(fs::exists(dir + "/train_log.jsonl"));
  CHECK(fs::exists(dir + "/checkpoints/task_1_epoch_1.ckpt"));
  CHECK_FALSE(fs::exists(dir + "/lock"));

  // a completed seed is skipped unless forced
  std::string tensor_before = read_file(dir + "/success_tensor.csv");
  std::ostringstream skip_log;
  train_cmd(cfg, opts, skip_log);
  CHECK(skip_log.str().find("skipping completed run") != std::string::npos);

  // forced rerun reproduces the tensor byte-for-byte
  TrainOptions forced = opts;
  forced.force = true;
  std::ostringstream forced_log;
  train_cmd(cfg, forced, forced_log);
  CHECK(read_file(dir + "/success_tensor.csv") == tensor_before);

  // eval on the stored tensors and via checkpoint recomputation
  std::ostringstream eval_out;
  eval_cmd(dir, /*recompute=*/false, "", eval_out);
  CHECK(eval_out.str().find("run_id,method,suite,seed,fwt,nbt,auc") !=
        std::string::npos);
  CHECK(eval_out.str().find("er_seed100") != std::string::npos);
  CHECK(eval_out.str().find("mean,") != std::string::npos);
  CHECK(eval_out.str().find("stderr,") != std::string::npos);

  std::ostringstream eval_re;
  eval_cmd(dir, /*recompute=*/true, "", eval_re);
  CHECK(eval_re.str() == eval_out.str());

  // method-level aggregation over seed directories
  std::ostringstream eval_method;
  eval_cmd(tmp.str() + "/runs/er", false, "", eval_method);
  CHECK(eval_method.str().find("er_seed100") != std::string::npos);

  CHECK_THROWS_AS(eval_cmd(tmp.str() + "/nonexistent", false, "", eval_out), DataError);

  // report across methods
  TrainOptions seq;
  seq.method = train::Method::kSequential;
  train_cmd(cfg, seq, log);
  std::ostringstream report_out;
  report_cmd({tmp.str() + "/runs/er", tmp.str() + "/runs/sequential"},
             tmp.str() + "/report", report_out);
  CHECK(fs::exists(tmp.str() + "/report_comparison.csv"));
  CHECK(fs::exists(tmp.str() + "/report_success_curves.csv"));
  CHECK(fs::exists(tmp.str() + "/report_drift_curves.csv"));
  std::string comparison = read_file(tmp.str() + "/report_comparison.csv");
  CHECK(comparison.find("er,") != std::string::npos);
  CHECK(comparison.find("sequential,") != std::string::npos);

  // mismatched suites are rejected
  TempDir other;
  ExperimentConfig cfg2 = tiny_experiment(other.str());
  cfg2.suite.seed = 99;
  std::ostringstream log3;
  gen_data_cmd(cfg2, log3);
  train_cmd(cfg2, opts, log3);
  CHECK_THROWS_AS(report_cmd({tmp.str() + "/runs/er", other.str() + "/runs/er"},
                             other.str() + "/report", report_out),
                  ConfigError);
}

TEST_CASE("train_cmd refuses a locked run directory") {
  TempDir tmp;
  ExperimentConfig cfg = tiny_experiment(tmp.str());
  std::ostringstream log;
  gen_data_cmd(cfg, log);
  std::string dir = run_dir(cfg, train::Method::kEr, 100);
  fs::create_directories(dir);
  std::ofstream lock(dir + "/lock");
  lock.close();
  TrainOptions opts;
  opts.method = train::Method::kEr;
  CHECK_THROWS_AS(train_cmd(cfg, opts, log), DataError);
}
