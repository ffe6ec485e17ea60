#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "m2d/metrics.hpp"
#include "m2d/policy.hpp"
#include "m2d/sim.hpp"
#include "m2d/trainer.hpp"

namespace m2d::io {

struct SuiteConfig {
  sim::SuiteKind kind = sim::SuiteKind::kObject;
  int num_tasks = 5;
  int demos_per_task = 20;
  uint64_t seed = 7;
};

struct ExperimentConfig {
  SuiteConfig suite;
  policy::PolicyConfig policy;
  train::TrainConfig train;  // per-run seed is taken from `seeds`
  std::string out_dir = "out";
  std::vector<uint64_t> seeds = {100, 200, 300};

  void validate() const;
};

// Strict schema: unknown keys are rejected at every level. Absent lambda
// weights default to the per-suite preset (lambda_t = lambda_e = 0.05;
// lambda_i = lambda_p = 0.05, raised to 0.25 for GOAL suites).
ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json_text(const ExperimentConfig& config);
std::string config_hash(const ExperimentConfig& config);

// --- trajectory files (JSON lines, one record per trajectory) ---
void save_trajectories(const std::string& path, sim::SuiteKind kind,
                       const std::vector<sim::Trajectory>& trajectories);
std::vector<sim::Trajectory> load_trajectories(const std::string& path);

// --- policy checkpoints (binary, bit-exact round trip) ---
void save_checkpoint(const std::string& path, const policy::PolicyParams& params);
policy::PolicyParams load_checkpoint(const std::string& path);

// --- metric tables (CSV with %.17g doubles) ---
void save_success_tensor(const std::string& path, const eval::SuccessTensor& c);
eval::SuccessTensor load_success_tensor(const std::string& path);
void save_drift(const std::string& path, const std::vector<eval::DriftRecord>& drift);
std::vector<eval::DriftRecord> load_drift(const std::string& path);

std::string run_dir(const ExperimentConfig& config, train::Method method,
                    uint64_t seed);

// Writes per-task demo files plus the suite manifest under <out>/data.
// Deterministic and idempotent for a fixed config.
void gen_data_cmd(const ExperimentConfig& config, std::ostream& log);

struct TrainOptions {
  train::Method method = train::Method::kM2Distill;
  std::vector<uint64_t> seeds;  // empty -> config.seeds
  bool force = false;
};

// Runs run_lifelong once per seed, each into its own locked run directory
// with checkpoints, logs, success/drift/metric tables, and a manifest.
// Completed seeds are skipped unless force is set.
void train_cmd(const ExperimentConfig& config, const TrainOptions& options,
               std::ostream& log);

// Aggregates one run directory (a seed dir, or a method dir holding several
// seed dirs): per-seed FWT/NBT/AUC rows plus mean and standard error, and the
// drift table. With recompute, success rates are re-derived from the stored
// checkpoints instead of the stored tensor.
void eval_cmd(const std::string& run_dir_path, bool recompute,
              const std::string& out_file, std::ostream& out);

// Cross-method comparison plus plot-ready long-format exports. All runs must
// share the same suite configuration.
void report_cmd(const std::vector<std::string>& run_dirs,
                const std::string& out_prefix, std::ostream& out);

}  // namespace m2d::io
