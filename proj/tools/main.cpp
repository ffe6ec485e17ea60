#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "m2d/io.hpp"

namespace {

// Exit codes: 0 ok, 2 config, 3 data, 4 numeric, 1 internal.
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::vector<uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<uint64_t> seeds;
  size_t pos = 0;
  while (pos < csv.size()) {
    size_t next = csv.find(',', pos);
    if (next == std::string::npos) next = csv.size();
    std::string part = csv.substr(pos, next - pos);
    if (!part.empty()) seeds.push_back(std::stoull(part));
    pos = next + 1;
  }
  if (seeds.empty()) throw m2d::ConfigError("--seeds: empty seed list");
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"m2d: lifelong imitation learning on a synthetic tabletop suite"};
  app.require_subcommand(1);

  std::string config_path, out_dir, method_str = "m2distill", seeds_csv;
  std::string run_dir, out_file, report_out = "report";
  std::vector<std::string> report_runs;
  bool force = false, recompute = false;

  CLI::App* gen = app.add_subcommand("gen-data", "generate suite demonstrations");
  gen->add_option("--config", config_path, "experiment config (JSON)")->required();
  gen->add_option("--out", out_dir, "override output directory");

  CLI::App* train = app.add_subcommand("train", "run lifelong training per seed");
  train->add_option("--config", config_path, "experiment config (JSON)")->required();
  train->add_option("--method", method_str, "sequential | er | m2distill");
  train->add_option("--seeds", seeds_csv, "comma-separated seed list override");
  train->add_option("--out", out_dir, "override output directory");
  train->add_flag("--force", force, "redo completed runs and steal locks");

  CLI::App* eval = app.add_subcommand("eval", "aggregate metrics for a run directory");
  eval->add_option("--run", run_dir, "seed run dir or method dir")->required();
  eval->add_flag("--recompute", recompute,
                 "recompute success rates from stored checkpoints");
  eval->add_option("--out", out_file, "also write tables to this file");

  CLI::App* report = app.add_subcommand("report", "compare methods across run dirs");
  report->add_option("--runs", report_runs, "run directories to compare")
      ->required()
      ->delimiter(',');
  report->add_option("--out", report_out, "output file prefix");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      m2d::io::ExperimentConfig cfg = m2d::io::load_config(config_path);
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      m2d::io::gen_data_cmd(cfg, std::cout);
    } else if (train->parsed()) {
      m2d::io::ExperimentConfig cfg = m2d::io::load_config(config_path);
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      m2d::io::TrainOptions opts;
      opts.method = m2d::train::method_from_string(method_str);
      if (!seeds_csv.empty()) opts.seeds = parse_seed_list(seeds_csv);
      opts.force = force;
      m2d::io::train_cmd(cfg, opts, std::cout);
    } else if (eval->parsed()) {
      m2d::io::eval_cmd(run_dir, recompute, out_file, std::cout);
    } else if (report->parsed()) {
      m2d::io::report_cmd(report_runs, report_out, std::cout);
    }
  } catch (const m2d::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const m2d::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const m2d::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
