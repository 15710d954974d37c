#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hiseg/evalkit.hpp"
#include "hiseg/model.hpp"
#include "hiseg/synthshapes.hpp"

namespace hiseg {

struct TrainConfig {
  int iterations = 2000;
  int batch_size = 8;
  double base_lr = 2e-4;
  double weight_decay = 0.05;
  int eval_interval = 200;
  std::string task = "joint";  // joint | part_only | object_only
  int threads = 0;             // 0 = auto

  void validate() const;
};

// The full run description: model + data generator + training protocol,
// governed by one master seed. Serialized as strict JSON (unknown keys are
// rejected) and echoed verbatim into every output directory.
struct RunConfig {
  ModelConfig model;
  GenConfig data;  // image size mirrors model; count below
  int data_count = 512;
  TrainConfig train;
  std::uint64_t seed = 0;

  void validate() const;
};

std::string run_config_to_json(const RunConfig& rc);
RunConfig run_config_from_json(const std::string& text);
RunConfig run_config_from_file(const std::string& path);

int resolve_threads(int configured);

// Deterministic sample generation: sample i comes from split(i) of the
// config seed, so parallel generation and re-runs agree byte for byte.
std::vector<Sample> generate_dataset(const GenConfig& cfg, int count);

struct EvalResult {
  ClassMetrics part, obj;
  double part_boundary_f = 0.0, obj_boundary_f = 0.0;
  std::vector<double> coverages;  // per-sample occluder coverage, when occluded
};

EvalResult evaluate_model(Model& m, const std::vector<Sample>& samples, UpsampleMode mode,
                          int threads);

// Occludes every sample (per-sample rng split of seed) and reports coverages.
std::vector<Sample> occlude_dataset(const std::vector<Sample>& samples, std::uint64_t seed,
                                    double min_cov, double max_cov, std::vector<double>* coverages);

struct TrainArtifacts {
  std::string checkpoint_path;
  double final_part_miou = 0.0;
  double final_obj_miou = 0.0;
};

// ---- CLI entry points (exit code 0 ok / 1 validation / 2 runtime) -------

int cmd_gen(const RunConfig& rc, const std::string& out_path);

int cmd_train(const RunConfig& rc, const std::string& train_path, const std::string& val_path,
              const std::string& out_dir, TrainArtifacts* artifacts = nullptr);

struct EvalOptions {
  bool occlude = false;
  std::string upsample = "assoc";  // assoc | bilinear
  std::uint64_t seed = 0;
  int threads = 0;
};

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const EvalOptions& opts,
             const std::string& out_dir);

struct EmergeOptions {
  std::string level = "superpixel";  // superpixel | group
  int topk = 6;
  std::string checkpoint;  // empty: train a single-supervision model first
  int dump_samples = 8;
};

int cmd_emerge(const RunConfig& rc, const std::string& train_path, const std::string& probe_path,
               const EmergeOptions& opts, const std::string& out_dir);

int cmd_dump(const std::string& checkpoint, const std::string& dataset, int index,
             const std::string& out_dir);

}  // namespace hiseg
