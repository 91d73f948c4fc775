#pragma once

#include <string>
#include <vector>

#include "rerank/config.hpp"

#include <nlohmann/json.hpp>

namespace rerank {

struct RunManifest {
  nlohmann::json config;
  std::string config_hash;
  std::vector<std::string> artifacts;  // every file the run wrote
  nlohmann::json phase_seconds = nlohmann::json::object();
  std::vector<std::string> completed_phases;
  bool complete = false;
  std::string failed_phase;
  std::string error;

  void record(const std::string& path);
  void save(const std::string& path) const;
};

// Conventional artifact locations inside a run directory.
struct RunPaths {
  std::string dir;
  std::string env() const { return dir + "/env.json"; }
  std::string dataset() const { return dir + "/dataset.jsonl"; }
  std::string train() const { return dir + "/train.jsonl"; }
  std::string test() const { return dir + "/test.jsonl"; }
  std::string split_report() const { return dir + "/split_report.json"; }
  std::string evaluator_ckpt() const { return dir + "/evaluator.ckpt"; }
  std::string evaluator_report() const { return dir + "/evaluator_report.json"; }
  std::string supervision() const { return dir + "/supervision.jsonl"; }
  std::string mining_report() const { return dir + "/mining_report.json"; }
  std::string generator_ckpt() const { return dir + "/generator.ckpt"; }
  std::string generator_report() const { return dir + "/generator_report.json"; }
  std::string metrics_report() const { return dir + "/metrics_report.json"; }
  std::string manifest() const { return dir + "/manifest.json"; }
};

// Runs the enabled phases in order:
//   gen-data -> split -> train-eval -> mine -> train-gen -> evaluate
// Every phase reads its inputs from files written by earlier phases, so a
// rerun with early phases disabled resumes from the persisted artifacts.
// A phase failure leaves a manifest recording partial completion.
RunManifest run_pipeline(const Config& cfg);

// Table-shaped comparison of the ablation variants at beam size 2, sharing
// the evaluator and mined supervision per seed where the variant permits.
nlohmann::json run_ablations(const Config& cfg);

// One generator training + evaluation per swept value with a shared
// evaluator per seed; mined supervision is cached by (evaluator hash,
// beam size, topk).
nlohmann::json run_sweep(const Config& cfg);

// Batch inference: decode every request in a dataset file and write
// {request_id, ranked_ids, per_step_probs} records.
void run_inference(const Config& cfg, const std::string& generator_ckpt,
                   const std::string& requests_path, const std::string& out_path);

// Human-readable summary of whatever reports exist in out_dir; also emits a
// CSV (rows = variants/points, columns = metrics) when ablation or sweep
// reports are present.
std::string gather_report(const std::string& out_dir);

}  // namespace rerank
