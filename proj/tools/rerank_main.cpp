// Command-line driver for the reranking pipeline: data synthesis, evaluator
// and generator training, supervision mining, inference, evaluation, and the
// ablation/sweep experiment runners.
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rerank/config.hpp"
#include "rerank/pipeline.hpp"

namespace {

rerank::Config load_config(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
  rerank::Config cfg =
      config_path.empty() ? rerank::Config{} : rerank::Config::from_file(config_path);
  for (const std::string& kv : overrides) cfg.apply_override(kv);
  cfg.validate();
  return cfg;
}

// Restrict a full config to a single pipeline phase.
rerank::Config phase_config(rerank::Config cfg, const std::string& phase) {
  cfg.phases = phase;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rerank: lookahead-guided generative reranking pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--set", overrides, "override, e.g. --set beam_size=8")->take_all();

  std::string subcommand;
  auto add_cmd = [&](const char* name, const std::string& desc) {
    CLI::App* sc = app.add_subcommand(name, desc);
    sc->fallthrough();  // --config / --set live on the parent
    sc->callback([&subcommand, name]() { subcommand = name; });
    return sc;
  };
  for (const char* name : {"gen-data", "split", "train-eval", "mine", "train-gen", "evaluate"})
    add_cmd(name, std::string("run the ") + name + " phase");
  add_cmd("pipeline", "run all enabled phases in order");

  CLI::App* infer_cmd = add_cmd("infer", "batch greedy decoding over a request file");
  std::string infer_ckpt, infer_requests, infer_out;
  infer_cmd->add_option("--generator", infer_ckpt, "generator checkpoint")->required();
  infer_cmd->add_option("--requests", infer_requests, "dataset file providing the requests")
      ->required();
  infer_cmd->add_option("--out", infer_out, "output jsonl path")->required();

  add_cmd("ablate", "run the ablation variants at B=2");
  add_cmd("sweep", "hyperparameter sweep over one axis");
  add_cmd("report", "summarize reports in out_dir");
  add_cmd("schema", "print the config schema");

  CLI11_PARSE(app, argc, argv);

  try {
    if (subcommand == "schema") {
      std::cout << rerank::config_schema_text();
      return 0;
    }
    const rerank::Config cfg = load_config(config_path, overrides);
    if (subcommand == "pipeline") {
      const rerank::RunManifest m = rerank::run_pipeline(cfg);
      std::cout << "pipeline complete; manifest: " << cfg.out_dir << "/manifest.json\n";
    } else if (subcommand == "infer") {
      rerank::run_inference(cfg, infer_ckpt, infer_requests, infer_out);
      std::cout << "wrote " << infer_out << '\n';
    } else if (subcommand == "ablate") {
      rerank::run_ablations(cfg);
      std::cout << "wrote " << cfg.out_dir << "/ablation_report.json\n";
    } else if (subcommand == "sweep") {
      rerank::run_sweep(cfg);
      std::cout << "wrote " << cfg.out_dir << "/sweep_" << cfg.sweep_axis << "_report.json\n";
    } else if (subcommand == "report") {
      std::cout << rerank::gather_report(cfg.out_dir);
    } else {
      // Single pipeline phase.
      rerank::run_pipeline(phase_config(cfg, subcommand));
      std::cout << subcommand << " done\n";
    }
  } catch (const std::exception& e) {
    nlohmann::json err;
    err["error"] = e.what();
    err["command"] = subcommand;
    std::cerr << err.dump() << '\n';
    return 1;
  }
  return 0;
}
