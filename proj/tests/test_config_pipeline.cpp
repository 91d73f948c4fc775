#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "rerank/config.hpp"
#include "rerank/data.hpp"
#include "rerank/miner.hpp"
#include "rerank/pipeline.hpp"

#include <nlohmann/json.hpp>

using namespace rerank;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Small, fast configuration for end-to-end runs.
Config tiny_config(const std::string& out_dir) {
  Config cfg;
  cfg.n_users = 40;
  cfg.sessions_per_user = 3;
  cfg.eval_layers = 2;
  cfg.gen_layers = 2;
  cfg.eval_epochs = 2;
  cfg.gen_epochs = 2;
  cfg.batch_size = 64;
  cfg.beam_size = 2;
  cfg.mine_max_requests = 30;
  cfg.hr_sample_size = 200;
  cfg.hr_eval_requests = 15;
  cfg.eval_metric_max_records = 40;
  cfg.threads = 4;
  cfg.out_dir = out_dir;
  return cfg;
}

std::string fresh_dir(const std::string& name) {
  const std::string dir = (fs::temp_directory_path() / name).string();
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("config parsing, overrides and schema") {
  SUBCASE("file with comments parses") {
    const Config cfg = Config::from_string(
        "# experiment\n"
        "n_users = 99   # small\n"
        "policy = random\n"
        "learning_rate = 1e-3\n");
    CHECK(cfg.n_users == 99);
    CHECK(cfg.policy == "random");
    CHECK(cfg.learning_rate == doctest::Approx(1e-3));
  }
  SUBCASE("unknown keys are rejected by name") {
    CHECK_THROWS_WITH_AS(Config::from_string("beam_sizee = 4\n"),
                         doctest::Contains("beam_sizee"), std::invalid_argument);
  }
  SUBCASE("bad values name the key") {
    CHECK_THROWS_WITH_AS(Config::from_string("n_users = twelve\n"),
                         doctest::Contains("n_users"), std::invalid_argument);
  }
  SUBCASE("overrides apply after the file") {
    Config cfg;
    cfg.apply_override("beam_size=8");
    CHECK(cfg.beam_size == 8);
    CHECK_THROWS_AS(cfg.apply_override("nope=1"), std::invalid_argument);
  }
  SUBCASE("validation catches contract violations") {
    Config cfg;
    cfg.list_len = 20;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = Config{};
    cfg.weight_temperature = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = Config{};
    cfg.ablation = "no_soft";
    cfg.sweep_axis = "beam_size";
    cfg.sweep_values = "1,2";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = Config{};
    cfg.phases = "gen-data,bogus";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  }
  SUBCASE("hash tracks content") {
    Config a, b;
    CHECK(a.hash() == b.hash());
    b.beam_size = 8;
    CHECK(a.hash() != b.hash());
  }
  SUBCASE("schema documents every key round-trippably") {
    const std::string schema = config_schema_text();
    CHECK(schema.find("beam_size") != std::string::npos);
    CHECK(schema.find("weight_temperature") != std::string::npos);
    // The schema's defaults parse back to the default config.
    const Config parsed = Config::from_string(schema);
    CHECK(parsed.hash() == Config{}.hash());
  }
  SUBCASE("phase toggles") {
    Config cfg;
    cfg.phases = "none";
    CHECK_FALSE(cfg.phase_enabled("mine"));
    cfg.phases = "gen-data,split";
    CHECK(cfg.phase_enabled("split"));
    CHECK_FALSE(cfg.phase_enabled("train-gen"));
  }
}

TEST_CASE("pipeline end to end at desk scale") {
  const std::string dir = fresh_dir("rr_pipe");
  const Config cfg = tiny_config(dir);
  const RunManifest manifest = run_pipeline(cfg);
  CHECK(manifest.complete);
  const RunPaths paths{dir};

  SUBCASE("all artifacts exist and the manifest lists them") {
    for (const std::string& p :
         {paths.env(), paths.dataset(), paths.train(), paths.test(), paths.split_report(),
          paths.evaluator_ckpt(), paths.evaluator_report(), paths.supervision(),
          paths.mining_report(), paths.generator_ckpt(), paths.generator_report(),
          paths.metrics_report(), paths.manifest()}) {
      CHECK(fs::exists(p));
    }
    for (const std::string& p : manifest.artifacts) CHECK(fs::exists(p));
    // Everything written (except the manifest itself) is listed.
    CHECK(manifest.artifacts.size() == 12);
  }

  SUBCASE("reports carry the expected blocks") {
    const auto metrics = nlohmann::json::parse(read_file(paths.metrics_report()));
    CHECK(metrics.contains("generator_hr"));
    CHECK(metrics["generator_hr"].contains("hr@1%"));
    CHECK(metrics["evaluator"]["env"].contains("r_auc"));
    const auto mining = nlohmann::json::parse(read_file(paths.mining_report()));
    CHECK(mining["n_records"].get<int>() == 2 * 30);
  }

  SUBCASE("identical configs reproduce the metric report bitwise") {
    const std::string dir2 = fresh_dir("rr_pipe_b");
    Config cfg2 = cfg;
    cfg2.out_dir = dir2;
    run_pipeline(cfg2);
    CHECK(read_file(paths.metrics_report()) == read_file(RunPaths{dir2}.metrics_report()));
    CHECK(read_file(paths.evaluator_report()) == read_file(RunPaths{dir2}.evaluator_report()));
    CHECK(read_file(paths.generator_report()) == read_file(RunPaths{dir2}.generator_report()));
  }

  SUBCASE("later phases resume from persisted artifacts byte-identically") {
    const std::string sup_before = read_file(paths.supervision());
    const std::string report_before = read_file(paths.metrics_report());
    Config resume = cfg;
    resume.phases = "train-gen,evaluate";
    run_pipeline(resume);
    CHECK(read_file(paths.supervision()) == sup_before);
    CHECK(read_file(paths.metrics_report()) == report_before);
  }

  SUBCASE("thread count does not change the reports") {
    const std::string dir2 = fresh_dir("rr_pipe_t1");
    Config cfg2 = cfg;
    cfg2.out_dir = dir2;
    cfg2.threads = 1;
    run_pipeline(cfg2);
    CHECK(read_file(paths.metrics_report()) == read_file(RunPaths{dir2}.metrics_report()));
  }

  SUBCASE("batch inference emits ranked ids with per-step distributions") {
    const std::string out = dir + "/inference.jsonl";
    run_inference(cfg, paths.generator_ckpt(), paths.test(), out);
    std::ifstream is(out);
    std::string line;
    int count = 0;
    while (std::getline(is, line)) {
      const auto j = nlohmann::json::parse(line);
      CHECK(j["ranked_ids"].size() == 6);
      CHECK(j["per_step_probs"].size() == 6);
      ++count;
    }
    const Dataset test = load_dataset(paths.test());
    CHECK(count == static_cast<int>(test.size()));
  }

  SUBCASE("report summarizer reads the run") {
    const std::string text = gather_report(dir);
    CHECK(text.find("hr@1%") != std::string::npos);
  }
}

TEST_CASE("pipeline with all phases off is an empty success") {
  const std::string dir = fresh_dir("rr_pipe_none");
  Config cfg = tiny_config(dir);
  cfg.phases = "none";
  const RunManifest manifest = run_pipeline(cfg);
  CHECK(manifest.complete);
  CHECK(manifest.artifacts.empty());
  CHECK(manifest.completed_phases.empty());
}

TEST_CASE("pipeline records the failing phase") {
  const std::string dir = fresh_dir("rr_pipe_fail");
  Config cfg = tiny_config(dir);
  cfg.phases = "train-eval";  // inputs were never generated
  CHECK_THROWS(run_pipeline(cfg));
  const auto manifest = nlohmann::json::parse(read_file(dir + "/manifest.json"));
  CHECK(manifest["complete"].get<bool>() == false);
  CHECK(manifest["failed_phase"].get<std::string>() == "train-eval");
  CHECK(manifest["error"].get<std::string>().size() > 0);
}

TEST_CASE("tau_w sweep reuses mined data by recomputing weights from values") {
  // Records grouped per request, weights recomputed at a different
  // temperature, effective weights summing to the record count per request.
  const std::string dir = fresh_dir("rr_tau");
  Config cfg = tiny_config(dir);
  cfg.phases = "gen-data,split,train-eval,mine";
  run_pipeline(cfg);
  const std::vector<SupervisionRecord> sup = load_supervision(RunPaths{dir}.supervision());
  size_t i = 0;
  while (i < sup.size()) {
    size_t j = i;
    std::vector<double> values;
    while (j < sup.size() && sup[j].request_id == sup[i].request_id) {
      values.push_back(sup[j].value);
      ++j;
    }
    const SequenceWeights w = sequence_weights(values, 0.1, static_cast<int>(values.size()));
    double eff = 0.0;
    for (double e : w.effective) eff += e;
    CHECK(eff == doctest::Approx(static_cast<double>(values.size())).epsilon(1e-9));
    i = j;
  }
}
