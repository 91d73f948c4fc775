#include "rerank/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include "rerank/checkpoint.hpp"
#include "rerank/data.hpp"
#include "rerank/env.hpp"
#include "rerank/evaluator.hpp"
#include "rerank/generator.hpp"
#include "rerank/metrics.hpp"
#include "rerank/miner.hpp"
#include "rerank/rng.hpp"

namespace rerank {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex64(uint64_t x) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << x;
  return os.str();
}

void write_json(const std::string& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os << j.dump(2) << '\n';
}

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  json j;
  is >> j;
  return j;
}

EnvConfig env_config_of(const Config& cfg) {
  EnvConfig e;
  e.n_items = cfg.n_items;
  e.n_categories = cfg.n_categories;
  e.decay_base = cfg.decay_base;
  e.base_bias = cfg.env_bias;
  e.affinity_scale = cfg.affinity_scale;
  e.context_scale = cfg.context_scale;
  e.interact_scale = cfg.interact_scale;
  e.score_noise = cfg.score_noise;
  return e;
}

ModelDims dims_of(const Config& cfg) {
  ModelDims d;
  d.embed_dim = cfg.embed_dim;
  d.d_model = cfg.d_model;
  d.d_pos = cfg.d_pos;
  d.n_heads = cfg.n_heads;
  d.ffn_mult = cfg.ffn_mult;
  d.score_buckets = cfg.score_buckets;
  d.n_items = cfg.n_items;
  d.feat_dim = 4;
  d.max_len = cfg.list_len;
  return d;
}

TrainOptions eval_train_options(const Config& cfg, uint64_t model_seed) {
  TrainOptions t;
  t.lr = cfg.learning_rate;
  t.beta1 = cfg.adam_beta1;
  t.beta2 = cfg.adam_beta2;
  t.adam_eps = cfg.adam_eps;
  t.batch_size = cfg.batch_size;
  t.epochs = cfg.eval_epochs;
  t.grad_window = cfg.grad_window;
  t.threads = cfg.threads;
  t.shuffle_seed = derive_seed(model_seed, "eval-epochs");
  return t;
}

GenTrainOptions gen_train_options(const Config& cfg, uint64_t model_seed) {
  GenTrainOptions t;
  t.lr = cfg.learning_rate;
  t.beta1 = cfg.adam_beta1;
  t.beta2 = cfg.adam_beta2;
  t.adam_eps = cfg.adam_eps;
  t.batch_size = cfg.batch_size;
  t.epochs = cfg.gen_epochs;
  t.grad_window = cfg.grad_window;
  t.threads = cfg.threads;
  t.shuffle_seed = derive_seed(model_seed, "gen-epochs");
  t.alpha = cfg.soft_label_weight;
  t.ablation = parse_ablation(cfg.ablation);
  return t;
}

MineOptions mine_options(const Config& cfg) {
  MineOptions m;
  m.beam_size = cfg.beam_size;
  m.topk = cfg.mine_topk;
  m.list_len = cfg.list_len;
  m.weight_temperature = cfg.weight_temperature;
  m.threads = cfg.threads;
  return m;
}

// Unique train requests in request-id order, optionally capped.
std::vector<RerankRequest> mining_requests(const Dataset& train, int cap) {
  std::vector<RerankRequest> reqs;
  reqs.reserve(train.size());
  for (const ExposureRecord& r : train) reqs.push_back(r.request);
  std::stable_sort(reqs.begin(), reqs.end(),
                   [](const RerankRequest& a, const RerankRequest& b) {
                     return a.request_id < b.request_id;
                   });
  if (cap > 0 && static_cast<int>(reqs.size()) > cap) reqs.resize(cap);
  return reqs;
}

std::vector<RerankRequest> hr_requests(const Dataset& test, int cap) {
  std::vector<RerankRequest> reqs;
  for (const ExposureRecord& r : test) reqs.push_back(r.request);
  if (cap > 0 && static_cast<int>(reqs.size()) > cap) reqs.resize(cap);
  return reqs;
}

struct PhaseTimer {
  RunManifest& manifest;
  std::string phase;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  ~PhaseTimer() {
    const double s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    manifest.phase_seconds[phase] = s;
  }
};

json hr_block(const HrReport& hr) { return hr.to_json(); }

json evaluator_metric_block(const EvaluatorMetrics& m) {
  json j;
  j["r_auc"] = m.r_auc.has_value() ? json(*m.r_auc) : json(nullptr);
  j["pcoc"] = m.pcoc.has_value() ? json(*m.pcoc) : json(nullptr);
  j["rmse"] = m.rmse;
  j["n_records"] = m.n_records;
  return j;
}

}  // namespace

void RunManifest::record(const std::string& path) { artifacts.push_back(path); }

void RunManifest::save(const std::string& path) const {
  json j;
  j["config"] = config;
  j["config_hash"] = config_hash;
  j["artifacts"] = artifacts;
  j["phase_seconds"] = phase_seconds;
  j["completed_phases"] = completed_phases;
  j["complete"] = complete;
  j["failed_phase"] = failed_phase;
  j["error"] = error;
  write_json(path, j);
}

RunManifest run_pipeline(const Config& cfg) {
  cfg.validate();
  RunPaths paths{cfg.out_dir};
  fs::create_directories(paths.dir);
  RunManifest manifest;
  manifest.config = cfg.to_json();
  manifest.config_hash = hex64(cfg.hash());

  const std::vector<std::string> order{"gen-data", "split",     "train-eval",
                                       "mine",     "train-gen", "evaluate"};
  std::string current;
  try {
    for (const std::string& phase : order) {
      if (!cfg.phase_enabled(phase)) continue;
      current = phase;
      PhaseTimer timer{manifest, phase};

      if (phase == "gen-data") {
        const EnvSpec env(cfg.env_seed, env_config_of(cfg));
        env.save(paths.env());
        manifest.record(paths.env());
        SynthOptions opt;
        opt.n_users = cfg.n_users;
        opt.sessions_per_user = cfg.sessions_per_user;
        opt.n_candidates = cfg.n_candidates;
        opt.list_len = cfg.list_len;
        opt.policy = parse_policy(cfg.policy);
        opt.epsilon = cfg.policy_epsilon;
        save_dataset(synth_generate(env, opt, cfg.data_seed), paths.dataset());
        manifest.record(paths.dataset());

      } else if (phase == "split") {
        const SplitResult split = split_leave_one_out(load_dataset(paths.dataset()));
        save_dataset(split.train, paths.train());
        save_dataset(split.test, paths.test());
        json sr;
        sr["n_train"] = split.train.size();
        sr["n_test"] = split.test.size();
        sr["single_session_users"] = split.single_session_users;
        write_json(paths.split_report(), sr);
        manifest.record(paths.train());
        manifest.record(paths.test());
        manifest.record(paths.split_report());

      } else if (phase == "train-eval") {
        const Dataset train = load_dataset(paths.train());
        const Dataset test = load_dataset(paths.test());
        const EnvSpec env = EnvSpec::load(paths.env());
        EvaluatorConfig ec{dims_of(cfg), cfg.eval_layers, cfg.list_len};
        EvaluatorModel model(ec, cfg.model_seed);
        const EvaluatorTrainReport rep =
            train_evaluator(model, train, eval_train_options(cfg, cfg.model_seed), &test, &env,
                            cfg.eval_metric_max_records);
        model.save(paths.evaluator_ckpt());
        write_json(paths.evaluator_report(), rep.to_json());
        manifest.record(paths.evaluator_ckpt());
        manifest.record(paths.evaluator_report());

      } else if (phase == "mine") {
        const EvaluatorModel model = EvaluatorModel::load(paths.evaluator_ckpt());
        const Dataset train = load_dataset(paths.train());
        const EnvSpec env = EnvSpec::load(paths.env());
        const std::vector<RerankRequest> reqs = mining_requests(train, cfg.mine_max_requests);
        const SupervisionDataset mined =
            build_supervision_dataset(model, reqs, mine_options(cfg), &env, &train);
        save_supervision(mined.records, paths.supervision());
        write_json(paths.mining_report(), mined.report.to_json());
        manifest.record(paths.supervision());
        manifest.record(paths.mining_report());

      } else if (phase == "train-gen") {
        const Dataset train = load_dataset(paths.train());
        const Dataset test = load_dataset(paths.test());
        const EnvSpec env = EnvSpec::load(paths.env());
        const std::vector<SupervisionRecord> sup = load_supervision(paths.supervision());
        GeneratorConfig gc{dims_of(cfg), cfg.gen_layers, cfg.list_len};
        GeneratorModel model(gc, cfg.model_seed);
        const auto req_index = index_requests(train);
        const std::vector<RerankRequest> heldout = hr_requests(test, cfg.hr_eval_requests);
        const GeneratorTrainReport rep = train_generator(
            model, sup, req_index, train, gen_train_options(cfg, cfg.model_seed), &heldout, &env,
            cfg.hr_sample_size, derive_seed(cfg.data_seed, "hr"));
        model.save(paths.generator_ckpt());
        write_json(paths.generator_report(), rep.to_json());
        manifest.record(paths.generator_ckpt());
        manifest.record(paths.generator_report());

      } else if (phase == "evaluate") {
        const EnvSpec env = EnvSpec::load(paths.env());
        const Dataset test = load_dataset(paths.test());
        const GeneratorModel gen = GeneratorModel::load(paths.generator_ckpt());
        const EvaluatorModel eval = EvaluatorModel::load(paths.evaluator_ckpt());
        const std::vector<RerankRequest> reqs = hr_requests(test, cfg.hr_eval_requests);
        const HrReport hr = evaluate_hr(
            reqs, [&](const RerankRequest& r) { return gen.greedy_decode(r).items; }, env,
            cfg.hr_sample_size, cfg.list_len, derive_seed(cfg.data_seed, "hr"), cfg.threads);
        json report;
        report["config_hash"] = manifest.config_hash;
        report["generator_hr"] = hr_block(hr);
        report["evaluator"] = {
            {"env", evaluator_metric_block(evaluate_evaluator(
                        eval, test, &env, true, cfg.eval_metric_max_records, cfg.threads))},
            {"clicks", evaluator_metric_block(evaluate_evaluator(
                           eval, test, nullptr, false, cfg.eval_metric_max_records, cfg.threads))},
            {"nonmonotone_row_fraction",
             nonmonotone_fraction(eval, test, cfg.eval_metric_max_records, cfg.threads)}};
        write_json(paths.metrics_report(), report);
        manifest.record(paths.metrics_report());
      }
      manifest.completed_phases.push_back(phase);
    }
    manifest.complete = true;
  } catch (const std::exception& e) {
    manifest.complete = false;
    manifest.failed_phase = current;
    manifest.error = e.what();
    manifest.save(paths.manifest());
    throw;
  }
  manifest.save(paths.manifest());
  return manifest;
}

namespace {

// Shared data + per-seed evaluator/supervision builder for ablations/sweeps.
struct SeedContext {
  Config cfg;          // seed-adjusted
  std::string dir;     // seed directory
  EvaluatorModel evaluator;
  Dataset train;
  Dataset test;
  EnvSpec env;
};

Config data_only_config(Config cfg, const std::string& dir) {
  cfg.out_dir = dir;
  cfg.phases = "gen-data,split";
  return cfg;
}

// Supervision cache keyed by evaluator hash, beam size and topk.
std::string supervision_cache_path(const std::string& dir, uint64_t eval_hash, int beam_size,
                                   int topk) {
  return dir + "/sup_B" + std::to_string(beam_size) + "_K" + std::to_string(topk) + "_" +
         hex64(eval_hash) + ".jsonl";
}

std::vector<SupervisionRecord> mine_cached(const SeedContext& ctx, int beam_size,
                                           RunManifest* manifest) {
  const uint64_t eval_hash = checkpoint_hash(ctx.dir + "/evaluator.ckpt");
  const int topk = ctx.cfg.mine_topk;
  const std::string path = supervision_cache_path(ctx.dir, eval_hash, beam_size, topk);
  if (fs::exists(path)) return load_supervision(path);
  MineOptions mo = mine_options(ctx.cfg);
  mo.beam_size = beam_size;
  const std::vector<RerankRequest> reqs =
      mining_requests(ctx.train, ctx.cfg.mine_max_requests);
  const SupervisionDataset mined =
      build_supervision_dataset(ctx.evaluator, reqs, mo, &ctx.env, &ctx.train);
  save_supervision(mined.records, path);
  if (manifest != nullptr) manifest->record(path);
  return mined.records;
}

SeedContext make_seed_context(const Config& base, const std::string& shared_dir, int seed_index,
                              RunManifest* manifest) {
  // Shared environment/data across seeds; per-seed model init.
  RunPaths shared{shared_dir};
  if (!fs::exists(shared.test())) {
    run_pipeline(data_only_config(base, shared_dir));
    if (manifest != nullptr) {
      manifest->record(shared.env());
      manifest->record(shared.dataset());
      manifest->record(shared.train());
      manifest->record(shared.test());
    }
  }
  Config cfg = base;
  cfg.model_seed = base.model_seed + static_cast<uint64_t>(seed_index);
  const std::string dir = shared_dir + "/seed" + std::to_string(seed_index);
  fs::create_directories(dir);

  Dataset train = load_dataset(shared.train());
  Dataset test = load_dataset(shared.test());
  EnvSpec env = EnvSpec::load(shared.env());

  const std::string ckpt = dir + "/evaluator.ckpt";
  if (!fs::exists(ckpt)) {
    EvaluatorConfig ec{dims_of(cfg), cfg.eval_layers, cfg.list_len};
    EvaluatorModel model(ec, cfg.model_seed);
    train_evaluator(model, train, eval_train_options(cfg, cfg.model_seed), nullptr, nullptr, 0);
    model.save(ckpt);
    if (manifest != nullptr) manifest->record(ckpt);
  }
  return SeedContext{cfg, dir, EvaluatorModel::load(ckpt), std::move(train), std::move(test),
                     std::move(env)};
}

HrReport train_and_eval_generator(const SeedContext& ctx,
                                  const std::vector<SupervisionRecord>& sup, Ablation ablation,
                                  double alpha_override, double tau_override) {
  GeneratorConfig gc{dims_of(ctx.cfg), ctx.cfg.gen_layers, ctx.cfg.list_len};
  GeneratorModel model(gc, ctx.cfg.model_seed);
  GenTrainOptions opt = gen_train_options(ctx.cfg, ctx.cfg.model_seed);
  opt.ablation = ablation;
  if (alpha_override >= 0.0) opt.alpha = alpha_override;
  if (tau_override > 0.0) opt.weight_temperature_override = tau_override;
  const auto req_index = index_requests(ctx.train);
  train_generator(model, sup, req_index, ctx.train, opt);
  const std::vector<RerankRequest> reqs = hr_requests(ctx.test, ctx.cfg.hr_eval_requests);
  return evaluate_hr(
      reqs, [&](const RerankRequest& r) { return model.greedy_decode(r).items; }, ctx.env,
      ctx.cfg.hr_sample_size, ctx.cfg.list_len, derive_seed(ctx.cfg.data_seed, "hr"),
      ctx.cfg.threads);
}

json mean_hr_json(const std::vector<HrReport>& reports) {
  json j;
  if (reports.empty()) return j;
  for (size_t k = 0; k < reports[0].k_percents.size(); ++k) {
    const std::string key = "hr@" + std::to_string(static_cast<int>(reports[0].k_percents[k])) + "%";
    double s = 0.0;
    json per_seed = json::array();
    for (const HrReport& r : reports) {
      s += r.hr[k];
      per_seed.push_back(r.hr[k]);
    }
    j[key] = s / static_cast<double>(reports.size());
    j[key + "_per_seed"] = per_seed;
  }
  return j;
}

}  // namespace

json run_ablations(const Config& base) {
  base.validate();
  Config cfg = base;
  cfg.beam_size = 2;  // comparison setting for the variant table
  const std::string root = cfg.out_dir + "/ablation";
  fs::create_directories(root);
  RunManifest manifest;
  manifest.config = cfg.to_json();
  manifest.config_hash = hex64(cfg.hash());

  const std::vector<std::string> variants{"full", "no_soft", "no_weight", "no_hard",
                                          "exposure_only"};
  json report;
  report["beam_size"] = cfg.beam_size;
  report["n_seeds"] = cfg.n_seeds;
  json variant_block = json::object();
  std::map<std::string, std::vector<HrReport>> results;
  for (int s = 0; s < cfg.n_seeds; ++s) {
    SeedContext ctx = make_seed_context(cfg, root, s, &manifest);
    const std::vector<SupervisionRecord> sup = mine_cached(ctx, cfg.beam_size, &manifest);
    for (const std::string& v : variants) {
      try {
        results[v].push_back(
            train_and_eval_generator(ctx, sup, parse_ablation(v), -1.0, 0.0));
      } catch (const std::exception& e) {
        variant_block[v]["errors"].push_back(std::string(e.what()));
      }
    }
  }
  for (const std::string& v : variants) {
    json row = results.count(v) ? mean_hr_json(results[v]) : json::object();
    row["present"] = results.count(v) > 0 && !results[v].empty();
    json diff = json::object();
    if (v != "full") diff["ablation"] = "full -> " + v;
    row["config_diff"] = diff;
    if (variant_block.contains(v) && variant_block[v].contains("errors"))
      row["errors"] = variant_block[v]["errors"];
    variant_block[v] = row;
  }
  report["variants"] = variant_block;

  // CSV shaped like the variant table: rows = variants, columns = metrics.
  std::ostringstream csv;
  csv << "variant,hr@1%,hr@3%,hr@10%\n";
  for (const std::string& v : variants) {
    csv << v;
    for (const char* key : {"hr@1%", "hr@3%", "hr@10%"}) {
      csv << ',';
      if (variant_block[v].contains(key)) csv << variant_block[v][key].get<double>();
    }
    csv << '\n';
  }
  const std::string csv_path = cfg.out_dir + "/ablation_report.csv";
  std::ofstream(csv_path) << csv.str();
  const std::string json_path = cfg.out_dir + "/ablation_report.json";
  write_json(json_path, report);
  manifest.record(csv_path);
  manifest.record(json_path);
  manifest.complete = true;
  manifest.save(root + "/manifest.json");
  return report;
}

json run_sweep(const Config& base) {
  base.validate();
  if (base.sweep_axis.empty())
    throw std::invalid_argument("run_sweep: sweep_axis is not set");
  const Config& cfg = base;
  const std::vector<double> values = cfg.sweep_value_list();
  const std::string root = cfg.out_dir + "/sweep_" + cfg.sweep_axis;
  fs::create_directories(root);
  RunManifest manifest;
  manifest.config = cfg.to_json();
  manifest.config_hash = hex64(cfg.hash());

  json points = json::array();
  std::vector<std::vector<HrReport>> per_value(values.size());
  std::vector<std::string> errors(values.size());
  for (int s = 0; s < cfg.n_seeds; ++s) {
    SeedContext ctx = make_seed_context(cfg, root, s, &manifest);
    for (size_t vi = 0; vi < values.size(); ++vi) {
      try {
        const double v = values[vi];
        if (cfg.sweep_axis == "beam_size") {
          const int b = static_cast<int>(v);
          if (b < 1) throw std::invalid_argument("beam_size value must be >= 1");
          const std::vector<SupervisionRecord> sup = mine_cached(ctx, b, &manifest);
          per_value[vi].push_back(
              train_and_eval_generator(ctx, sup, Ablation::kFull, -1.0, 0.0));
        } else if (cfg.sweep_axis == "soft_label_weight") {
          const std::vector<SupervisionRecord> sup = mine_cached(ctx, cfg.beam_size, &manifest);
          per_value[vi].push_back(train_and_eval_generator(ctx, sup, Ablation::kFull, v, 0.0));
        } else {  // weight_temperature
          if (v <= 0.0) throw std::invalid_argument("weight_temperature value must be > 0");
          const std::vector<SupervisionRecord> sup = mine_cached(ctx, cfg.beam_size, &manifest);
          per_value[vi].push_back(train_and_eval_generator(ctx, sup, Ablation::kFull, -1.0, v));
        }
      } catch (const std::exception& e) {
        errors[vi] = e.what();
      }
    }
  }
  for (size_t vi = 0; vi < values.size(); ++vi) {
    json p;
    p["value"] = values[vi];
    p["present"] = !per_value[vi].empty();
    if (!per_value[vi].empty()) p.update(mean_hr_json(per_value[vi]));
    if (!errors[vi].empty()) p["error"] = errors[vi];
    points.push_back(std::move(p));
  }
  json report;
  report["axis"] = cfg.sweep_axis;
  report["n_seeds"] = cfg.n_seeds;
  report["points"] = points;

  std::ostringstream csv;
  csv << cfg.sweep_axis << ",hr@1%,hr@3%,hr@10%\n";
  for (const json& p : points) {
    csv << p["value"].get<double>();
    for (const char* key : {"hr@1%", "hr@3%", "hr@10%"}) {
      csv << ',';
      if (p.contains(key)) csv << p[key].get<double>();
    }
    csv << '\n';
  }
  const std::string csv_path = cfg.out_dir + "/sweep_" + cfg.sweep_axis + "_report.csv";
  std::ofstream(csv_path) << csv.str();
  const std::string json_path = cfg.out_dir + "/sweep_" + cfg.sweep_axis + "_report.json";
  write_json(json_path, report);
  manifest.record(csv_path);
  manifest.record(json_path);
  manifest.complete = true;
  manifest.save(root + "/manifest.json");
  return report;
}

void run_inference(const Config& cfg, const std::string& generator_ckpt,
                   const std::string& requests_path, const std::string& out_path) {
  const GeneratorModel model = GeneratorModel::load(generator_ckpt);
  const Dataset ds = load_dataset(requests_path);
  std::vector<RerankRequest> reqs;
  for (const ExposureRecord& r : ds) reqs.push_back(r.request);
  const std::vector<GeneratorModel::DecodeResult> decoded =
      model.decode_batch(reqs, cfg.threads);
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("cannot open '" + out_path + "' for writing");
  for (size_t i = 0; i < reqs.size(); ++i) {
    json j;
    j["request_id"] = reqs[i].request_id;
    j["ranked_ids"] = decoded[i].items;
    j["per_step_probs"] = decoded[i].step_probs;
    os << j.dump() << '\n';
  }
}

std::string gather_report(const std::string& out_dir) {
  std::ostringstream os;
  const RunPaths paths{out_dir};
  if (fs::exists(paths.metrics_report())) {
    const json m = read_json(paths.metrics_report());
    os << "== run metrics (" << paths.metrics_report() << ") ==\n";
    os << m.dump(2) << '\n';
  }
  if (fs::exists(out_dir + "/ablation_report.json")) {
    const json a = read_json(out_dir + "/ablation_report.json");
    os << "== ablation (B=" << a["beam_size"] << ", seeds=" << a["n_seeds"] << ") ==\n";
    os << "variant          hr@1%    hr@3%    hr@10%\n";
    for (const auto& [name, row] : a["variants"].items()) {
      os << std::left << std::setw(16) << name << ' ';
      for (const char* key : {"hr@1%", "hr@3%", "hr@10%"}) {
        if (row.contains(key))
          os << std::setw(8) << std::setprecision(4) << std::fixed << row[key].get<double>() << ' ';
        else
          os << std::setw(8) << "absent" << ' ';
      }
      os << '\n';
    }
  }
  for (const char* axis : {"beam_size", "soft_label_weight", "weight_temperature"}) {
    const std::string p = out_dir + "/sweep_" + axis + "_report.json";
    if (!fs::exists(p)) continue;
    const json sweep = read_json(p);
    os << "== sweep over " << axis << " (seeds=" << sweep["n_seeds"] << ") ==\n";
    for (const json& point : sweep["points"]) {
      os << "  " << axis << '=' << point["value"].get<double>() << ": ";
      if (point.contains("hr@1%"))
        os << "hr@1%=" << std::setprecision(4) << std::fixed << point["hr@1%"].get<double>();
      else
        os << "absent";
      os << '\n';
    }
  }
  if (os.str().empty()) os << "no reports found in " << out_dir << '\n';
  return os.str();
}

}  // namespace rerank
