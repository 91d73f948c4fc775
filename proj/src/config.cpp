#include "rerank/config.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <variant>

#include <nlohmann/json.hpp>

#include "rerank/data.hpp"
#include "rerank/generator.hpp"
#include "rerank/rng.hpp"

namespace rerank {

using nlohmann::json;

namespace {

using FieldPtr = std::variant<uint64_t Config::*, int Config::*, int64_t Config::*,
                              double Config::*, std::string Config::*>;

struct FieldDef {
  const char* name;
  FieldPtr ptr;
  const char* doc;
  // Placement/runtime fields are excluded from the semantic hash: they do
  // not change what an experiment computes.
  bool semantic = true;
};

const std::vector<FieldDef>& fields() {
  static const std::vector<FieldDef> defs = {
      {"env_seed", &Config::env_seed, "environment latent seed"},
      {"data_seed", &Config::data_seed, "dataset sampling seed"},
      {"model_seed", &Config::model_seed, "model init / shuffle seed"},
      {"n_items", &Config::n_items, "item universe size"},
      {"n_categories", &Config::n_categories, "item categories for adjacency effects"},
      {"decay_base", &Config::decay_base, "multiplicative position decay in (0,1]"},
      {"env_bias", &Config::env_bias, "base click logit"},
      {"affinity_scale", &Config::affinity_scale, "user-item affinity strength"},
      {"context_scale", &Config::context_scale, "context effect strength"},
      {"interact_scale", &Config::interact_scale, "adjacent-category interaction strength"},
      {"score_noise", &Config::score_noise, "upstream score noise stddev"},
      {"n_users", &Config::n_users, "simulated users"},
      {"sessions_per_user", &Config::sessions_per_user, "sessions per user"},
      {"n_candidates", &Config::n_candidates, "candidates per request (N)"},
      {"list_len", &Config::list_len, "output list length (L)"},
      {"policy", &Config::policy, "logging policy: random|score|mixed"},
      {"policy_epsilon", &Config::policy_epsilon, "random share under mixed policy"},
      {"embed_dim", &Config::embed_dim, "field embedding width"},
      {"d_model", &Config::d_model, "transformer width"},
      {"d_pos", &Config::d_pos, "positional encoding width"},
      {"n_heads", &Config::n_heads, "attention heads"},
      {"ffn_mult", &Config::ffn_mult, "feed-forward width multiplier"},
      {"eval_layers", &Config::eval_layers, "evaluator transformer layers"},
      {"gen_layers", &Config::gen_layers, "generator transformer layers"},
      {"score_buckets", &Config::score_buckets, "upstream-score quantile buckets"},
      {"learning_rate", &Config::learning_rate, "Adam learning rate"},
      {"batch_size", &Config::batch_size, "training batch size"},
      {"eval_epochs", &Config::eval_epochs, "evaluator training epochs"},
      {"gen_epochs", &Config::gen_epochs, "generator training epochs"},
      {"adam_beta1", &Config::adam_beta1, "Adam beta1"},
      {"adam_beta2", &Config::adam_beta2, "Adam beta2"},
      {"adam_eps", &Config::adam_eps, "Adam epsilon"},
      {"grad_window", &Config::grad_window, "parallel backward window size"},
      {"beam_size", &Config::beam_size, "mining beam size (B)"},
      {"mine_topk", &Config::mine_topk, "per-step pre-truncation, 0 = all"},
      {"weight_temperature", &Config::weight_temperature, "sequence weighting temperature"},
      {"mine_max_requests", &Config::mine_max_requests, "cap on mined requests, 0 = all"},
      {"soft_label_weight", &Config::soft_label_weight, "KL term weight (alpha)"},
      {"hr_sample_size", &Config::hr_sample_size, "comparison-set size per request"},
      {"hr_eval_requests", &Config::hr_eval_requests, "test requests used for HR"},
      {"eval_metric_max_records", &Config::eval_metric_max_records,
       "held-out records for evaluator metrics"},
      {"enum_budget", &Config::enum_budget, "brute-force enumeration budget"},
      {"ablation", &Config::ablation, "full|no_soft|no_weight|no_hard|exposure_only"},
      {"sweep_axis", &Config::sweep_axis,
       "beam_size|soft_label_weight|weight_temperature (empty = no sweep)"},
      {"sweep_values", &Config::sweep_values, "comma-separated sweep values"},
      {"n_seeds", &Config::n_seeds, "seeds for ablation/sweep averaging"},
      {"threads", &Config::threads, "worker threads, 0 = all cores", false},
      {"out_dir", &Config::out_dir, "output directory", false},
      {"phases", &Config::phases,
       "all|none|comma subset of gen-data,split,train-eval,mine,train-gen,evaluate", false},
  };
  return defs;
}

void set_field(Config& c, const FieldDef& def, const std::string& raw, const std::string& where) {
  try {
    std::visit(
        [&](auto ptr) {
          using T = std::remove_cvref_t<decltype(c.*ptr)>;
          if constexpr (std::is_same_v<T, std::string>) {
            c.*ptr = raw;
          } else if constexpr (std::is_same_v<T, double>) {
            size_t used = 0;
            c.*ptr = std::stod(raw, &used);
            if (used != raw.size()) throw std::invalid_argument("trailing characters");
          } else {
            size_t used = 0;
            const long long v = std::stoll(raw, &used);
            if (used != raw.size()) throw std::invalid_argument("trailing characters");
            c.*ptr = static_cast<T>(v);
          }
        },
        def.ptr);
  } catch (const std::exception&) {
    throw std::invalid_argument(where + ": bad value '" + raw + "' for key '" + def.name + "'");
  }
}

std::string get_field(const Config& c, const FieldDef& def) {
  return std::visit(
      [&](auto ptr) -> std::string {
        using T = std::remove_cvref_t<decltype(c.*ptr)>;
        if constexpr (std::is_same_v<T, std::string>) {
          return c.*ptr;
        } else if constexpr (std::is_same_v<T, double>) {
          std::ostringstream os;
          os.precision(17);
          os << c.*ptr;
          return os.str();
        } else {
          return std::to_string(c.*ptr);
        }
      },
      def.ptr);
}

const FieldDef& find_field(const std::string& key, const std::string& where) {
  for (const FieldDef& def : fields())
    if (key == def.name) return def;
  throw std::invalid_argument(where + ": unknown key '" + key + "'");
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  const auto b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::from_string(const std::string& text) {
  Config c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.resize(hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(lineno);
    if (eq == std::string::npos)
      throw std::invalid_argument(where + ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    set_field(c, find_field(key, where), value, where);
  }
  return c;
}

Config Config::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return from_string(ss.str());
}

void Config::apply_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override: expected key=value, got '" + kv + "'");
  const std::string key = trim(kv.substr(0, eq));
  const std::string value = trim(kv.substr(eq + 1));
  set_field(*this, find_field(key, "override"), value, "override");
}

void Config::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (list_len < 1 || list_len > n_candidates) fail("list_len must satisfy 1 <= L <= N");
  if (beam_size < 1) fail("beam_size must be >= 1");
  if (soft_label_weight < 0.0) fail("soft_label_weight must be >= 0");
  if (weight_temperature <= 0.0) fail("weight_temperature must be > 0");
  if (mine_topk < 0 || mine_topk > n_candidates) fail("mine_topk must be in [0, n_candidates]");
  if (policy_epsilon < 0.0 || policy_epsilon > 1.0) fail("policy_epsilon must be in [0,1]");
  if (n_candidates > n_items) fail("n_candidates exceeds n_items");
  if (embed_dim % n_heads != 0 || d_model % n_heads != 0)
    fail("embed_dim and d_model must be divisible by n_heads");
  if (n_seeds < 1) fail("n_seeds must be >= 1");
  if (hr_sample_size < 1) fail("hr_sample_size must be >= 1");
  if (batch_size < 1 || grad_window < 1) fail("batch_size and grad_window must be >= 1");
  parse_policy(policy);
  parse_ablation(ablation);
  if (!sweep_axis.empty()) {
    if (sweep_axis != "beam_size" && sweep_axis != "soft_label_weight" &&
        sweep_axis != "weight_temperature")
      fail("sweep_axis must be beam_size|soft_label_weight|weight_temperature");
    if (sweep_values.empty()) fail("sweep_values required when sweep_axis is set");
    if (ablation != "full") fail("ablation and sweep are mutually exclusive per run");
  }
  // Phase names must parse.
  for (const char* p :
       {"gen-data", "split", "train-eval", "mine", "train-gen", "evaluate"})
    (void)phase_enabled(p);
}

std::string Config::canonical() const {
  std::map<std::string, std::string> kv;
  for (const FieldDef& def : fields()) {
    if (!def.semantic) continue;
    kv[def.name] = get_field(*this, def);
  }
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
  return os.str();
}

uint64_t Config::hash() const { return fnv1a(canonical()); }

json Config::to_json() const {
  json j;
  for (const FieldDef& def : fields()) {
    std::visit([&](auto ptr) { j[def.name] = this->*ptr; }, def.ptr);
  }
  return j;
}

bool Config::phase_enabled(const std::string& phase) const {
  if (phases == "all") return true;
  if (phases == "none") return false;
  std::istringstream is(phases);
  std::string tok;
  bool known_query = false;
  for (const char* p : {"gen-data", "split", "train-eval", "mine", "train-gen", "evaluate"})
    if (phase == p) known_query = true;
  if (!known_query) throw std::invalid_argument("config: unknown phase '" + phase + "'");
  while (std::getline(is, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    bool known = false;
    for (const char* p : {"gen-data", "split", "train-eval", "mine", "train-gen", "evaluate"})
      if (tok == p) known = true;
    if (!known) throw std::invalid_argument("config: unknown phase '" + tok + "' in phases list");
    if (tok == phase) return true;
  }
  return false;
}

std::vector<double> Config::sweep_value_list() const {
  std::vector<double> out;
  std::istringstream is(sweep_values);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    out.push_back(std::stod(tok));
  }
  return out;
}

std::string config_schema_text() {
  std::ostringstream os;
  Config defaults;
  os << "# Configuration schema: key = default  (description)\n";
  for (const FieldDef& def : fields())
    os << def.name << " = " << get_field(defaults, def) << "  # " << def.doc << '\n';
  return os.str();
}

}  // namespace rerank
