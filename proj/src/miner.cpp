#include "rerank/miner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "rerank/parallel.hpp"

namespace rerank {

using nlohmann::json;

namespace {

// Scores of one prefix's expansion set: (item id, V-hat) ordered by item id.
using StepScores = std::vector<std::pair<int, double>>;

struct Beam {
  std::vector<int> seq;
  double value = 0.0;
  // Expansion scores of each ancestor prefix, step by step; shared between
  // siblings of the same parent.
  std::vector<std::shared_ptr<const StepScores>> history;
};

std::vector<std::pair<int, double>> softmax_by_id(const StepScores& scores) {
  double mx = -HUGE_VAL;
  for (const auto& [id, v] : scores) mx = std::max(mx, v);
  double z = 0.0;
  std::vector<std::pair<int, double>> out;
  out.reserve(scores.size());
  for (const auto& [id, v] : scores) {
    const double e = std::exp(v - mx);
    out.emplace_back(id, e);
    z += e;
  }
  for (auto& [id, p] : out) p /= z;
  return out;
}

// Remaining candidates of a prefix, pre-truncated to the topk best upstream
// scores (ties toward smaller id), returned in item-id order.
std::vector<int> remaining_candidates(const RerankRequest& req, const std::vector<int>& prefix,
                                      int topk) {
  std::vector<int> rest;
  for (const Item& it : req.candidates) {
    if (std::find(prefix.begin(), prefix.end(), it.id) == prefix.end()) rest.push_back(it.id);
  }
  if (topk < static_cast<int>(rest.size())) {
    std::stable_sort(rest.begin(), rest.end(), [&](int a, int b) {
      const double sa = req.candidates[req.slot_of(a)].score;
      const double sb = req.candidates[req.slot_of(b)].score;
      if (sa != sb) return sa > sb;
      return a < b;
    });
    rest.resize(topk);
  }
  std::sort(rest.begin(), rest.end());
  return rest;
}

}  // namespace

SequenceWeights sequence_weights(const std::vector<double>& values, double temperature,
                                 int beam_size) {
  if (values.empty()) throw std::invalid_argument("sequence_weights: empty value set");
  if (temperature <= 0.0)
    throw std::invalid_argument("sequence_weights: temperature must be positive");
  double mx = -HUGE_VAL;
  for (double v : values) mx = std::max(mx, v);
  SequenceWeights out;
  out.weights.resize(values.size());
  double z = 0.0;
  for (size_t i = 0; i < values.size(); ++i) {
    out.weights[i] = std::exp((values[i] - mx) / temperature);
    z += out.weights[i];
  }
  out.effective.resize(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    out.weights[i] /= z;
    out.effective[i] = out.weights[i] * beam_size;
  }
  return out;
}

std::vector<std::pair<int, double>> soft_labels(const EvaluatorModel& evaluator,
                                                const RerankRequest& req,
                                                const std::vector<int>& prefix, int threads) {
  const std::vector<int> rest = remaining_candidates(req, prefix, req.n());
  if (rest.empty()) throw std::invalid_argument("soft_labels: prefix exhausts the candidate set");
  std::vector<std::vector<int>> expanded;
  expanded.reserve(rest.size());
  for (int id : rest) {
    std::vector<int> seq = prefix;
    seq.push_back(id);
    expanded.push_back(std::move(seq));
  }
  const std::vector<double> values = evaluator.score_batch(req, expanded, threads);
  StepScores scores;
  for (size_t i = 0; i < rest.size(); ++i) scores.emplace_back(rest[i], values[i]);
  return softmax_by_id(scores);
}

MinedRequest beam_search_mine(const EvaluatorModel& evaluator, const RerankRequest& req,
                              const MineOptions& opt) {
  if (opt.beam_size < 1) throw std::invalid_argument("beam_search_mine: beam_size must be >= 1");
  const int topk = opt.topk > 0 ? opt.topk : req.n();
  if (topk < 1 || opt.beam_size * topk == 0)
    throw std::invalid_argument("beam_search_mine: beam_size * topk must be positive");
  if (topk > req.n())
    throw std::invalid_argument("beam_search_mine: topk exceeds candidate count");
  if (opt.list_len < 1 || opt.list_len > req.n())
    throw std::invalid_argument("beam_search_mine: list_len must be in [1, n_candidates]");

  std::vector<Beam> beams(1);  // the empty prefix
  for (int step = 0; step < opt.list_len; ++step) {
    // Expand every kept prefix with its pre-truncated remaining candidates.
    struct Expansion {
      int parent;
      int item;
      double value = 0.0;
    };
    std::vector<Expansion> expansions;
    std::vector<std::vector<int>> prefixes;
    std::vector<std::pair<size_t, size_t>> parent_span(beams.size());
    for (size_t b = 0; b < beams.size(); ++b) {
      const std::vector<int> rest = remaining_candidates(req, beams[b].seq, topk);
      parent_span[b].first = expansions.size();
      for (int id : rest) {
        expansions.push_back({static_cast<int>(b), id});
        std::vector<int> seq = beams[b].seq;
        seq.push_back(id);
        prefixes.push_back(std::move(seq));
      }
      parent_span[b].second = expansions.size();
    }
    if (expansions.empty())
      throw std::invalid_argument("beam_search_mine: no expandable candidates at step " +
                                  std::to_string(step + 1));
    const std::vector<double> values = evaluator.score_batch(req, prefixes, opt.threads);
    for (size_t i = 0; i < expansions.size(); ++i) expansions[i].value = values[i];

    // Each parent's expansion scores back the soft labels of its children.
    std::vector<std::shared_ptr<const StepScores>> parent_scores(beams.size());
    for (size_t b = 0; b < beams.size(); ++b) {
      auto ss = std::make_shared<StepScores>();
      for (size_t i = parent_span[b].first; i < parent_span[b].second; ++i)
        ss->emplace_back(expansions[i].item, expansions[i].value);
      parent_scores[b] = std::move(ss);
    }

    std::vector<int> order(expansions.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (expansions[a].value != expansions[b].value)
        return expansions[a].value > expansions[b].value;
      if (expansions[a].item != expansions[b].item) return expansions[a].item < expansions[b].item;
      return beams[expansions[a].parent].seq < beams[expansions[b].parent].seq;
    });
    const int keep = std::min<int>(opt.beam_size, static_cast<int>(order.size()));
    std::vector<Beam> next;
    next.reserve(keep);
    for (int k = 0; k < keep; ++k) {
      const Expansion& e = expansions[order[k]];
      Beam nb;
      nb.seq = beams[e.parent].seq;
      nb.seq.push_back(e.item);
      nb.value = e.value;
      nb.history = beams[e.parent].history;
      nb.history.push_back(parent_scores[e.parent]);
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
  }

  std::sort(beams.begin(), beams.end(), [](const Beam& a, const Beam& b) {
    if (a.value != b.value) return a.value > b.value;
    return a.seq < b.seq;
  });

  MinedRequest out;
  out.under_filled = static_cast<int>(beams.size()) < opt.beam_size;
  std::vector<double> values;
  for (const Beam& b : beams) values.push_back(b.value);
  const SequenceWeights w =
      sequence_weights(values, opt.weight_temperature, static_cast<int>(beams.size()));
  for (size_t b = 0; b < beams.size(); ++b) {
    SupervisionRecord rec;
    rec.request_id = req.request_id;
    rec.sequence = beams[b].seq;
    rec.value = beams[b].value;
    rec.weight = w.weights[b];
    rec.effective_weight = w.effective[b];
    for (int t = 0; t < opt.list_len; ++t) {
      SupervisionStep step;
      step.hard_id = beams[b].seq[t];
      step.soft = softmax_by_id(*beams[b].history[t]);
      rec.steps.push_back(std::move(step));
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

namespace {

SupervisionDataset build_impl(const EvaluatorModel& evaluator,
                              const std::vector<RerankRequest>& requests, const MineOptions& opt,
                              const EnvSpec* env, const Dataset* logged, int threads) {
  if (requests.empty())
    throw std::invalid_argument("build_supervision_dataset: empty request set");
  std::vector<int> order(requests.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return requests[a].request_id < requests[b].request_id;
  });

  struct PerRequest {
    MinedRequest mined;
    bool failed = false;
  };
  std::vector<PerRequest> results(requests.size());
  MineOptions per_request = opt;
  per_request.threads = 1;  // fan out across requests instead
  parallel_for(static_cast<int>(order.size()), threads, [&](int i) {
    try {
      results[i].mined = beam_search_mine(evaluator, requests[order[i]], per_request);
    } catch (const std::exception&) {
      results[i].failed = true;
    }
  });

  SupervisionDataset out;
  out.report.n_requests = static_cast<int>(requests.size());
  double top_sum = 0.0, all_sum = 0.0, env_top_sum = 0.0;
  int64_t all_count = 0;
  int ok_requests = 0;
  for (size_t i = 0; i < order.size(); ++i) {
    const RerankRequest& req = requests[order[i]];
    if (results[i].failed) {
      out.report.failed_requests.push_back(req.request_id);
      continue;
    }
    const MinedRequest& mined = results[i].mined;
    if (mined.under_filled) ++out.report.under_filled_requests;
    ++ok_requests;
    top_sum += mined.records.front().value;
    if (env != nullptr)
      env_top_sum += env->list_value(req, mined.records.front().sequence);
    for (const SupervisionRecord& rec : mined.records) {
      all_sum += rec.value;
      ++all_count;
      out.records.push_back(rec);
    }
  }
  out.report.n_records = static_cast<int>(out.records.size());
  if (ok_requests > 0) {
    out.report.mean_value_top = top_sum / ok_requests;
    if (env != nullptr) out.report.mean_env_value_top = env_top_sum / ok_requests;
  }
  if (all_count > 0) out.report.mean_value_all = all_sum / static_cast<double>(all_count);
  if (env != nullptr && logged != nullptr && !logged->empty()) {
    double s = 0.0;
    for (const ExposureRecord& rec : *logged) s += env->list_value(rec.request, rec.exposed);
    out.report.mean_env_value_logged = s / static_cast<double>(logged->size());
  }
  return out;
}

}  // namespace

SupervisionDataset build_supervision_dataset(const EvaluatorModel& evaluator,
                                             const std::vector<RerankRequest>& requests,
                                             const MineOptions& opt, const EnvSpec* env,
                                             const Dataset* logged) {
  return build_impl(evaluator, requests, opt, env, logged, opt.threads);
}

SupervisionDataset build_supervision_dataset_serial(const EvaluatorModel& evaluator,
                                                    const std::vector<RerankRequest>& requests,
                                                    const MineOptions& opt, const EnvSpec* env,
                                                    const Dataset* logged) {
  return build_impl(evaluator, requests, opt, env, logged, 1);
}

json MiningReport::to_json() const {
  json j;
  j["n_requests"] = n_requests;
  j["n_records"] = n_records;
  j["under_filled_requests"] = under_filled_requests;
  j["failed_requests"] = failed_requests;
  j["mean_value_top"] = mean_value_top;
  j["mean_value_all"] = mean_value_all;
  j["mean_env_value_top"] =
      mean_env_value_top.has_value() ? json(*mean_env_value_top) : json(nullptr);
  j["mean_env_value_logged"] =
      mean_env_value_logged.has_value() ? json(*mean_env_value_logged) : json(nullptr);
  return j;
}

void save_supervision(const std::vector<SupervisionRecord>& records, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const SupervisionRecord& rec : records) {
    json j;
    j["request_id"] = rec.request_id;
    j["sequence"] = rec.sequence;
    j["value"] = rec.value;
    j["weight"] = rec.weight;
    j["effective_weight"] = rec.effective_weight;
    json steps = json::array();
    for (const SupervisionStep& st : rec.steps) {
      json sj;
      sj["hard_id"] = st.hard_id;
      json soft = json::object();
      for (const auto& [id, p] : st.soft) soft[std::to_string(id)] = p;
      sj["soft"] = std::move(soft);
      steps.push_back(std::move(sj));
    }
    j["steps"] = std::move(steps);
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<SupervisionRecord> load_supervision(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<SupervisionRecord> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      SupervisionRecord rec;
      rec.request_id = j.at("request_id").get<int64_t>();
      rec.sequence = j.at("sequence").get<std::vector<int>>();
      rec.value = j.at("value").get<double>();
      rec.weight = j.at("weight").get<double>();
      rec.effective_weight = j.at("effective_weight").get<double>();
      for (const json& sj : j.at("steps")) {
        SupervisionStep st;
        st.hard_id = sj.at("hard_id").get<int>();
        for (const auto& [key, val] : sj.at("soft").items())
          st.soft.emplace_back(std::stoi(key), val.get<double>());
        std::sort(st.soft.begin(), st.soft.end());
        rec.steps.push_back(std::move(st));
      }
      out.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw std::runtime_error("supervision record " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace rerank
