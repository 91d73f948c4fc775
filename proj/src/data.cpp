#include "rerank/data.hpp"

#include <fstream>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace rerank {

using nlohmann::json;

int RerankRequest::slot_of(int item_id) const {
  for (int i = 0; i < n(); ++i)
    if (candidates[i].id == item_id) return i;
  return -1;
}

std::vector<int> ExposureRecord::cumulative_value() const {
  std::vector<int> y(clicks.size());
  int acc = 0;
  for (size_t t = 0; t < clicks.size(); ++t) {
    acc += clicks[t];
    y[t] = acc;
  }
  return y;
}

LoggingPolicy parse_policy(const std::string& s) {
  if (s == "random") return LoggingPolicy::kRandom;
  if (s == "score") return LoggingPolicy::kScoreOrder;
  if (s == "mixed") return LoggingPolicy::kMixed;
  throw std::invalid_argument("unknown logging policy '" + s + "' (random|score|mixed)");
}

std::string policy_name(LoggingPolicy p) {
  switch (p) {
    case LoggingPolicy::kRandom: return "random";
    case LoggingPolicy::kScoreOrder: return "score";
    case LoggingPolicy::kMixed: return "mixed";
  }
  return "?";
}

namespace {

json record_to_json(const ExposureRecord& r) {
  json j;
  j["request_id"] = r.request.request_id;
  j["user_id"] = r.request.user_id;
  j["user_feats"] = r.request.user_feats;
  j["ctx_feats"] = r.request.ctx_feats;
  json cands = json::array();
  for (const Item& it : r.request.candidates)
    cands.push_back({{"id", it.id}, {"feats", it.feats}, {"score", it.score}});
  j["candidates"] = std::move(cands);
  j["exposed"] = r.exposed;
  j["clicks"] = r.clicks;
  return j;
}

[[noreturn]] void record_fail(size_t line, const std::string& what) {
  throw std::runtime_error("dataset record " + std::to_string(line) + ": " + what);
}

template <class T>
T field(const json& j, const char* name, size_t line) {
  auto it = j.find(name);
  if (it == j.end()) record_fail(line, std::string("missing field '") + name + "'");
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    record_fail(line, std::string("bad field '") + name + "': " + e.what());
  }
}

ExposureRecord record_from_json(const json& j, size_t line) {
  ExposureRecord r;
  r.request.request_id = field<int64_t>(j, "request_id", line);
  r.request.user_id = field<int>(j, "user_id", line);
  r.request.user_feats = field<std::vector<double>>(j, "user_feats", line);
  r.request.ctx_feats = field<std::vector<double>>(j, "ctx_feats", line);
  const json cands = field<json>(j, "candidates", line);
  if (!cands.is_array()) record_fail(line, "field 'candidates' is not an array");
  for (const json& c : cands) {
    Item it;
    it.id = field<int>(c, "id", line);
    it.feats = field<std::vector<double>>(c, "feats", line);
    it.score = field<double>(c, "score", line);
    r.request.candidates.push_back(std::move(it));
  }
  r.exposed = field<std::vector<int>>(j, "exposed", line);
  r.clicks = field<std::vector<int>>(j, "clicks", line);
  if (r.exposed.size() != r.clicks.size())
    record_fail(line, "field 'clicks' length does not match 'exposed'");
  for (int c : r.clicks)
    if (c != 0 && c != 1) record_fail(line, "field 'clicks' has a value outside {0,1}");
  for (int id : r.exposed)
    if (r.request.slot_of(id) < 0)
      record_fail(line, "field 'exposed' references item " + std::to_string(id) +
                            " not in candidates");
  return r;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  for (const ExposureRecord& r : ds) os << record_to_json(r).dump() << '\n';
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  Dataset ds;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      record_fail(lineno, std::string("not valid JSON: ") + e.what());
    }
    ds.push_back(record_from_json(j, lineno));
  }
  return ds;
}

SplitResult split_leave_one_out(const Dataset& ds) {
  // Sessions are time-ordered per user; remember last index per user.
  std::map<int, std::vector<size_t>> by_user;
  for (size_t i = 0; i < ds.size(); ++i) by_user[ds[i].request.user_id].push_back(i);
  std::vector<char> is_test(ds.size(), 0);
  SplitResult out;
  for (const auto& [user, idxs] : by_user) {
    if (idxs.size() < 2) {
      ++out.single_session_users;
      continue;
    }
    is_test[idxs.back()] = 1;
  }
  for (size_t i = 0; i < ds.size(); ++i) {
    if (is_test[i])
      out.test.push_back(ds[i]);
    else
      out.train.push_back(ds[i]);
  }
  return out;
}

}  // namespace rerank
