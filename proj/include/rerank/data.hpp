#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace rerank {

struct Item {
  int id = -1;
  std::vector<double> feats;
  double score = 0.0;
};

// One reranking unit of work: a user/context and N candidate items.
struct RerankRequest {
  int64_t request_id = -1;
  int user_id = -1;
  std::vector<double> user_feats;
  std::vector<double> ctx_feats;
  std::vector<Item> candidates;

  int n() const { return static_cast<int>(candidates.size()); }
  // Slot index of an item id within the candidate list, -1 if absent.
  int slot_of(int item_id) const;
};

// A logged exposure: the displayed list and its per-position click labels.
struct ExposureRecord {
  RerankRequest request;
  std::vector<int> exposed;
  std::vector<int> clicks;

  // y_t = sum of clicks up to position t (1-based steps).
  std::vector<int> cumulative_value() const;
};

using Dataset = std::vector<ExposureRecord>;

enum class LoggingPolicy { kRandom, kScoreOrder, kMixed };

LoggingPolicy parse_policy(const std::string& s);
std::string policy_name(LoggingPolicy p);

// Newline-delimited self-describing records; one JSON object per line.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

struct SplitResult {
  Dataset train;
  Dataset test;
  int single_session_users = 0;  // kept in train, excluded from test
};

// Last session per user goes to test, the rest to train. Sessions must be
// time-ordered within the dataset. Users with one session stay in train and
// are counted in the report.
SplitResult split_leave_one_out(const Dataset& ds);

}  // namespace rerank
