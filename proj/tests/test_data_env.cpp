#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rerank/data.hpp"
#include "rerank/env.hpp"
#include "rerank/rng.hpp"

using namespace rerank;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

EnvSpec small_env() { return EnvSpec(11, EnvConfig{}); }

Dataset small_dataset(const EnvSpec& env, int users = 20, int sessions = 4) {
  SynthOptions opt;
  opt.n_users = users;
  opt.sessions_per_user = sessions;
  return synth_generate(env, opt, 21);
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("empty list has zero value and prefixes are non-decreasing") {
  const EnvSpec env = small_env();
  const Dataset ds = small_dataset(env, 5, 1);
  const RerankRequest& req = ds[0].request;
  CHECK(env.list_value(req, {}) == 0.0);
  std::vector<int> list;
  double prev = 0.0;
  for (int t = 0; t < 6; ++t) {
    list.push_back(req.candidates[t].id);
    const double v = env.list_value(req, list);
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("list value rejects duplicates and foreign items") {
  const EnvSpec env = small_env();
  const Dataset ds = small_dataset(env, 2, 1);
  const RerankRequest& req = ds[0].request;
  const int a = req.candidates[0].id;
  CHECK_THROWS_AS(env.list_value(req, {a, a}), std::invalid_argument);
  int foreign = 0;
  while (req.slot_of(foreign) >= 0) ++foreign;
  CHECK_THROWS_AS(env.list_value(req, {foreign}), std::invalid_argument);
}

TEST_CASE("cached valuation matches the validating path") {
  const EnvSpec env = small_env();
  const Dataset ds = small_dataset(env, 5, 2);
  Rng rng(3);
  for (const ExposureRecord& rec : ds) {
    const EnvSpec::RequestCache cache = env.make_cache(rec.request, 6);
    const std::vector<int> slots = rng.sample_without_replacement(rec.request.n(), 6);
    std::vector<int> ids;
    for (int s : slots) ids.push_back(rec.request.candidates[s].id);
    CHECK(env.list_value(rec.request, ids) ==
          doctest::Approx(env.list_value_cached(cache, slots.data(), 6)).epsilon(1e-12));
  }
}

TEST_CASE("env exhibits genuine order dependence") {
  // Over 100 random requests, at least 95 must have two same-set
  // permutations whose values differ by more than 1e-3.
  const EnvSpec env = small_env();
  const Dataset ds = small_dataset(env, 100, 1);
  Rng rng(5);
  int dependent = 0;
  for (const ExposureRecord& rec : ds) {
    const std::vector<int> slots = rng.sample_without_replacement(rec.request.n(), 6);
    std::vector<int> ids;
    for (int s : slots) ids.push_back(rec.request.candidates[s].id);
    double lo = HUGE_VAL, hi = -HUGE_VAL;
    std::vector<int> perm = ids;
    for (int trial = 0; trial < 12; ++trial) {
      rng.shuffle(perm);
      const double v = env.list_value(rec.request, perm);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi - lo > 1e-3) ++dependent;
  }
  CHECK(dependent >= 95);
}

TEST_CASE("environment regenerates identically from its seed file") {
  const EnvSpec env = small_env();
  const std::string path = temp_path("env_roundtrip.json");
  env.save(path);
  const EnvSpec env2 = EnvSpec::load(path);
  const Dataset a = small_dataset(env, 3, 2);
  const Dataset b = small_dataset(env2, 3, 2);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].exposed == b[i].exposed);
    CHECK(a[i].clicks == b[i].clicks);
    CHECK(a[i].request.user_feats == b[i].request.user_feats);
  }
}

TEST_CASE("synth_generate basics") {
  const EnvSpec env = small_env();
  SUBCASE("zero sessions yields an empty dataset") {
    SynthOptions opt;
    opt.n_users = 10;
    opt.sessions_per_user = 0;
    CHECK(synth_generate(env, opt, 1).empty());
  }
  SUBCASE("same seed gives a byte-identical dataset file") {
    const std::string p1 = temp_path("ds_a.jsonl");
    const std::string p2 = temp_path("ds_b.jsonl");
    save_dataset(small_dataset(env), p1);
    save_dataset(small_dataset(env), p2);
    CHECK(read_file(p1) == read_file(p2));
    CHECK(!read_file(p1).empty());
  }
  SUBCASE("cumulative labels are consistent") {
    const Dataset ds = small_dataset(env);
    for (const ExposureRecord& rec : ds) {
      const std::vector<int> y = rec.cumulative_value();
      int prev = 0;
      for (size_t t = 0; t < y.size(); ++t) {
        CHECK(y[t] >= 0);
        CHECK(y[t] <= static_cast<int>(t) + 1);
        const int delta = y[t] - prev;
        CHECK((delta == 0 || delta == 1));
        prev = y[t];
      }
      // Exposed ids are distinct and drawn from the candidates.
      std::set<int> distinct(rec.exposed.begin(), rec.exposed.end());
      CHECK(distinct.size() == rec.exposed.size());
      for (int id : rec.exposed) CHECK(rec.request.slot_of(id) >= 0);
    }
  }
}

TEST_CASE("empirical click mean matches the exact env value within 3 SE") {
  // Monte-Carlo consistency: realized total clicks against the policy
  // averaged exact expectation, with the binomial variance computed from
  // the same exposures.
  const EnvSpec env = small_env();
  SynthOptions opt;
  opt.n_users = 2500;
  opt.sessions_per_user = 20;  // 50,000 records
  const Dataset ds = synth_generate(env, opt, 77);
  double click_sum = 0.0, exact_sum = 0.0, var_sum = 0.0;
  for (const ExposureRecord& rec : ds) {
    click_sum += rec.cumulative_value().back();
    for (int t = 0; t < static_cast<int>(rec.exposed.size()); ++t) {
      const double p = env.click_prob(rec.request, rec.exposed, t);
      exact_sum += p;
      var_sum += p * (1.0 - p);
    }
  }
  const double n = static_cast<double>(ds.size());
  const double se = std::sqrt(var_sum) / n;
  CHECK(std::fabs(click_sum / n - exact_sum / n) <= 3.0 * se);
}

TEST_CASE("logging policies produce the stated orderings") {
  const EnvSpec env = small_env();
  SynthOptions opt;
  opt.n_users = 30;
  opt.sessions_per_user = 1;
  opt.policy = LoggingPolicy::kScoreOrder;
  const Dataset ds = synth_generate(env, opt, 9);
  for (const ExposureRecord& rec : ds) {
    for (size_t t = 1; t < rec.exposed.size(); ++t) {
      const double prev = rec.request.candidates[rec.request.slot_of(rec.exposed[t - 1])].score;
      const double cur = rec.request.candidates[rec.request.slot_of(rec.exposed[t])].score;
      CHECK(prev >= cur);
    }
  }
  CHECK_THROWS_AS(parse_policy("bogus"), std::invalid_argument);
}

TEST_CASE("dataset round-trip and loader errors") {
  const EnvSpec env = small_env();
  const Dataset ds = small_dataset(env, 1, 1);
  const std::string path = temp_path("ds_roundtrip.jsonl");

  SUBCASE("round-trip is structurally equal") {
    save_dataset(ds, path);
    const Dataset back = load_dataset(path);
    REQUIRE(back.size() == ds.size());
    CHECK(back[0].request.request_id == ds[0].request.request_id);
    CHECK(back[0].exposed == ds[0].exposed);
    CHECK(back[0].clicks == ds[0].clicks);
    CHECK(back[0].request.user_feats == ds[0].request.user_feats);
    CHECK(back[0].request.candidates.size() == ds[0].request.candidates.size());
    CHECK(back[0].request.candidates[3].feats == ds[0].request.candidates[3].feats);
  }

  SUBCASE("truncated record names the offending line") {
    save_dataset(ds, path);
    std::string text = read_file(path);
    std::ofstream(path) << text.substr(0, text.size() / 2);
    CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("record 1"), std::runtime_error);
  }

  SUBCASE("missing field names the field") {
    std::ofstream(path) << R"({"request_id": 1, "user_id": 0})" << '\n';
    CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("user_feats"), std::runtime_error);
  }

  SUBCASE("bad click value is rejected") {
    save_dataset(ds, path);
    std::string text = read_file(path);
    const auto pos = text.find("\"clicks\":[");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 11, "\"clicks\":[7");
    std::ofstream(path) << text;
    CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("clicks"), std::runtime_error);
  }
}

TEST_CASE("leave-one-out split") {
  const EnvSpec env = small_env();
  Dataset ds = small_dataset(env, 10, 3);
  // Give one user a single session by dropping their later records.
  Dataset trimmed;
  for (const ExposureRecord& rec : ds)
    if (rec.request.user_id != 0 || rec.request.request_id % 100000 == 0)
      trimmed.push_back(rec);

  const SplitResult split = split_leave_one_out(trimmed);
  CHECK(split.single_session_users == 1);
  CHECK(split.test.size() == 9);  // eligible users only
  CHECK(split.train.size() + split.test.size() == trimmed.size());

  // Last session per user goes to test; no request id overlaps.
  std::set<int64_t> train_ids, test_ids;
  for (const ExposureRecord& r : split.train) train_ids.insert(r.request.request_id);
  for (const ExposureRecord& r : split.test) {
    test_ids.insert(r.request.request_id);
    CHECK(train_ids.count(r.request.request_id) == 0);
  }
  for (const ExposureRecord& r : split.test) CHECK(r.request.request_id % 100000 == 2);
  // The single-session user stays in train.
  bool found = false;
  for (const ExposureRecord& r : split.train) found |= r.request.user_id == 0;
  CHECK(found);
}

TEST_CASE("user and session streams are independent of each other") {
  // The same user gets the same latent regardless of session count, so
  // adding sessions never perturbs existing ones.
  const EnvSpec env = small_env();
  SynthOptions a, b;
  a.n_users = b.n_users = 4;
  a.sessions_per_user = 2;
  b.sessions_per_user = 5;
  const Dataset da = synth_generate(env, a, 33);
  const Dataset db = synth_generate(env, b, 33);
  for (int u = 0; u < 4; ++u)
    for (int s = 0; s < 2; ++s) {
      const ExposureRecord& ra = da[u * 2 + s];
      const ExposureRecord& rb = db[u * 5 + s];
      CHECK(ra.request.request_id == rb.request.request_id);
      CHECK(ra.exposed == rb.exposed);
      CHECK(ra.clicks == rb.clicks);
    }
}
