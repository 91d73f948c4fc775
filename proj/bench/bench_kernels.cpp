// Serial vs OpenMP timing for the hot kernels: beam-expansion scoring,
// per-request mining, HR valuation, and windowed batch gradients.
#include <cstdio>

#include <omp.h>

#include "rerank/env.hpp"
#include "rerank/evaluator.hpp"
#include "rerank/generator.hpp"
#include "rerank/metrics.hpp"
#include "rerank/miner.hpp"

using namespace rerank;

namespace {

struct Fixture {
  EnvSpec env;
  Dataset data;
  EvaluatorModel evaluator;

  Fixture()
      : env(1, EnvConfig{}),
        data(synth_generate(env, SynthOptions{64, 4, 12, 6, LoggingPolicy::kMixed, 0.2}, 2)),
        evaluator(EvaluatorConfig{ModelDims{}, 6, 6}, 3) {}
};

template <class F>
double time_once(F&& f) {
  const double t0 = omp_get_wtime();
  f();
  return omp_get_wtime() - t0;
}

void row(const char* name, double serial, double parallel, int threads) {
  std::printf("%-28s serial %8.3fs  omp(%d) %8.3fs  speedup %5.2fx\n", name, serial, threads,
              parallel, serial / parallel);
}

}  // namespace

int main() {
  const int threads = omp_get_max_threads();
  std::printf("benchmarking with %d threads\n", threads);
  Fixture fx;

  {
    std::vector<std::vector<int>> prefixes;
    const RerankRequest& req = fx.data[0].request;
    for (const Item& a : req.candidates)
      for (const Item& b : req.candidates)
        if (a.id != b.id) prefixes.push_back({a.id, b.id});
    std::vector<double> serial_vals, parallel_vals;
    const double ts =
        time_once([&] { serial_vals = fx.evaluator.score_batch_serial(req, prefixes); });
    const double tp =
        time_once([&] { parallel_vals = fx.evaluator.score_batch(req, prefixes, threads); });
    row("beam expansion scoring", ts, tp, threads);
    if (serial_vals != parallel_vals) std::printf("  MISMATCH in batch scoring!\n");
  }

  {
    std::vector<RerankRequest> reqs;
    for (const ExposureRecord& r : fx.data) reqs.push_back(r.request);
    MineOptions opt;
    opt.beam_size = 4;
    opt.list_len = 6;
    SupervisionDataset serial_out, parallel_out;
    const double ts = time_once(
        [&] { serial_out = build_supervision_dataset_serial(fx.evaluator, reqs, opt); });
    MineOptions popt = opt;
    popt.threads = threads;
    const double tp =
        time_once([&] { parallel_out = build_supervision_dataset(fx.evaluator, reqs, popt); });
    row("supervision mining", ts, tp, threads);
  }

  {
    std::vector<RerankRequest> reqs;
    for (const ExposureRecord& r : fx.data) reqs.push_back(r.request);
    GeneratorModel gen(GeneratorConfig{ModelDims{}, 4, 6}, 5);
    auto decode = [&](const RerankRequest& r) { return gen.greedy_decode(r).items; };
    HrReport serial_rep, parallel_rep;
    const double ts =
        time_once([&] { serial_rep = evaluate_hr_serial(reqs, decode, fx.env, 2000, 6, 9); });
    const double tp =
        time_once([&] { parallel_rep = evaluate_hr(reqs, decode, fx.env, 2000, 6, 9, threads); });
    row("hit-rate evaluation", ts, tp, threads);
    if (serial_rep.hr != parallel_rep.hr) std::printf("  MISMATCH in HR!\n");
  }

  {
    TrainOptions serial_opt;
    serial_opt.epochs = 1;
    serial_opt.batch_size = 64;
    serial_opt.threads = 1;
    TrainOptions parallel_opt = serial_opt;
    parallel_opt.threads = threads;
    const double ts = time_once([&] {
      EvaluatorModel m(EvaluatorConfig{ModelDims{}, 6, 6}, 3);
      train_evaluator(m, fx.data, serial_opt);
    });
    const double tp = time_once([&] {
      EvaluatorModel m(EvaluatorConfig{ModelDims{}, 6, 6}, 3);
      train_evaluator(m, fx.data, parallel_opt);
    });
    row("evaluator training epoch", ts, tp, threads);
  }

  return 0;
}
