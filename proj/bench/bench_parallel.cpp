// Compares the OpenMP kernels against their serial reference
// implementations: batched risk-model inference and the heuristic
// simplex search used by the teacher.

#include <chrono>
#include <cstdio>
#include <vector>

#include "slasim/decompose.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace slasim;

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("openmp enabled, max threads = %d\n", omp_get_max_threads());
#else
  std::printf("openmp disabled; both variants run serially\n");
#endif

  Rng rng(42);
  RiskModel model(rng);

  // batched inference
  const std::size_t batch = 200000;
  std::vector<double> taus(batch), out_p(batch), out_s(batch);
  for (auto& t : taus) t = rng.uniform(1.0, 110.0);

  auto t0 = std::chrono::steady_clock::now();
  model.predict_batch_serial(taus, out_s);
  const double serial_ms = ms_since(t0);
  t0 = std::chrono::steady_clock::now();
  model.predict_batch(taus, out_p);
  const double parallel_ms = ms_since(t0);

  double max_diff = 0.0;
  for (std::size_t i = 0; i < batch; ++i)
    max_diff = std::max(max_diff, std::abs(out_p[i] - out_s[i]));
  std::printf("predict_batch     %zu taus: serial %.1f ms, parallel %.1f ms "
              "(%.2fx), max |diff| = %.3g\n",
              batch, serial_ms, parallel_ms, serial_ms / parallel_ms, max_diff);

  // heuristic search
  const std::size_t n = 3, samples = 10000;
  std::vector<RiskModel> models;
  for (std::size_t i = 0; i < n; ++i) models.emplace_back(rng);
  std::vector<const Predictor*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);

  Rng hs(7), hp(7);
  t0 = std::chrono::steady_clock::now();
  Assignment a_s = heuristic_search_serial(ptrs, 100.0, samples, hs);
  const double hs_serial = ms_since(t0);
  t0 = std::chrono::steady_clock::now();
  Assignment a_p = heuristic_search(ptrs, 100.0, samples, hp);
  const double hs_parallel = ms_since(t0);

  bool same = a_s == a_p;
  std::printf("heuristic_search  %zu samples: serial %.1f ms, parallel %.1f ms "
              "(%.2fx), assignments %s\n",
              samples, hs_serial, hs_parallel, hs_serial / hs_parallel,
              same ? "identical" : "DIFFER");
  return same && max_diff == 0.0 ? 0 : 1;
}
