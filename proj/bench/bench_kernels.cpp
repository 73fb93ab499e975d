// Serial reference vs OpenMP kernels, and per-session batch gradients with
// the serial and parallel batch drivers.

#include <benchmark/benchmark.h>
#include <omp.h>

#include <random>
#include <vector>

#include "semivar/corpus.hpp"
#include "semivar/kernels.hpp"
#include "semivar/model.hpp"
#include "semivar/sequence.hpp"

namespace k = semivar::kernels;

namespace {

std::vector<double> filled(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

void BM_MatvecSerial(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto w = filled(n * n, 1), x = filled(n, 2), b = filled(n, 3);
  std::vector<double> y(n);
  for (auto _ : st) {
    k::serial::matvec(w, b, x, y);
    benchmark::DoNotOptimize(y.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n * n));
}

void BM_MatvecParallel(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto w = filled(n * n, 1), x = filled(n, 2), b = filled(n, 3);
  std::vector<double> y(n);
  for (auto _ : st) {
    k::parallel::matvec(w, b, x, y);
    benchmark::DoNotOptimize(y.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n * n));
}

void BM_OuterSerial(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto g = filled(n, 1), x = filled(n, 2);
  std::vector<double> wg(n * n);
  for (auto _ : st) {
    k::serial::outer_acc(g, x, wg);
    benchmark::DoNotOptimize(wg.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n * n));
}

void BM_OuterParallel(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto g = filled(n, 1), x = filled(n, 2);
  std::vector<double> wg(n * n);
  for (auto _ : st) {
    k::parallel::outer_acc(g, x, wg);
    benchmark::DoNotOptimize(wg.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(n * n));
}

struct Batch {
  semivar::ModelParameters p;
  std::vector<semivar::TrainingSequence> seqs;
};

const Batch& batch() {
  static const Batch b = [] {
    semivar::GeneratorConfig g;
    g.num_sessions = 16;
    const auto world = semivar::build_world(g, 1);
    const auto corpus = semivar::generate_corpus(world, g, 1);
    const auto vocab = semivar::build_vocabulary(world.ontology, corpus);
    semivar::ModelConfig mc;
    mc.vocab_size = vocab.size();
    mc.hidden = 32;
    mc.layers = 2;
    mc.context_len = 256;
    Batch out{semivar::ModelParameters(mc, semivar::ModelRole::kGenerative), {}};
    for (const auto& s : corpus) out.seqs.push_back(semivar::build_generative_sequence(s, vocab));
    return out;
  }();
  return b;
}

// Per-session teacher-forced gradients, summed in session order.
void BM_BatchGradients(benchmark::State& st) {
  const auto& b = batch();
  const bool par = st.range(0) != 0;
  const auto n = static_cast<std::ptrdiff_t>(b.seqs.size());
  for (auto _ : st) {
    std::vector<semivar::Gradients> per(b.seqs.size());
#pragma omp parallel for schedule(dynamic) if (par)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      per[static_cast<std::size_t>(i)] = b.p.zero_gradients();
      semivar::teacher_forced_nll(b.p, b.seqs[static_cast<std::size_t>(i)], &per[static_cast<std::size_t>(i)]);
    }
    semivar::Gradients total = b.p.zero_gradients();
    for (const auto& g : per) total.add(g);
    benchmark::DoNotOptimize(total.tensors.data());
  }
  st.counters["threads"] = par ? omp_get_max_threads() : 1;
  st.SetItemsProcessed(st.iterations() * n);
}

}  // namespace

BENCHMARK(BM_MatvecSerial)->Arg(64)->Arg(256)->Arg(1024);
BENCHMARK(BM_MatvecParallel)->Arg(64)->Arg(256)->Arg(1024);
BENCHMARK(BM_OuterSerial)->Arg(64)->Arg(256)->Arg(1024);
BENCHMARK(BM_OuterParallel)->Arg(64)->Arg(256)->Arg(1024);
BENCHMARK(BM_BatchGradients)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
