#include "semivar/kernels.hpp"

#include <cassert>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace semivar::kernels {

namespace serial {

void matvec(std::span<const double> w, std::span<const double> b,
            std::span<const double> x, std::span<double> y) {
  const std::size_t rows = y.size();
  const std::size_t cols = x.size();
  assert(w.size() == rows * cols);
  assert(b.empty() || b.size() == rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w.data() + r * cols;
    double acc = b.empty() ? 0.0 : b[r];
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
}

void matvec_transposed_acc(std::span<const double> w, std::span<const double> g,
                           std::span<double> x_grad) {
  const std::size_t rows = g.size();
  const std::size_t cols = x_grad.size();
  assert(w.size() == rows * cols);
  for (std::size_t c = 0; c < cols; ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r) acc += w[r * cols + c] * g[r];
    x_grad[c] += acc;
  }
}

void outer_acc(std::span<const double> g, std::span<const double> x,
               std::span<double> w_grad) {
  const std::size_t rows = g.size();
  const std::size_t cols = x.size();
  assert(w_grad.size() == rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    double* row = w_grad.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += gr * x[c];
  }
}

}  // namespace serial

namespace parallel {

void matvec(std::span<const double> w, std::span<const double> b,
            std::span<const double> x, std::span<double> y) {
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(y.size());
  const std::size_t cols = x.size();
  assert(w.size() == y.size() * cols);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const double* row = w.data() + static_cast<std::size_t>(r) * cols;
    double acc = b.empty() ? 0.0 : b[static_cast<std::size_t>(r)];
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    y[static_cast<std::size_t>(r)] = acc;
  }
}

void matvec_transposed_acc(std::span<const double> w, std::span<const double> g,
                           std::span<double> x_grad) {
  const std::size_t rows = g.size();
  const std::ptrdiff_t cols = static_cast<std::ptrdiff_t>(x_grad.size());
  assert(w.size() == rows * x_grad.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < cols; ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
      acc += w[r * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)] * g[r];
    x_grad[static_cast<std::size_t>(c)] += acc;
  }
}

void outer_acc(std::span<const double> g, std::span<const double> x,
               std::span<double> w_grad) {
  const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(g.size());
  const std::size_t cols = x.size();
  assert(w_grad.size() == g.size() * cols);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const double gr = g[static_cast<std::size_t>(r)];
    if (gr == 0.0) continue;
    double* row = w_grad.data() + static_cast<std::size_t>(r) * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += gr * x[c];
  }
}

}  // namespace parallel

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

bool in_parallel_region() {
#ifdef _OPENMP
  return omp_in_parallel() != 0;
#else
  return false;
#endif
}

namespace {
bool go_parallel(std::size_t work) {
  return work >= kParallelThreshold && max_threads() > 1 && !in_parallel_region();
}
}  // namespace

void matvec(std::span<const double> w, std::span<const double> b,
            std::span<const double> x, std::span<double> y) {
  if (go_parallel(w.size()))
    parallel::matvec(w, b, x, y);
  else
    serial::matvec(w, b, x, y);
}

void matvec_transposed_acc(std::span<const double> w, std::span<const double> g,
                           std::span<double> x_grad) {
  if (go_parallel(w.size()))
    parallel::matvec_transposed_acc(w, g, x_grad);
  else
    serial::matvec_transposed_acc(w, g, x_grad);
}

void outer_acc(std::span<const double> g, std::span<const double> x,
               std::span<double> w_grad) {
  if (go_parallel(w_grad.size()))
    parallel::outer_acc(g, x, w_grad);
  else
    serial::outer_acc(g, x, w_grad);
}

}  // namespace semivar::kernels
