#pragma once

// Dense float64 kernels used by the autodiff tape.
//
// Every kernel has a serial reference (namespace `serial`) and an OpenMP
// variant (namespace `parallel`). The parallel variants split work only along
// output elements, so each output is accumulated in the same order as the
// serial reference and results are bit-identical. The dispatching functions
// in `semivar::kernels` pick the parallel variant for large shapes when not
// already inside a parallel region.

#include <cstddef>
#include <span>

namespace semivar::kernels {

// y[r] = b[r] + sum_c W[r*cols + c] * x[c]   (b may be empty)
namespace serial {
void matvec(std::span<const double> w, std::span<const double> b,
            std::span<const double> x, std::span<double> y);
// x_grad[c] += sum_r W[r*cols + c] * g[r]
void matvec_transposed_acc(std::span<const double> w, std::span<const double> g,
                           std::span<double> x_grad);
// W_grad[r*cols + c] += g[r] * x[c]
void outer_acc(std::span<const double> g, std::span<const double> x,
               std::span<double> w_grad);
}  // namespace serial

namespace parallel {
void matvec(std::span<const double> w, std::span<const double> b,
            std::span<const double> x, std::span<double> y);
void matvec_transposed_acc(std::span<const double> w, std::span<const double> g,
                           std::span<double> x_grad);
void outer_acc(std::span<const double> g, std::span<const double> x,
               std::span<double> w_grad);
}  // namespace parallel

// Work size (rows*cols) above which the dispatchers go parallel.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

void matvec(std::span<const double> w, std::span<const double> b,
            std::span<const double> x, std::span<double> y);
void matvec_transposed_acc(std::span<const double> w, std::span<const double> g,
                           std::span<double> x_grad);
void outer_acc(std::span<const double> g, std::span<const double> x,
               std::span<double> w_grad);

// Number of worker threads OpenMP would use (1 without OpenMP).
int max_threads();
bool in_parallel_region();

}  // namespace semivar::kernels
