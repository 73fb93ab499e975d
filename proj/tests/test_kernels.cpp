#include <doctest.h>

#include <omp.h>

#include <random>
#include <vector>

#include "semivar/kernels.hpp"

namespace k = semivar::kernels;

namespace {

std::vector<double> randv(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST_CASE("parallel kernels are bit-identical to the serial reference") {
  const int saved = omp_get_max_threads();
  omp_set_num_threads(3);
  std::mt19937_64 rng(3);
  for (auto [rows, cols] : {std::pair{1, 1}, std::pair{7, 5}, std::pair{64, 33}, std::pair{300, 257}}) {
    const auto r = static_cast<std::size_t>(rows);
    const auto c = static_cast<std::size_t>(cols);
    const auto w = randv(r * c, rng);
    const auto b = randv(r, rng);
    const auto x = randv(c, rng);
    const auto g = randv(r, rng);

    std::vector<double> y1(r), y2(r), y3(r);
    k::serial::matvec(w, b, x, y1);
    k::parallel::matvec(w, b, x, y2);
    k::matvec(w, b, x, y3);
    CHECK(y1 == y2);
    CHECK(y1 == y3);

    std::vector<double> gx1(c, 0.5), gx2(c, 0.5);
    k::serial::matvec_transposed_acc(w, g, gx1);
    k::parallel::matvec_transposed_acc(w, g, gx2);
    CHECK(gx1 == gx2);

    std::vector<double> gw1(r * c, 1.0), gw2(r * c, 1.0);
    k::serial::outer_acc(g, x, gw1);
    k::parallel::outer_acc(g, x, gw2);
    CHECK(gw1 == gw2);
  }
  omp_set_num_threads(saved);
}

TEST_CASE("matvec matches a naive loop") {
  std::mt19937_64 rng(4);
  const auto w = randv(6, rng);
  const auto x = randv(3, rng);
  std::vector<double> y(2);
  k::serial::matvec(w, {}, x, y);
  for (int r = 0; r < 2; ++r) {
    double acc = 0.0;
    for (int c = 0; c < 3; ++c) acc += w[static_cast<std::size_t>(r * 3 + c)] * x[static_cast<std::size_t>(c)];
    CHECK(y[static_cast<std::size_t>(r)] == doctest::Approx(acc).epsilon(1e-14));
  }
}
