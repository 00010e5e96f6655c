#include "zachvit/kernels.hpp"

#include <cstdint>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace zachvit::kernels {

namespace {
thread_local Policy g_policy = Policy::Parallel;

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelThreshold = 1u << 15;

inline void row_ab(const double* a, const double* b, double* c, std::size_t k, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) c[j] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p];
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

inline void row_at_b(const double* a, const double* b, double* c, std::size_t i, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p * m + i];
    const double* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
  }
}

inline void row_a_bt(const double* a, const double* b, double* c, std::size_t k, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    const double* brow = b + j * k;
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += a[p] * brow[p];
    c[j] += s;
  }
}
}  // namespace

Policy default_policy() noexcept { return g_policy; }
void set_default_policy(Policy p) noexcept { g_policy = p; }

int max_threads() noexcept {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace serial {
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) row_ab(a.data() + i * k, b.data(), c.data() + i * n, k, n);
}

void matmul_at_b_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) row_at_b(a.data(), b.data(), c.data() + i * n, i, m, k, n);
}

void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) row_a_bt(a.data() + i * k, b.data(), c.data() + i * n, k, n);
}
}  // namespace serial

namespace omp {
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i) {
    const auto r = static_cast<std::size_t>(i);
    row_ab(a.data() + r * k, b.data(), c.data() + r * n, k, n);
  }
}

void matmul_at_b_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i) {
    const auto r = static_cast<std::size_t>(i);
    row_at_b(a.data(), b.data(), c.data() + r * n, r, m, k, n);
  }
}

void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i) {
    const auto r = static_cast<std::size_t>(i);
    row_a_bt(a.data() + r * k, b.data(), c.data() + r * n, k, n);
  }
}
}  // namespace omp

namespace {
bool use_parallel(std::size_t m, std::size_t k, std::size_t n) {
  return default_policy() == Policy::Parallel && m > 1 && m * k * n >= kParallelThreshold;
}
}  // namespace

void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n) {
  if (use_parallel(m, k, n))
    omp::matmul(a, b, c, m, k, n);
  else
    serial::matmul(a, b, c, m, k, n);
}

void matmul_at_b_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  if (use_parallel(m, k, n))
    omp::matmul_at_b_acc(a, b, c, m, k, n);
  else
    serial::matmul_at_b_acc(a, b, c, m, k, n);
}

void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n) {
  if (use_parallel(m, k, n))
    omp::matmul_a_bt_acc(a, b, c, m, k, n);
  else
    serial::matmul_a_bt_acc(a, b, c, m, k, n);
}

}  // namespace zachvit::kernels
