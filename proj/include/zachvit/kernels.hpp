#pragma once

// Dense matrix kernels backing the autograd ops.
//
// Each kernel exists twice: `serial::` is the reference implementation kept
// for testing, `omp::` splits output rows across OpenMP threads. Every output
// row is accumulated in the same order by both, so results are bitwise equal
// regardless of thread count.

#include <cstddef>
#include <span>

namespace zachvit::kernels {

enum class Policy { Serial, Parallel };

/// Per-thread default used by the autograd ops. Starts as Parallel.
Policy default_policy() noexcept;
void set_default_policy(Policy p) noexcept;

class ScopedPolicy {
 public:
  explicit ScopedPolicy(Policy p) : saved_(default_policy()) { set_default_policy(p); }
  ~ScopedPolicy() { set_default_policy(saved_); }
  ScopedPolicy(const ScopedPolicy&) = delete;
  ScopedPolicy& operator=(const ScopedPolicy&) = delete;

 private:
  Policy saved_;
};

/// Row-major C[m x n] = A[m x k] * B[k x n]  (C is overwritten).
namespace serial {
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n);
/// C[m x n] += A[k x m]^T * B[k x n]
void matmul_at_b_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);
/// C[m x n] += A[m x k] * B[n x k]^T
void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);
}  // namespace serial

namespace omp {
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n);
void matmul_at_b_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);
void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);
}  // namespace omp

// Dispatch on `default_policy()`; small products always run serially.
void matmul(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
            std::size_t k, std::size_t n);
void matmul_at_b_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);
void matmul_a_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t m,
                     std::size_t k, std::size_t n);

int max_threads() noexcept;

}  // namespace zachvit::kernels
