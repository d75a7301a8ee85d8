#pragma once

// Dense double-precision inner loops used by the tensor layer.
//
// Every kernel has a portable scalar reference implementation and, on x86-64,
// an AVX2+FMA variant. The variant is chosen once at startup from the CPU
// feature flags; HDMNET_KERNELS=scalar|avx2 overrides the choice. All
// variants accumulate into their output (y += ..., C += ...).

#include <cstddef>
#include <string_view>

namespace hdmnet::kernels {

enum class Isa { kScalar, kAvx2 };

struct KernelTable {
  Isa isa;
  double (*dot)(const double* a, const double* b, std::size_t n);
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // C[m x n] += A[m x k] * B[k x n]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                  const double* b, double* c);
  // C[m x n] += A[m x k] * B[n x k]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                  const double* b, double* c);
  // C[m x n] += A[k x m]^T * B[k x n]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                  const double* b, double* c);
};

std::string_view isa_name(Isa isa);

// True when the running CPU (and this build) can execute the variant.
bool isa_supported(Isa isa);

// Table for a specific variant. Throws std::invalid_argument if unsupported.
const KernelTable& table(Isa isa);

// The table all tensor ops go through.
const KernelTable& active();

// Switches the active table; returns the previous variant.
Isa select(Isa isa);

// RAII override, mainly for equivalence tests.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : previous_(select(isa)) {}
  ~ScopedIsa() { select(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

namespace detail {
const KernelTable& scalar_table();
#if defined(__x86_64__) || defined(_M_X64)
const KernelTable& avx2_table();
#endif
}  // namespace detail

}  // namespace hdmnet::kernels
