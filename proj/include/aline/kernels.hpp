#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

#include "aline/model.hpp"
#include "aline/tasks.hpp"

namespace aline::kernels {

/// Treats subnormal floats as zero on the calling thread while alive. Peaked
/// softmaxes in trained networks underflow into subnormals, which x86 handles
/// in microcode and which made late training epochs several times slower.
class FlushDenormals {
 public:
#if defined(__SSE__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | kFtzDaz); }
  ~FlushDenormals() { _mm_setcsr(saved_); }
#else
  FlushDenormals() = default;
#endif
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
#if defined(__SSE__)
  static constexpr unsigned kFtzDaz = 0x8040;  // flush-to-zero | denormals-are-zero
  unsigned saved_;
#endif
};

/// Worker count for parallel kernels: ALINE_NUM_THREADS when set, otherwise
/// the OpenMP default.
int max_threads();

/// Computes one episode's gradient into a zeroed buffer of the given size.
template <class T>
using EpisodeGradFn = std::function<void(int episode, std::span<T> grad)>;

/// Sums per-episode gradients into `out` in episode order. The serial and
/// parallel versions give bit-identical results for any thread count.
template <class T>
void batch_gradient_serial(int batch, const EpisodeGradFn<T>& fn, std::span<T> out);
template <class T>
void batch_gradient_parallel(int batch, const EpisodeGradFn<T>& fn, std::span<T> out);

using LoglikFn = std::function<double(const Theta&, const Design&, const Observation&)>;

/// Row-major (theta x step) matrix of cumulative trajectory log-likelihoods:
/// entry (l, t) = sum_{s <= t} log p(y_s | theta_l, x_s).
Vec cumulative_logliks_serial(const LoglikFn& loglik, std::span<const Theta> thetas,
                              std::span<const Design> designs, std::span<const Observation> outcomes);
Vec cumulative_logliks_parallel(const LoglikFn& loglik, std::span<const Theta> thetas,
                                std::span<const Design> designs, std::span<const Observation> outcomes);

}  // namespace aline::kernels
