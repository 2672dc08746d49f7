#include "aline/kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>

#include <omp.h>

namespace aline::kernels {

int max_threads() {
  if (const char* env = std::getenv("ALINE_NUM_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
  }
  return omp_get_max_threads();
}

template <class T>
void batch_gradient_serial(int batch, const EpisodeGradFn<T>& fn, std::span<T> out) {
  AlignedVec<T> buf(out.size());
  for (int b = 0; b < batch; ++b) {
    std::fill(buf.begin(), buf.end(), T(0));
    const FlushDenormals ftz;
    fn(b, buf);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += buf[i];
  }
}

template <class T>
void batch_gradient_parallel(int batch, const EpisodeGradFn<T>& fn, std::span<T> out) {
  const std::size_t n = out.size();
  // Pad each episode's slot so every slot starts on the same alignment.
  constexpr std::size_t kPad = 64 / sizeof(T);
  const std::size_t stride = (n + kPad - 1) / kPad * kPad;
  AlignedVec<T> bufs(static_cast<std::size_t>(batch) * stride, T(0));
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1) num_threads(max_threads())
  for (int b = 0; b < batch; ++b) {
    try {
      const FlushDenormals ftz;
      fn(b, std::span<T>(bufs.data() + static_cast<std::size_t>(b) * stride, n));
    } catch (...) {
#pragma omp critical(aline_batch_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  for (int b = 0; b < batch; ++b) {
    const T* src = bufs.data() + static_cast<std::size_t>(b) * stride;
    for (std::size_t i = 0; i < n; ++i) out[i] += src[i];
  }
}

template void batch_gradient_serial<float>(int, const EpisodeGradFn<float>&, std::span<float>);
template void batch_gradient_serial<double>(int, const EpisodeGradFn<double>&, std::span<double>);
template void batch_gradient_parallel<float>(int, const EpisodeGradFn<float>&, std::span<float>);
template void batch_gradient_parallel<double>(int, const EpisodeGradFn<double>&, std::span<double>);

namespace {
void cumulative_row(const LoglikFn& loglik, const Theta& theta, std::span<const Design> designs,
                    std::span<const Observation> outcomes, double* row) {
  double s = 0.0;
  for (std::size_t t = 0; t < designs.size(); ++t) row[t] = (s += loglik(theta, designs[t], outcomes[t]));
}
}  // namespace

Vec cumulative_logliks_serial(const LoglikFn& loglik, std::span<const Theta> thetas,
                              std::span<const Design> designs, std::span<const Observation> outcomes) {
  const std::size_t T = designs.size();
  Vec out(thetas.size() * T);
  for (std::size_t l = 0; l < thetas.size(); ++l) cumulative_row(loglik, thetas[l], designs, outcomes, out.data() + l * T);
  return out;
}

Vec cumulative_logliks_parallel(const LoglikFn& loglik, std::span<const Theta> thetas,
                                std::span<const Design> designs, std::span<const Observation> outcomes) {
  const std::size_t T = designs.size();
  Vec out(thetas.size() * T);
  const auto n = static_cast<std::ptrdiff_t>(thetas.size());
#pragma omp parallel for schedule(static) num_threads(max_threads())
  for (std::ptrdiff_t l = 0; l < n; ++l) cumulative_row(loglik, thetas[l], designs, outcomes, out.data() + l * T);
  return out;
}

}  // namespace aline::kernels
