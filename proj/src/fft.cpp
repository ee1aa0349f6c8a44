#include "pimsm/fft.hpp"

#include "pimsm/errors.hpp"

#include <fftw3.h>

#include <mutex>

namespace pimsm::fft {
namespace {
// FFTW's planner is not thread-safe; execution on distinct plans is.
std::mutex planner_mutex;
}  // namespace

std::vector<std::complex<double>> rfft(std::span<const double> x) {
  const int n = static_cast<int>(x.size());
  if (n < 1) throw ParameterError("rfft of an empty signal");
  std::vector<double> in(x.begin(), x.end());
  std::vector<std::complex<double>> out(static_cast<std::size_t>(n / 2 + 1));
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex);
    plan = fftw_plan_dft_r2c_1d(n, in.data(), reinterpret_cast<fftw_complex*>(out.data()), FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(planner_mutex);
    fftw_destroy_plan(plan);
  }
  return out;
}

std::vector<double> irfft(std::span<const std::complex<double>> bins, std::size_t n) {
  if (bins.size() != n / 2 + 1) throw ParameterError("irfft: expected n/2+1 bins");
  // c2r destroys its input
  std::vector<std::complex<double>> in(bins.begin(), bins.end());
  std::vector<double> out(n);
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex);
    plan = fftw_plan_dft_c2r_1d(static_cast<int>(n), reinterpret_cast<fftw_complex*>(in.data()), out.data(),
                                FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard lock(planner_mutex);
    fftw_destroy_plan(plan);
  }
  for (auto& v : out) v /= static_cast<double>(n);
  return out;
}

}  // namespace pimsm::fft
