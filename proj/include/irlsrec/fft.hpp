#pragma once

#include <complex>
#include <mutex>
#include <vector>

#include <fftw3.h>

namespace irlsrec {

/// Thin FFTW wrapper for unitary 2D complex transforms. FFTW plan creation is
/// not thread safe, so it is serialized behind a global mutex; execution of a
/// local plan is not.
namespace fft {

inline std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

// in-place unitary DFT of an (H,W) complex field; sign -1 forward, +1 inverse
inline void transform_2d(std::vector<std::complex<double>>& field, std::size_t H,
                         std::size_t W, int sign) {
    fftw_complex* buf = reinterpret_cast<fftw_complex*>(field.data());
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lock(planner_mutex());
        plan = fftw_plan_dft_2d(static_cast<int>(H), static_cast<int>(W), buf, buf,
                                sign < 0 ? FFTW_FORWARD : FFTW_BACKWARD, FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard<std::mutex> lock(planner_mutex());
        fftw_destroy_plan(plan);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(H * W));
    for (auto& v : field) v *= scale;
}

inline void forward_2d(std::vector<std::complex<double>>& field, std::size_t H, std::size_t W) {
    transform_2d(field, H, W, -1);
}
inline void inverse_2d(std::vector<std::complex<double>>& field, std::size_t H, std::size_t W) {
    transform_2d(field, H, W, +1);
}

}  // namespace fft

}  // namespace irlsrec
