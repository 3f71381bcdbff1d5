#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "irlsrec/tensor.hpp"

namespace irlsrec {

/// Peak signal-to-noise ratio in dB: 10*log10(peak^2 / MSE).
/// Returns +inf when the inputs are identical.
inline double psnr(const Tensor& x, const Tensor& ref, double peak = 1.0) {
    if (!x.same_shape(ref)) throw std::invalid_argument("psnr: shape mismatch");
    double se = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - ref[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(x.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

namespace detail {

inline std::vector<double> gaussian_window_1d(int radius, double sigma) {
    std::vector<double> w(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        w[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += w[i + radius];
    }
    for (double& v : w) v /= sum;
    return w;
}

// separable valid filtering of a single channel plane (H,W) -> (H-2r, W-2r)
inline std::vector<double> filter_valid(const double* img, std::size_t H, std::size_t W,
                                        const std::vector<double>& win) {
    const std::size_t r = (win.size() - 1) / 2, k = win.size();
    const std::size_t Wo = W - 2 * r, Ho = H - 2 * r;
    std::vector<double> rows(H * Wo), out(Ho * Wo);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < Wo; ++x) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += win[t] * img[y * W + x + t];
            rows[y * Wo + x] = s;
        }
    for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t x = 0; x < Wo; ++x) {
            double s = 0.0;
            for (std::size_t t = 0; t < k; ++t) s += win[t] * rows[(y + t) * Wo + x];
            out[y * Wo + x] = s;
        }
    return out;
}

inline double ssim_plane(const double* a, const double* b, std::size_t H, std::size_t W,
                         double c1, double c2) {
    const auto win = gaussian_window_1d(5, 1.5);  // 11x11 window
    const std::size_t r = 5;
    const std::size_t n = H * W;
    std::vector<double> aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto mu_a = filter_valid(a, H, W, win);
    const auto mu_b = filter_valid(b, H, W, win);
    const auto m_aa = filter_valid(aa.data(), H, W, win);
    const auto m_bb = filter_valid(bb.data(), H, W, win);
    const auto m_ab = filter_valid(ab.data(), H, W, win);

    double acc = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = m_aa[i] - ma * ma;
        const double vb = m_bb[i] - mb * mb;
        const double cov = m_ab[i] - ma * mb;
        const double num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        const double den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        acc += num / den;
    }
    (void)r;
    return acc / static_cast<double>(mu_a.size());
}

}  // namespace detail

/// Structural similarity index with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, unit dynamic range. Multi-channel inputs are scored
/// per channel and averaged.
inline double ssim(const Tensor& x, const Tensor& ref) {
    if (!x.same_shape(ref)) throw std::invalid_argument("ssim: shape mismatch");
    if (x.rank() != 3) throw std::invalid_argument("ssim: tensor must be (c,H,W)");
    const std::size_t c = x.extent(0), H = x.extent(1), W = x.extent(2);
    if (H < 11 || W < 11) throw std::invalid_argument("ssim: image smaller than 11x11 window");
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double acc = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch)
        acc += detail::ssim_plane(x.data() + ch * H * W, ref.data() + ch * H * W, H, W, c1, c2);
    return acc / static_cast<double>(c);
}

}  // namespace irlsrec
