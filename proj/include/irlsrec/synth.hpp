#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "irlsrec/irls.hpp"
#include "irlsrec/operators.hpp"
#include "irlsrec/priors.hpp"
#include "irlsrec/rng.hpp"

namespace irlsrec {

/// Deterministic piecewise-smooth test image: low-frequency background plus
/// axis-aligned blocks and a disk, channel-correlated for color inputs.
inline Tensor synthetic_image(std::size_t c, std::size_t H, std::size_t W, std::uint64_t seed) {
    Rng rng(seed);
    Tensor img({c, H, W});
    const double fy = 1.0 + rng.uniform(), fx = 1.0 + rng.uniform();
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    Eigen::VectorXd gain(static_cast<Eigen::Index>(c)), offset(static_cast<Eigen::Index>(c));
    for (std::size_t ch = 0; ch < c; ++ch) {
        gain[static_cast<Eigen::Index>(ch)] = 0.7 + 0.3 * rng.uniform();
        offset[static_cast<Eigen::Index>(ch)] = 0.05 * rng.uniform();
    }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double u = static_cast<double>(y) / H, v = static_cast<double>(x) / W;
                img.at3(ch, y, x) =
                    0.35 + 0.15 * std::sin(2.0 * std::numbers::pi * (fy * u + fx * v) + phase);
            }
    // blocks (shared geometry across channels, channel-specific levels)
    const int blocks = 3 + static_cast<int>(rng.integer(3));
    for (int b = 0; b < blocks; ++b) {
        const std::size_t y0 = rng.integer(H - 4), x0 = rng.integer(W - 4);
        const std::size_t bh = 3 + rng.integer(H / 2), bw = 3 + rng.integer(W / 2);
        const double level = rng.uniform(-0.3, 0.45);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = y0; y < std::min(H, y0 + bh); ++y)
                for (std::size_t x = x0; x < std::min(W, x0 + bw); ++x)
                    img.at3(ch, y, x) += level * gain[static_cast<Eigen::Index>(ch)];
    }
    // one disk
    {
        const double cy = rng.uniform(0.25, 0.75) * H, cx = rng.uniform(0.25, 0.75) * W;
        const double rad = rng.uniform(0.12, 0.28) * std::min(H, W);
        const double level = rng.uniform(0.15, 0.4);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) < rad * rad)
                        img.at3(ch, y, x) += level * gain[static_cast<Eigen::Index>(ch)];
    }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < H * W; ++i) {
            double& v = img[ch * H * W + i];
            v = std::clamp(v + offset[static_cast<Eigen::Index>(ch)], 0.0, 1.0);
        }
    return img;
}

inline Tensor gaussian_kernel(std::size_t size, double sigma) {
    Tensor k({size, size});
    const double c = (size - 1) / 2.0;
    double sum = 0.0;
    for (std::size_t a = 0; a < size; ++a)
        for (std::size_t b = 0; b < size; ++b) {
            const double dy = a - c, dx = b - c;
            k.at2(a, b) = std::exp(-0.5 * (dy * dy + dx * dx) / (sigma * sigma));
            sum += k.at2(a, b);
        }
    for (auto& v : k.values()) v /= sum;
    return k;
}

/// Conjugate-symmetric variable-density sampling mask. DC is always kept;
/// keep probability decays with frequency radius until the target fraction
/// of bins is reached.
inline Tensor dft_mask(std::size_t H, std::size_t W, double fraction, std::uint64_t seed) {
    Rng rng(seed);
    Tensor mask({H, W});
    const double r0 = 0.22 * std::min(H, W);
    std::size_t kept = 0;
    const auto want = static_cast<std::size_t>(fraction * H * W);
    for (std::size_t ky = 0; ky < H && kept < want; ++ky)
        for (std::size_t kx = 0; kx < W && kept < want; ++kx) {
            const std::size_t cy = (H - ky) % H, cx = (W - kx) % W;
            if (ky > cy || (ky == cy && kx > cx)) continue;  // handled at the mirror bin
            const bool self = (cy == ky && cx == kx);
            const double wy = std::min<double>(ky, H - ky), wx = std::min<double>(kx, W - kx);
            const double r = std::sqrt(wy * wy + wx * wx);
            const double prob = (ky == 0 && kx == 0) ? 1.0 : std::exp(-0.5 * r * r / (r0 * r0)) + 0.08;
            if (rng.uniform() < prob) {
                mask.at2(ky, kx) = 1.0;
                mask.at2(cy, cx) = 1.0;
                kept += self ? 1 : 2;
            }
        }
    return mask;
}

inline Tensor add_noise(const Tensor& y, double sigma, std::uint64_t seed) {
    Rng rng(seed);
    Tensor out = y;
    for (auto& v : out.values()) v += sigma * rng.normal();
    return out;
}

/// Forward-difference pair (horizontal, vertical) on a shared 2x2 support,
/// the classical TV analysis operator.
inline FilterBank make_gradient_bank() {
    Tensor taps({2, 2, 2});
    taps.at3(0, 0, 0) = -1.0;
    taps.at3(0, 0, 1) = 1.0;
    taps.at3(1, 0, 0) = -1.0;
    taps.at3(1, 1, 0) = 1.0;
    return FilterBank(std::move(taps));
}

/// Gradient pair plus the two diagonal differences on a 2x2 support. Every
/// stencil tap is touched by some filter, so no image pixel escapes the
/// regularizer under valid convolution.
inline FilterBank make_directional_bank() {
    Tensor taps({4, 2, 2});
    const double inv_rt2 = 1.0 / std::sqrt(2.0);
    taps.at3(0, 0, 0) = -1.0;
    taps.at3(0, 0, 1) = 1.0;
    taps.at3(1, 0, 0) = -1.0;
    taps.at3(1, 1, 0) = 1.0;
    taps.at3(2, 0, 0) = -inv_rt2;
    taps.at3(2, 1, 1) = inv_rt2;
    taps.at3(3, 0, 1) = -inv_rt2;
    taps.at3(3, 1, 0) = inv_rt2;
    return FilterBank(std::move(taps));
}

/// Fixed 3x3 analysis bank: first differences, the four diagonal
/// differences through the center, and second differences. Tap coverage is
/// complete, including the stencil corners.
inline FilterBank make_default_bank() {
    Tensor taps({8, 3, 3});
    const double inv_rt2 = 1.0 / std::sqrt(2.0);
    taps.at3(0, 0, 0) = -1.0;  // horizontal difference
    taps.at3(0, 0, 1) = 1.0;
    taps.at3(1, 0, 0) = -1.0;  // vertical difference
    taps.at3(1, 1, 0) = 1.0;
    taps.at3(2, 0, 0) = -inv_rt2;  // diagonals through the center
    taps.at3(2, 1, 1) = inv_rt2;
    taps.at3(3, 0, 2) = -inv_rt2;
    taps.at3(3, 1, 1) = inv_rt2;
    taps.at3(4, 2, 0) = -inv_rt2;
    taps.at3(4, 1, 1) = inv_rt2;
    taps.at3(5, 2, 2) = -inv_rt2;
    taps.at3(5, 1, 1) = inv_rt2;
    taps.at3(6, 1, 0) = 0.5;  // second differences
    taps.at3(6, 1, 1) = -1.0;
    taps.at3(6, 1, 2) = 0.5;
    taps.at3(7, 0, 1) = 0.5;
    taps.at3(7, 1, 1) = -1.0;
    taps.at3(7, 2, 1) = 0.5;
    return FilterBank(std::move(taps));
}

/// Seeded bank of small random taps (training starting point).
inline FilterBank make_random_bank(std::size_t k, std::size_t size, double scale,
                                   std::uint64_t seed) {
    Rng rng(seed);
    Tensor taps({k, size, size});
    for (auto& v : taps.values()) v = scale * rng.normal();
    return FilterBank(std::move(taps));
}

struct Fixture {
    std::string name;
    ProblemSpec spec;
    Tensor clean;
    Tensor x0;
};

/// The four shipped reconstruction fixtures (32x32 unless overridden).
inline Fixture make_fixture(const std::string& name, std::size_t size = 32,
                            std::uint64_t seed = 7) {
    Fixture fx;
    fx.name = name;
    PriorConfig prior;
    prior.source = WeightSource::Ones;
    prior.p = 1.0;
    prior.gamma = 1e-5;

    if (name == "deblur-sparse" || name == "deblur-lowrank") {
        const bool lowrank = name == "deblur-lowrank";
        const std::size_t c = lowrank ? 3 : 1;
        fx.clean = synthetic_image(c, size, size, seed);
        auto conv = std::make_shared<ValidConv2D>(gaussian_kernel(7, 1.4), fx.clean.shape());
        const double sigma = 0.01;
        Tensor y = add_noise(conv->apply(fx.clean), sigma, seed + 1);
        fx.spec.A = conv;
        fx.spec.y = std::move(y);
        fx.spec.sigma_n = sigma;
        fx.spec.G = lowrank ? make_directional_bank() : make_default_bank();
        prior.family = lowrank ? PriorFamily::LowRank : PriorFamily::Sparse;
        fx.spec.prior = prior;
        fx.x0 = wiener_init(*fx.spec.A, fx.spec.y, sigma);
    } else if (name == "demosaick-lowrank") {
        fx.clean = synthetic_image(3, size, size, seed + 2);
        auto cfa = std::make_shared<CFAMask>(size, size);
        const double sigma = 0.02;
        Tensor y = add_noise(cfa->apply(fx.clean), sigma, seed + 3);
        y = cfa->apply(y);  // noise only on observed sites
        fx.spec.A = cfa;
        fx.spec.y = std::move(y);
        fx.spec.sigma_n = sigma;
        fx.spec.G = make_directional_bank();
        prior.family = PriorFamily::LowRank;
        fx.spec.prior = prior;
        fx.x0 = backproject_init(*fx.spec.A, fx.spec.y);
    } else if (name == "fourier-sparse") {
        fx.clean = synthetic_image(1, size, size, seed + 4);
        auto dft = make_subsampled_dft(dft_mask(size, size, 0.42, seed + 5));
        const double sigma = 0.01;
        Tensor y = add_noise(dft->apply(fx.clean), sigma, seed + 6);
        fx.spec.A = dft;
        fx.spec.y = std::move(y);
        fx.spec.sigma_n = sigma;
        fx.spec.G = make_default_bank();
        prior.family = PriorFamily::Sparse;
        fx.spec.prior = prior;
        fx.x0 = backproject_init(*fx.spec.A, fx.spec.y);
    } else {
        throw std::invalid_argument("make_fixture: unknown fixture " + name);
    }
    return fx;
}

}  // namespace irlsrec
