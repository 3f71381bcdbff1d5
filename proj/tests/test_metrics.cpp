#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "irlsrec/metrics.hpp"
#include "irlsrec/rng.hpp"
#include "irlsrec/synth.hpp"
#include "oracles.hpp"

using namespace irlsrec;

TEST_CASE("psnr basics") {
    Tensor a({1, 4, 4}), b({1, 4, 4});
    CHECK(std::isinf(psnr(a, a)));

    // peak 1, MSE 0.01 -> 20 dB
    for (auto& v : b.values()) v = 0.1;
    CHECK(psnr(a, b, 1.0) == doctest::Approx(20.0).epsilon(1e-12));

    CHECK_THROWS_AS(psnr(a, Tensor({1, 2, 2})), std::invalid_argument);
}

TEST_CASE("psnr matches a direct scalar-loop recomputation") {
    Rng rng(1);
    Tensor a({3, 6, 5}), b({3, 6, 5});
    for (auto& v : a.values()) v = rng.uniform();
    for (auto& v : b.values()) v = rng.uniform();
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
    const double expected = 10.0 * std::log10(1.0 / (se / a.size()));
    CHECK(psnr(a, b) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(psnr(a, b) == doctest::Approx(psnr(b, a)).epsilon(1e-15));
}

TEST_CASE("psnr decreases monotonically with the noise level") {
    const Tensor clean = synthetic_image(1, 24, 24, 5);
    double prev = std::numeric_limits<double>::infinity();
    for (int level = 1; level <= 10; ++level) {
        const double sigma = 0.01 * level;
        // average over a few draws to make the trend statistical, not per-draw
        double acc = 0.0;
        for (int rep = 0; rep < 5; ++rep)
            acc += psnr(add_noise(clean, sigma, 100 * level + rep), clean);
        acc /= 5;
        CHECK(acc < prev);
        prev = acc;
    }
}

TEST_CASE("ssim identities") {
    const Tensor img = synthetic_image(1, 16, 16, 2);
    CHECK(ssim(img, img) == doctest::Approx(1.0).epsilon(1e-12));

    Tensor c1({1, 12, 12}), c2({1, 12, 12});
    for (auto& v : c1.values()) v = 0.37;
    for (auto& v : c2.values()) v = 0.37;
    CHECK(ssim(c1, c2) == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_AS(ssim(Tensor({1, 8, 8}), Tensor({1, 8, 8})), std::invalid_argument);
}

TEST_CASE("ssim is symmetric and below one for distinct inputs") {
    const Tensor a = synthetic_image(1, 20, 20, 3);
    Tensor b = a;
    b.at3(0, 10, 10) += 0.2;
    const double s_ab = ssim(a, b), s_ba = ssim(b, a);
    CHECK(s_ab == doctest::Approx(s_ba).epsilon(1e-12));
    CHECK(s_ab < 1.0 - 1e-12);
}

TEST_CASE("ssim matches the independent reference implementation") {
    const Tensor a = synthetic_image(3, 24, 24, 11);
    const Tensor b = add_noise(a, 0.05, 12);
    CHECK(ssim(a, b) == doctest::Approx(oracles::reference_ssim(a, b)).epsilon(1e-6));
    const Tensor g1 = synthetic_image(1, 18, 18, 13);
    const Tensor g2 = add_noise(g1, 0.02, 14);
    CHECK(ssim(g1, g2) == doctest::Approx(oracles::reference_ssim(g1, g2)).epsilon(1e-6));
}
