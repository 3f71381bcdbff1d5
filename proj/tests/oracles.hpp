// Test-only oracles, kept independent of the library implementation paths
// they check: a minimal PNG decoder built directly on zlib, a direct
// per-window SSIM, and a dense-matrix textbook IRLS solver for TV objectives.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include <zlib.h>

#include <Eigen/Dense>

#include "irlsrec/rng.hpp"
#include "irlsrec/tensor.hpp"

namespace oracles {

// ---------------------------------------------------------------- mini PNG

struct MiniPng {
    std::size_t width = 0, height = 0, channels = 0;
    int bit_depth = 0;
    std::vector<double> pixels;  // channel-outermost, [0,1]

    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return pixels[(c * height + y) * width + x];
    }
};

namespace detail {

inline std::uint32_t be32(const unsigned char* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

inline std::vector<unsigned char> inflate_all(const std::vector<unsigned char>& in,
                                              std::size_t expected) {
    std::vector<unsigned char> out(expected);
    z_stream zs{};
    if (inflateInit(&zs) != Z_OK) throw std::runtime_error("mini png: inflateInit");
    zs.next_in = const_cast<unsigned char*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = inflate(&zs, Z_FINISH);
    inflateEnd(&zs);
    if (rc != Z_STREAM_END) throw std::runtime_error("mini png: inflate failed");
    return out;
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

/// Decodes a non-interlaced 8/16-bit grayscale or RGB PNG.
inline MiniPng decode_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("mini png: cannot open " + path);
    std::vector<unsigned char> file((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    static const unsigned char sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
        throw std::runtime_error("mini png: bad signature");

    MiniPng png;
    std::vector<unsigned char> idat;
    std::size_t at = 8;
    int color_type = -1;
    while (at + 8 <= file.size()) {
        const std::uint32_t len = detail::be32(&file[at]);
        const std::string type(reinterpret_cast<const char*>(&file[at + 4]), 4);
        const unsigned char* data = &file[at + 8];
        if (type == "IHDR") {
            png.width = detail::be32(data);
            png.height = detail::be32(&data[4]);
            png.bit_depth = data[8];
            color_type = data[9];
            if (data[12] != 0) throw std::runtime_error("mini png: interlaced");
            png.channels = color_type == 2 ? 3 : 1;
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            break;
        }
        at += 12 + len;
    }
    if (color_type != 0 && color_type != 2) throw std::runtime_error("mini png: color type");

    const std::size_t bps = png.bit_depth / 8;
    const std::size_t stride = png.width * png.channels * bps;
    auto raw = detail::inflate_all(idat, (stride + 1) * png.height);

    std::vector<unsigned char> recon(stride * png.height);
    const std::size_t fb = png.channels * bps;  // filter bytes-per-pixel
    for (std::size_t y = 0; y < png.height; ++y) {
        const int filter = raw[y * (stride + 1)];
        const unsigned char* src = &raw[y * (stride + 1) + 1];
        unsigned char* dst = &recon[y * stride];
        const unsigned char* up = y ? &recon[(y - 1) * stride] : nullptr;
        for (std::size_t i = 0; i < stride; ++i) {
            const int a = i >= fb ? dst[i - fb] : 0;
            const int b = up ? up[i] : 0;
            const int c = (up && i >= fb) ? up[i - fb] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw std::runtime_error("mini png: filter");
            }
            dst[i] = static_cast<unsigned char>(v & 0xff);
        }
    }

    const double maxval = png.bit_depth == 8 ? 255.0 : 65535.0;
    png.pixels.resize(png.channels * png.height * png.width);
    for (std::size_t y = 0; y < png.height; ++y)
        for (std::size_t x = 0; x < png.width; ++x)
            for (std::size_t c = 0; c < png.channels; ++c) {
                const unsigned char* p = &recon[y * stride + (x * png.channels + c) * bps];
                const double v = png.bit_depth == 8
                                     ? static_cast<double>(p[0])
                                     : static_cast<double>((p[0] << 8) | p[1]);  // big-endian
                png.pixels[(c * png.height + y) * png.width + x] = v / maxval;
            }
    return png;
}

// ------------------------------------------------------------ direct SSIM

/// Direct per-window SSIM with the standard 11x11 Gaussian window, no
/// separable filtering.
inline double reference_ssim(const irlsrec::Tensor& a, const irlsrec::Tensor& b) {
    const std::size_t C = a.extent(0), H = a.extent(1), W = a.extent(2);
    double win[11][11];
    double wsum = 0.0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            const double dy = i - 5, dx = j - 5;
            win[i][j] = std::exp(-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5));
            wsum += win[i][j];
        }
    for (auto& row : win)
        for (double& v : row) v /= wsum;
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0.0;
    for (std::size_t ch = 0; ch < C; ++ch) {
        double acc = 0.0;
        std::size_t count = 0;
        for (std::size_t y = 0; y + 11 <= H; ++y)
            for (std::size_t x = 0; x + 11 <= W; ++x) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double va = a.at3(ch, y + i, x + j);
                        const double vb = b.at3(ch, y + i, x + j);
                        ma += win[i][j] * va;
                        mb += win[i][j] * vb;
                        saa += win[i][j] * va * va;
                        sbb += win[i][j] * vb * vb;
                        sab += win[i][j] * va * vb;
                    }
                const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
                acc += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
        total += acc / count;
    }
    return total / C;
}

// -------------------------------------------------- dense textbook IRLS-TV

/// Dense difference operator on the shared 2x2 valid grid of an (H,W) image:
/// rows ordered per position (horizontal difference then vertical).
inline Eigen::MatrixXd dense_tv_operator(std::size_t H, std::size_t W) {
    const std::size_t lh = H - 1, lw = W - 1;
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(2 * lh * lw, H * W);
    for (std::size_t y = 0; y < lh; ++y)
        for (std::size_t x = 0; x < lw; ++x) {
            const auto pos = static_cast<Eigen::Index>(y * lw + x);
            G(2 * pos + 0, y * W + x) = -1.0;
            G(2 * pos + 0, y * W + x + 1) = 1.0;
            G(2 * pos + 1, y * W + x) = -1.0;
            G(2 * pos + 1, (y + 1) * W + x) = 1.0;
        }
    return G;
}

struct DenseTvResult {
    Eigen::VectorXd x;
    double objective = 0.0;
};

/// Textbook dense IRLS for grayscale TV deblurring with the smoothed
/// objective |y - Ax|^2 / (2 s^2) + sum sqrt(z^2 + gamma) (anisotropic) or
/// sum sqrt(|grad|^2 + gamma) (isotropic).
inline DenseTvResult dense_irls_tv(const Eigen::MatrixXd& A, const Eigen::VectorXd& y,
                                   double sigma, std::size_t H, std::size_t W, double gamma,
                                   bool isotropic, int iterations = 300) {
    const Eigen::MatrixXd G = dense_tv_operator(H, W);
    const double s2 = sigma * sigma;
    const Eigen::MatrixXd AtA = A.transpose() * A;
    const Eigen::VectorXd Aty = A.transpose() * y;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(H * W));

    const auto objective = [&](const Eigen::VectorXd& v) {
        const Eigen::VectorXd z = G * v;
        double reg = 0.0;
        if (isotropic) {
            for (Eigen::Index i = 0; i < z.size(); i += 2)
                reg += std::sqrt(z[i] * z[i] + z[i + 1] * z[i + 1] + gamma);
        } else {
            for (Eigen::Index i = 0; i < z.size(); ++i) reg += std::sqrt(z[i] * z[i] + gamma);
        }
        return (y - A * v).squaredNorm() / (2.0 * s2) + reg;
    };

    for (int it = 0; it < iterations; ++it) {
        const Eigen::VectorXd z = G * x;
        Eigen::VectorXd wts(z.size());
        if (isotropic) {
            for (Eigen::Index i = 0; i < z.size(); i += 2) {
                const double w = 1.0 / std::sqrt(z[i] * z[i] + z[i + 1] * z[i + 1] + gamma);
                wts[i] = w;
                wts[i + 1] = w;
            }
        } else {
            for (Eigen::Index i = 0; i < z.size(); ++i)
                wts[i] = 1.0 / std::sqrt(z[i] * z[i] + gamma);
        }
        const Eigen::MatrixXd S =
            AtA + s2 * G.transpose() * wts.asDiagonal() * G +
            1e-12 * Eigen::MatrixXd::Identity(AtA.rows(), AtA.cols());
        const Eigen::VectorXd x_new = S.ldlt().solve(Aty);
        if ((x_new - x).norm() <= 1e-12 * std::max(1.0, x.norm())) {
            x = x_new;
            break;
        }
        x = x_new;
    }
    return {x, objective(x)};
}

// ------------------------------------------------------------ random bits

inline irlsrec::Tensor random_tensor(const std::vector<std::size_t>& shape, irlsrec::Rng& rng,
                                     double scale = 1.0) {
    irlsrec::Tensor t(shape);
    for (auto& v : t.values()) v = scale * rng.normal();
    return t;
}

}  // namespace oracles
