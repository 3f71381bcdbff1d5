#pragma once

#include <complex>
#include <memory>
#include <stdexcept>
#include <vector>

#include "irlsrec/fft.hpp"
#include "irlsrec/linop.hpp"
#include "irlsrec/tensor.hpp"

namespace irlsrec {

/// Valid 2D cross-correlation with a single (h,w) kernel shared across
/// channels: (c,H,W) -> (c,H-h+1,W-w+1). The adjoint is the zero-padded full
/// correlation with the flipped kernel.
class ValidConv2D final : public LinearOp {
public:
    ValidConv2D(Tensor kernel, std::vector<std::size_t> image_shape)
        : kernel_(std::move(kernel)), in_(std::move(image_shape)) {
        if (kernel_.rank() != 2) throw std::invalid_argument("ValidConv2D: kernel must be (h,w)");
        if (in_.size() != 3) throw std::invalid_argument("ValidConv2D: image shape must be (c,H,W)");
        if (in_[1] < kernel_.extent(0) || in_[2] < kernel_.extent(1))
            throw std::invalid_argument("ValidConv2D: image smaller than kernel");
    }

    std::vector<std::size_t> input_shape() const override { return in_; }
    std::vector<std::size_t> output_shape() const override {
        return {in_[0], in_[1] - kernel_.extent(0) + 1, in_[2] - kernel_.extent(1) + 1};
    }

    Tensor apply(const Tensor& v) const override {
        check_input(v);
        const std::size_t h = kernel_.extent(0), w = kernel_.extent(1);
        Tensor out(output_shape());
        const std::size_t Ho = out.extent(1), Wo = out.extent(2);
        for (std::size_t ch = 0; ch < in_[0]; ++ch)
            for (std::size_t y = 0; y < Ho; ++y)
                for (std::size_t x = 0; x < Wo; ++x) {
                    double s = 0.0;
                    for (std::size_t a = 0; a < h; ++a)
                        for (std::size_t b = 0; b < w; ++b)
                            s += kernel_.at2(a, b) * v.at3(ch, y + a, x + b);
                    out.at3(ch, y, x) = s;
                }
        return out;
    }

    Tensor apply_adjoint(const Tensor& u) const override {
        check_output(u);
        const std::size_t h = kernel_.extent(0), w = kernel_.extent(1);
        const std::size_t Ho = u.extent(1), Wo = u.extent(2);
        Tensor out(in_);
        for (std::size_t ch = 0; ch < in_[0]; ++ch)
            for (std::size_t y = 0; y < Ho; ++y)
                for (std::size_t x = 0; x < Wo; ++x) {
                    const double val = u.at3(ch, y, x);
                    for (std::size_t a = 0; a < h; ++a)
                        for (std::size_t b = 0; b < w; ++b)
                            out.at3(ch, y + a, x + b) += kernel_.at2(a, b) * val;
                }
        return out;
    }

    std::shared_ptr<const LinearOp> hadamard_square() const override {
        Tensor k2 = kernel_;
        for (auto& v : k2.values()) v *= v;
        return std::make_shared<ValidConv2D>(std::move(k2), in_);
    }

    const Tensor& kernel() const { return kernel_; }

private:
    Tensor kernel_;
    std::vector<std::size_t> in_;
};

/// Keeps every stride-th sample per axis starting at the phase offset; the
/// adjoint re-inserts zeros at the skipped positions.
class Decimation final : public LinearOp {
public:
    Decimation(std::vector<std::size_t> image_shape, std::size_t stride_y, std::size_t stride_x,
               std::size_t phase_y = 0, std::size_t phase_x = 0)
        : in_(std::move(image_shape)), sy_(stride_y), sx_(stride_x), py_(phase_y), px_(phase_x) {
        if (in_.size() != 3) throw std::invalid_argument("Decimation: image shape must be (c,H,W)");
        if (sy_ == 0 || sx_ == 0) throw std::invalid_argument("Decimation: zero stride");
        if (py_ >= in_[1] || px_ >= in_[2])
            throw std::invalid_argument("Decimation: phase outside image");
    }

    std::vector<std::size_t> input_shape() const override { return in_; }
    std::vector<std::size_t> output_shape() const override {
        return {in_[0], (in_[1] - py_ + sy_ - 1) / sy_, (in_[2] - px_ + sx_ - 1) / sx_};
    }

    Tensor apply(const Tensor& v) const override {
        check_input(v);
        Tensor out(output_shape());
        for (std::size_t ch = 0; ch < in_[0]; ++ch)
            for (std::size_t i = 0; i < out.extent(1); ++i)
                for (std::size_t j = 0; j < out.extent(2); ++j)
                    out.at3(ch, i, j) = v.at3(ch, py_ + i * sy_, px_ + j * sx_);
        return out;
    }

    Tensor apply_adjoint(const Tensor& u) const override {
        check_output(u);
        Tensor out(in_);
        for (std::size_t ch = 0; ch < in_[0]; ++ch)
            for (std::size_t i = 0; i < u.extent(1); ++i)
                for (std::size_t j = 0; j < u.extent(2); ++j)
                    out.at3(ch, py_ + i * sy_, px_ + j * sx_) = u.at3(ch, i, j);
        return out;
    }

    std::shared_ptr<const LinearOp> hadamard_square() const override {
        return std::make_shared<Decimation>(in_, sy_, sx_, py_, px_);
    }
    bool entrywise() const override { return true; }

    std::size_t stride_y() const { return sy_; }
    std::size_t stride_x() const { return sx_; }
    std::size_t phase_y() const { return py_; }
    std::size_t phase_x() const { return px_; }

private:
    std::vector<std::size_t> in_;
    std::size_t sy_, sx_, py_, px_;
};

/// RGGB Bayer sampling as a binary diagonal operator on the (3,H,W) stack:
/// each pixel keeps exactly the channel its CFA site observes.
class CFAMask final : public LinearOp {
public:
    CFAMask(std::size_t height, std::size_t width) : H_(height), W_(width) {
        if (H_ < 2 || W_ < 2) throw std::invalid_argument("CFAMask: image too small");
    }

    // RGGB: channel observed at pixel (y,x)
    static std::size_t bayer_channel(std::size_t y, std::size_t x) {
        const bool oy = y % 2, ox = x % 2;
        if (!oy && !ox) return 0;  // R
        if (oy && ox) return 2;    // B
        return 1;                  // G
    }

    std::vector<std::size_t> input_shape() const override { return {3, H_, W_}; }
    std::vector<std::size_t> output_shape() const override { return {3, H_, W_}; }

    Tensor apply(const Tensor& v) const override {
        check_input(v);
        Tensor out({3, H_, W_});
        for (std::size_t y = 0; y < H_; ++y)
            for (std::size_t x = 0; x < W_; ++x) {
                const std::size_t ch = bayer_channel(y, x);
                out.at3(ch, y, x) = v.at3(ch, y, x);
            }
        return out;
    }

    Tensor apply_adjoint(const Tensor& u) const override { return apply(u); }

    // binary diagonal, so A^{.2} = A
    std::shared_ptr<const LinearOp> hadamard_square() const override {
        return std::make_shared<CFAMask>(H_, W_);
    }
    bool entrywise() const override { return true; }

private:
    std::size_t H_, W_;
};

namespace detail {

// Layout of the real representation of a conjugate-symmetric frequency mask:
// each self-conjugate bin yields one output row, each {k,-k} pair (walked at
// its lexicographically first member) yields a cosine and a sine row.
struct DftMaskLayout {
    std::size_t H = 0, W = 0;
    std::size_t m = 0;  // number of masked bins = number of real outputs
    struct Entry {
        std::size_t ky, kx;
        bool self_conjugate;
    };
    std::vector<Entry> entries;

    static DftMaskLayout build(const Tensor& mask) {
        if (mask.rank() != 2) throw std::invalid_argument("DFT mask must be (H,W)");
        DftMaskLayout lay;
        lay.H = mask.extent(0);
        lay.W = mask.extent(1);
        for (std::size_t ky = 0; ky < lay.H; ++ky)
            for (std::size_t kx = 0; kx < lay.W; ++kx) {
                const double v = mask.at2(ky, kx);
                if (v != 0.0 && v != 1.0)
                    throw std::invalid_argument("DFT mask must be binary");
                const std::size_t cy = (lay.H - ky) % lay.H, cx = (lay.W - kx) % lay.W;
                if (v != mask.at2(cy, cx))
                    throw std::invalid_argument("DFT mask is not conjugate-symmetric");
                if (v == 0.0) continue;
                ++lay.m;
                const bool self = (cy == ky && cx == kx);
                const bool representative = self || (ky < cy || (ky == cy && kx < cx));
                if (representative) lay.entries.push_back({ky, kx, self});
            }
        return lay;
    }
};

}  // namespace detail

/// Orthonormal DFT restricted to a conjugate-symmetric binary frequency mask,
/// exposed as a real-to-real operator: (1,H,W) -> (m,) with m masked bins.
/// Rows are orthonormal (A A' = I) and every column has squared norm m/n.
class SubsampledDFT final : public LinearOp {
public:
    explicit SubsampledDFT(const Tensor& mask) : lay_(detail::DftMaskLayout::build(mask)) {}

    std::vector<std::size_t> input_shape() const override { return {1, lay_.H, lay_.W}; }
    std::vector<std::size_t> output_shape() const override { return {lay_.m}; }

    std::size_t sampled_bins() const { return lay_.m; }

    Tensor apply(const Tensor& v) const override {
        check_input(v);
        std::vector<std::complex<double>> field(lay_.H * lay_.W);
        for (std::size_t i = 0; i < field.size(); ++i) field[i] = v[i];
        fft::forward_2d(field, lay_.H, lay_.W);
        Tensor out({lay_.m});
        std::size_t r = 0;
        const double rt2 = std::sqrt(2.0);
        for (const auto& e : lay_.entries) {
            const std::complex<double> c = field[e.ky * lay_.W + e.kx];
            if (e.self_conjugate) {
                out[r++] = c.real();
            } else {
                out[r++] = rt2 * c.real();
                out[r++] = rt2 * c.imag();
            }
        }
        return out;
    }

    Tensor apply_adjoint(const Tensor& u) const override {
        check_output(u);
        std::vector<std::complex<double>> field(lay_.H * lay_.W, 0.0);
        std::size_t r = 0;
        const double rt2 = std::sqrt(2.0);
        for (const auto& e : lay_.entries) {
            if (e.self_conjugate) {
                field[e.ky * lay_.W + e.kx] = u[r++];
            } else {
                const double re = u[r++], im = u[r++];
                field[e.ky * lay_.W + e.kx] = std::complex<double>(rt2 * re, rt2 * im);
            }
        }
        fft::inverse_2d(field, lay_.H, lay_.W);
        Tensor out({1, lay_.H, lay_.W});
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = field[i].real();
        return out;
    }

    std::shared_ptr<const LinearOp> hadamard_square() const override;

private:
    friend class SquaredSubsampledDFT;
    detail::DftMaskLayout lay_;
};

/// Hadamard square of SubsampledDFT. Row squares are (1 +- cos(2w))-type
/// fields, so both directions reduce to one FFT at doubled frequencies.
class SquaredSubsampledDFT final : public LinearOp {
public:
    explicit SquaredSubsampledDFT(detail::DftMaskLayout lay) : lay_(std::move(lay)) {}

    std::vector<std::size_t> input_shape() const override { return {1, lay_.H, lay_.W}; }
    std::vector<std::size_t> output_shape() const override { return {lay_.m}; }

    Tensor apply(const Tensor& v) const override {
        check_input(v);
        const double n = static_cast<double>(lay_.H * lay_.W);
        const double rtn = std::sqrt(n);
        double sum = 0.0;
        for (double x : v.values()) sum += x;
        std::vector<std::complex<double>> field(lay_.H * lay_.W);
        for (std::size_t i = 0; i < field.size(); ++i) field[i] = v[i];
        fft::forward_2d(field, lay_.H, lay_.W);
        Tensor out({lay_.m});
        std::size_t r = 0;
        for (const auto& e : lay_.entries) {
            const std::size_t dy = (2 * e.ky) % lay_.H, dx = (2 * e.kx) % lay_.W;
            const double c2 = rtn * field[dy * lay_.W + dx].real();
            if (e.self_conjugate) {
                out[r++] = (sum + c2) / (2.0 * n);
            } else {
                out[r++] = (sum + c2) / n;
                out[r++] = (sum - c2) / n;
            }
        }
        return out;
    }

    Tensor apply_adjoint(const Tensor& u) const override {
        check_output(u);
        const double n = static_cast<double>(lay_.H * lay_.W);
        const double rtn = std::sqrt(n);
        double constant = 0.0;
        std::vector<std::complex<double>> spectrum(lay_.H * lay_.W, 0.0);
        std::size_t r = 0;
        for (const auto& e : lay_.entries) {
            const std::size_t dy = (2 * e.ky) % lay_.H, dx = (2 * e.kx) % lay_.W;
            if (e.self_conjugate) {
                const double uk = u[r++];
                constant += uk / (2.0 * n);
                spectrum[dy * lay_.W + dx] += uk / (2.0 * n);
            } else {
                const double ur = u[r++], ui = u[r++];
                constant += (ur + ui) / n;
                spectrum[dy * lay_.W + dx] += (ur - ui) / n;
            }
        }
        fft::inverse_2d(spectrum, lay_.H, lay_.W);
        Tensor out({1, lay_.H, lay_.W});
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = constant + rtn * spectrum[i].real();
        return out;
    }

private:
    detail::DftMaskLayout lay_;
};

inline std::shared_ptr<const LinearOp> SubsampledDFT::hadamard_square() const {
    return std::make_shared<SquaredSubsampledDFT>(lay_);
}

/// Mask loader: validates binary values and conjugate symmetry.
inline std::shared_ptr<SubsampledDFT> make_subsampled_dft(const Tensor& mask) {
    return std::make_shared<SubsampledDFT>(mask);
}

}  // namespace irlsrec
