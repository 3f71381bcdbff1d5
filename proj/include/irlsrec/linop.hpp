#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "irlsrec/rng.hpp"
#include "irlsrec/tensor.hpp"

namespace irlsrec {

/// Matrix-free linear operator. Every operator exposes its forward action,
/// its adjoint, and (where an exact rule exists) the operator whose matrix is
/// the elementwise square of this operator's matrix; the latter is what the
/// equilibration preconditioner consumes.
class LinearOp {
public:
    virtual ~LinearOp() = default;

    virtual std::vector<std::size_t> input_shape() const = 0;
    virtual std::vector<std::size_t> output_shape() const = 0;

    virtual Tensor apply(const Tensor& v) const = 0;
    virtual Tensor apply_adjoint(const Tensor& u) const = 0;

    /// Operator realizing the Hadamard (elementwise) square of this
    /// operator's matrix. Throws when no exact rule exists.
    virtual std::shared_ptr<const LinearOp> hadamard_square() const {
        throw std::logic_error("operator lacks a Hadamard-square rule");
    }

    /// True when every matrix row has at most one nonzero entry (selections,
    /// diagonal masks, scalar multiples of identity). For such factors the
    /// Hadamard square distributes over composition.
    virtual bool entrywise() const { return false; }

    std::size_t input_size() const { return Tensor::count(input_shape()); }
    std::size_t output_size() const { return Tensor::count(output_shape()); }

protected:
    void check_input(const Tensor& v) const {
        if (v.shape() != input_shape())
            throw std::invalid_argument("LinearOp: input shape " + shape_string(v.shape()) +
                                        " does not match " + shape_string(input_shape()));
    }
    void check_output(const Tensor& u) const {
        if (u.shape() != output_shape())
            throw std::invalid_argument("LinearOp: output shape " + shape_string(u.shape()) +
                                        " does not match " + shape_string(output_shape()));
    }
};

using LinearOpPtr = std::shared_ptr<const LinearOp>;

inline Tensor apply(const LinearOp& op, const Tensor& v) { return op.apply(v); }
inline Tensor apply_adjoint(const LinearOp& op, const Tensor& u) { return op.apply_adjoint(u); }
inline Tensor apply_square(const LinearOp& op, const Tensor& v) {
    return op.hadamard_square()->apply(v);
}

class IdentityOp final : public LinearOp {
public:
    explicit IdentityOp(std::vector<std::size_t> shape) : shape_(std::move(shape)) {}
    std::vector<std::size_t> input_shape() const override { return shape_; }
    std::vector<std::size_t> output_shape() const override { return shape_; }
    Tensor apply(const Tensor& v) const override {
        check_input(v);
        return v;
    }
    Tensor apply_adjoint(const Tensor& u) const override {
        check_output(u);
        return u;
    }
    std::shared_ptr<const LinearOp> hadamard_square() const override {
        return std::make_shared<IdentityOp>(shape_);
    }
    bool entrywise() const override { return true; }

private:
    std::vector<std::size_t> shape_;
};

class ScaleOp final : public LinearOp {
public:
    ScaleOp(double factor, LinearOpPtr inner) : factor_(factor), inner_(std::move(inner)) {}
    ScaleOp(double factor, std::vector<std::size_t> shape)
        : ScaleOp(factor, std::make_shared<IdentityOp>(std::move(shape))) {}

    std::vector<std::size_t> input_shape() const override { return inner_->input_shape(); }
    std::vector<std::size_t> output_shape() const override { return inner_->output_shape(); }
    Tensor apply(const Tensor& v) const override {
        Tensor out = inner_->apply(v);
        out *= factor_;
        return out;
    }
    Tensor apply_adjoint(const Tensor& u) const override {
        Tensor out = inner_->apply_adjoint(u);
        out *= factor_;
        return out;
    }
    std::shared_ptr<const LinearOp> hadamard_square() const override {
        return std::make_shared<ScaleOp>(factor_ * factor_, inner_->hadamard_square());
    }
    bool entrywise() const override { return inner_->entrywise(); }

private:
    double factor_;
    LinearOpPtr inner_;
};

/// outer(inner(v)); adjoint chains in reverse.
class ComposeOp final : public LinearOp {
public:
    ComposeOp(LinearOpPtr outer, LinearOpPtr inner)
        : outer_(std::move(outer)), inner_(std::move(inner)) {
        if (inner_->output_shape() != outer_->input_shape())
            throw std::invalid_argument("ComposeOp: shapes do not chain");
    }
    std::vector<std::size_t> input_shape() const override { return inner_->input_shape(); }
    std::vector<std::size_t> output_shape() const override { return outer_->output_shape(); }
    Tensor apply(const Tensor& v) const override { return outer_->apply(inner_->apply(v)); }
    Tensor apply_adjoint(const Tensor& u) const override {
        return inner_->apply_adjoint(outer_->apply_adjoint(u));
    }
    // (FG)^{.2} = F^{.2} G^{.2} is exact when either factor has at most one
    // nonzero per row/column pattern of a selection or diagonal scaling.
    std::shared_ptr<const LinearOp> hadamard_square() const override {
        if (!outer_->entrywise() && !inner_->entrywise())
            throw std::logic_error("ComposeOp: no exact Hadamard-square rule for this pair");
        return std::make_shared<ComposeOp>(outer_->hadamard_square(), inner_->hadamard_square());
    }
    bool entrywise() const override { return outer_->entrywise() && inner_->entrywise(); }

    const LinearOpPtr& outer() const { return outer_; }
    const LinearOpPtr& inner() const { return inner_; }

private:
    LinearOpPtr outer_, inner_;
};

class SumOp final : public LinearOp {
public:
    SumOp(LinearOpPtr a, LinearOpPtr b) : a_(std::move(a)), b_(std::move(b)) {
        if (a_->input_shape() != b_->input_shape() || a_->output_shape() != b_->output_shape())
            throw std::invalid_argument("SumOp: operand shapes differ");
    }
    std::vector<std::size_t> input_shape() const override { return a_->input_shape(); }
    std::vector<std::size_t> output_shape() const override { return a_->output_shape(); }
    Tensor apply(const Tensor& v) const override { return a_->apply(v) + b_->apply(v); }
    Tensor apply_adjoint(const Tensor& u) const override {
        return a_->apply_adjoint(u) + b_->apply_adjoint(u);
    }

private:
    LinearOpPtr a_, b_;
};

/// Assembles the dense matrix by probing with unit vectors. Test oracle;
/// refuses instances that would densify beyond 1e7 entries.
inline Eigen::MatrixXd densify(const LinearOp& op) {
    const std::size_t rows = op.output_size(), cols = op.input_size();
    if (rows * cols > 10'000'000) throw std::invalid_argument("densify: size cap exceeded");
    Eigen::MatrixXd M(rows, cols);
    Tensor e(op.input_shape());
    for (std::size_t j = 0; j < cols; ++j) {
        e[j] = 1.0;
        const Tensor col = op.apply(e);
        for (std::size_t i = 0; i < rows; ++i) M(static_cast<Eigen::Index>(i),
                                                 static_cast<Eigen::Index>(j)) = col[i];
        e[j] = 0.0;
    }
    return M;
}

/// Max over random (v,u) pairs of |<Av,u> - <v,A'u>| / (|Av||u| + 1).
inline double adjoint_check(const LinearOp& op, int trials, std::uint64_t seed = 0x5eed) {
    if (trials < 1) throw std::invalid_argument("adjoint_check: trials must be >= 1");
    Rng rng(seed);
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        Tensor v(op.input_shape()), u(op.output_shape());
        for (auto& x : v.values()) x = rng.normal();
        for (auto& x : u.values()) x = rng.normal();
        const Tensor av = op.apply(v);
        const Tensor atu = op.apply_adjoint(u);
        const double lhs = dot(av, u), rhs = dot(v, atu);
        const double denom = norm2(av) * norm2(u) + 1.0;
        worst = std::max(worst, std::abs(lhs - rhs) / denom);
    }
    return worst;
}

}  // namespace irlsrec
