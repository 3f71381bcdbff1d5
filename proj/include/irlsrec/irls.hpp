#pragma once

#include <cmath>
#include <complex>
#include <memory>
#include <optional>
#include <stdexcept>
#include <vector>

#include "irlsrec/fft.hpp"
#include "irlsrec/krylov.hpp"
#include "irlsrec/linop.hpp"
#include "irlsrec/metrics.hpp"
#include "irlsrec/operators.hpp"
#include "irlsrec/priors.hpp"

namespace irlsrec {

/// One reconstruction problem: degradation operator, observation, noise
/// level, regularization bank and prior, and the proximal constant delta
/// (alpha = delta * sigma_n^2).
struct ProblemSpec {
    LinearOpPtr A;
    Tensor y;
    double sigma_n = 0.01;
    FilterBank G;
    PriorConfig prior;
    double delta = 8e-4;

    double alpha() const { return delta * sigma_n * sigma_n; }

    void validate() const {
        if (!A) throw std::invalid_argument("ProblemSpec: missing operator");
        if (y.shape() != A->output_shape())
            throw std::invalid_argument("ProblemSpec: observation shape mismatch");
        if (!(sigma_n > 0.0)) throw std::invalid_argument("ProblemSpec: sigma_n must be positive");
        if (!(delta > 0.0)) throw std::invalid_argument("ProblemSpec: delta must be positive");
        prior.validate();
    }
};

struct IrlsSettings {
    int max_steps = 400;
    double fp_rtol = 1e-4;
    int consecutive = 3;
    double cg_rtol = 1e-6;
    int cg_maxiter = 150;
    bool precondition = true;
    double descent_tol = 1e-9;

    static IrlsSettings training() { return {}; }
    static IrlsSettings inference() {
        IrlsSettings s;
        s.max_steps = 15;
        s.cg_maxiter = 50;
        return s;
    }

    void validate() const {
        if (max_steps < 1 || consecutive < 1 || cg_maxiter < 1)
            throw std::invalid_argument("IrlsSettings: caps must be >= 1");
        if (!(fp_rtol > 0.0 && fp_rtol < 1.0) || !(cg_rtol > 0.0 && cg_rtol < 1.0))
            throw std::invalid_argument("IrlsSettings: tolerances must be in (0,1)");
    }
};

/// The symmetric normal-equation operator v -> A'Av + p sigma^2 G'W G v
/// + alpha v with its cached right-hand side b = A'y + alpha xk.
struct NormalSystem {
    SymOp op;
    Eigen::VectorXd rhs;
    std::vector<std::size_t> image_shape;
    std::shared_ptr<const WeightField> weights;
};

namespace detail {

inline Tensor tensor_from_vec(const Eigen::VectorXd& v, const std::vector<std::size_t>& shape) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = v[static_cast<Eigen::Index>(i)];
    return t;
}

}  // namespace detail

/// Action of S^k (without the alpha augmentation) on an image.
inline Tensor apply_prior_normal_matrix(const ProblemSpec& spec, const WeightField& W,
                                        const Tensor& x) {
    Tensor out = spec.A->apply_adjoint(spec.A->apply(x));
    const FeatureField f = extract_features(spec.G, x);
    const FeatureField wf = apply_weights(W, f);
    Tensor reg = features_adjoint(spec.G, wf, x.shape());
    reg *= spec.prior.p * spec.sigma_n * spec.sigma_n;
    out += reg;
    return out;
}

inline NormalSystem assemble_normal_system(const ProblemSpec& spec,
                                           std::shared_ptr<const WeightField> W,
                                           const Tensor& xk) {
    NormalSystem sys;
    sys.image_shape = spec.A->input_shape();
    sys.weights = std::move(W);
    const double alpha = spec.alpha();
    const double reg_scale = spec.prior.p * spec.sigma_n * spec.sigma_n;
    const LinearOpPtr A = spec.A;
    const FilterBank G = spec.G;
    auto Wptr = sys.weights;
    const std::vector<std::size_t> shape = sys.image_shape;
    sys.op.dim = static_cast<Eigen::Index>(Tensor::count(shape));
    sys.op.apply = [A, G, Wptr, shape, alpha, reg_scale](const Eigen::VectorXd& v) {
        const Tensor vt = detail::tensor_from_vec(v, shape);
        Tensor out = A->apply_adjoint(A->apply(vt));
        const FeatureField f = extract_features(G, vt);
        Tensor reg = features_adjoint(G, apply_weights(*Wptr, f), shape);
        reg *= reg_scale;
        out += reg;
        Eigen::VectorXd res = out.vec();
        res += alpha * v;
        return res;
    };
    Tensor b = spec.A->apply_adjoint(spec.y);
    sys.rhs = b.vec();
    sys.rhs += alpha * xk.vec();
    return sys;
}

struct IrlsTraceRow {
    int step = 0;
    double fp_residual = 0.0;  // |S^k x^k - A'y| / |A'y|
    double objective = 0.0;
    double psnr_db = std::numeric_limits<double>::quiet_NaN();
    int cg_iters = 0;           // inner iterations spent producing this iterate
    double rel_change = 0.0;    // |x^k - x^{k-1}| / |x^k|
};

struct IrlsState {
    Tensor x;
    int step = 0;
    std::shared_ptr<const WeightField> weights;
    std::vector<double> residual_history;
    std::vector<double> objective_history;
    int consecutive_passes = 0;
    bool converged = false;
    bool descent_flagged = false;
    int last_cg_iters = 0;
};

namespace detail {

// weights and normal system of the current iterate plus its self-consistent
// fixed-point residual |S^k xk - A'y| / |A'y|
struct StepContext {
    std::shared_ptr<const WeightField> weights;
    NormalSystem sys;
    double fp_residual = 0.0;
};

inline StepContext prepare_step(const ProblemSpec& spec, const Tensor& xk, const Tensor& b0,
                                double b0_norm) {
    StepContext ctx;
    const FeatureField f = extract_features(spec.G, xk);
    ctx.weights = std::make_shared<const WeightField>(build_weights(f, spec.prior));
    ctx.sys = assemble_normal_system(spec, ctx.weights, xk);
    Eigen::VectorXd residual =
        ctx.sys.op.apply(xk.vec()) - spec.alpha() * xk.vec() - b0.vec();
    ctx.fp_residual = residual.norm() / b0_norm;
    return ctx;
}

struct SolveOutcome {
    Tensor x_next;
    int cg_iters = 0;
    bool descent_violation = false;
};

// The minimization half of a step. Retries once unpreconditioned on solver
// breakdown and once at 10x tighter tolerance on a descent violation.
inline SolveOutcome solve_step(const ProblemSpec& spec, const StepContext& ctx,
                               const Tensor& xk, const IrlsSettings& settings,
                               double objective_k) {
    auto solve_once = [&](double rtol, bool precondition) {
        if (precondition) {
            const DiagPrecond D = equilibrate(*spec.A, spec.G, *ctx.weights, spec.prior.p,
                                              spec.sigma_n, spec.alpha());
            return pcg_solve(ctx.sys.op, D, ctx.sys.rhs, xk.vec(), rtol, settings.cg_maxiter);
        }
        return cg_solve(ctx.sys.op, ctx.sys.rhs, xk.vec(), rtol, settings.cg_maxiter);
    };

    SolveOutcome out;
    auto [xv, rep] = solve_once(settings.cg_rtol, settings.precondition);
    if (rep.exit_reason.starts_with("breakdown") && settings.precondition) {
        std::tie(xv, rep) = solve_once(settings.cg_rtol, false);
    }
    if (rep.exit_reason.starts_with("breakdown"))
        throw std::runtime_error("mm_step: inner solver breakdown (" + rep.exit_reason + ")");
    out.cg_iters = rep.iterations;

    Tensor x_next = tensor_from_vec(xv, ctx.sys.image_shape);
    double obj_next = objective_eval(*spec.A, spec.y, spec.sigma_n, spec.G, spec.prior, x_next);
    if (obj_next > objective_k + settings.descent_tol) {
        auto [xv2, rep2] = solve_once(settings.cg_rtol * 0.1, settings.precondition);
        const Tensor x_retry = tensor_from_vec(xv2, ctx.sys.image_shape);
        const double obj_retry =
            objective_eval(*spec.A, spec.y, spec.sigma_n, spec.G, spec.prior, x_retry);
        out.cg_iters += rep2.iterations;
        if (obj_retry < obj_next) {
            x_next = x_retry;
            obj_next = obj_retry;
        }
        out.descent_violation = obj_next > objective_k + settings.descent_tol;
    }
    out.x_next = std::move(x_next);
    return out;
}

}  // namespace detail

/// Single IRLS step (Algorithm ordering: features of xk, weights of xk, then
/// the linear solve). Returns the advanced state.
inline IrlsState mm_step(const ProblemSpec& spec, const IrlsState& state,
                         const IrlsSettings& settings) {
    spec.validate();
    settings.validate();
    const Tensor b0 = spec.A->apply_adjoint(spec.y);
    const double b0_norm = std::max(norm2(b0), 1e-300);
    const double obj_k =
        objective_eval(*spec.A, spec.y, spec.sigma_n, spec.G, spec.prior, state.x);
    const detail::StepContext ctx = detail::prepare_step(spec, state.x, b0, b0_norm);
    const detail::SolveOutcome out = detail::solve_step(spec, ctx, state.x, settings, obj_k);

    IrlsState next = state;
    next.x = out.x_next;
    next.step = state.step + 1;
    next.weights = ctx.weights;
    next.residual_history.push_back(ctx.fp_residual);
    if (next.objective_history.empty()) next.objective_history.push_back(obj_k);
    next.objective_history.push_back(
        objective_eval(*spec.A, spec.y, spec.sigma_n, spec.G, spec.prior, next.x));
    next.descent_flagged = state.descent_flagged || out.descent_violation;
    next.consecutive_passes =
        ctx.fp_residual < settings.fp_rtol ? std::min(state.consecutive_passes + 1, 3) : 0;
    next.last_cg_iters = out.cg_iters;
    return next;
}

struct IrlsResult {
    Tensor x;
    IrlsState state;
    std::vector<IrlsTraceRow> trace;
};

/// Runs IRLS until the fixed-point criterion |S^k x^k - A'y|/|A'y| <
/// fp_rtol holds for `consecutive` steps, or until max_steps solves.
inline IrlsResult run_irls(const ProblemSpec& spec, const Tensor& x0,
                           const IrlsSettings& settings,
                           const Tensor* reference = nullptr) {
    spec.validate();
    settings.validate();
    if (x0.shape() != spec.A->input_shape())
        throw std::invalid_argument("run_irls: x0 shape mismatch");

    const Tensor b0 = spec.A->apply_adjoint(spec.y);
    const double b0_norm = std::max(norm2(b0), 1e-300);

    IrlsResult result;
    IrlsState state;
    state.x = x0;
    state.objective_history.push_back(
        objective_eval(*spec.A, spec.y, spec.sigma_n, spec.G, spec.prior, x0));

    Tensor x_prev = x0;
    int consecutive = 0;
    for (int k = 0; k <= settings.max_steps; ++k) {
        const double obj_k = state.objective_history.back();
        IrlsTraceRow row;
        row.step = k;
        row.objective = obj_k;
        row.cg_iters = state.last_cg_iters;
        if (reference) row.psnr_db = psnr(state.x, *reference);
        if (k > 0) {
            const double xn = std::max(norm2(state.x), 1e-300);
            Tensor diff = state.x;
            diff -= x_prev;
            row.rel_change = norm2(diff) / xn;
        }

        const detail::StepContext ctx = detail::prepare_step(spec, state.x, b0, b0_norm);
        row.fp_residual = ctx.fp_residual;
        state.residual_history.push_back(row.fp_residual);
        state.weights = ctx.weights;
        result.trace.push_back(row);

        consecutive = row.fp_residual < settings.fp_rtol ? consecutive + 1 : 0;
        state.consecutive_passes = std::min(consecutive, settings.consecutive);
        if (consecutive >= settings.consecutive) {
            state.converged = true;
            break;
        }
        if (k == settings.max_steps) break;

        const detail::SolveOutcome out = detail::solve_step(spec, ctx, state.x, settings, obj_k);
        x_prev = state.x;
        state.x = out.x_next;
        state.step = k + 1;
        state.last_cg_iters = out.cg_iters;
        state.descent_flagged = state.descent_flagged || out.descent_violation;
        state.objective_history.push_back(
            objective_eval(*spec.A, spec.y, spec.sigma_n, spec.G, spec.prior, state.x));
    }
    result.x = state.x;
    result.state = std::move(state);
    return result;
}

/// Back-projection initializer x0 = A'y (zero-filled inverse transform for
/// the subsampled DFT, mosaic embedding for the CFA).
inline Tensor backproject_init(const LinearOp& A, const Tensor& y) {
    return A.apply_adjoint(y);
}

namespace detail {

struct ConvStructure {
    const ValidConv2D* conv = nullptr;
    const Decimation* decim = nullptr;
};

inline ConvStructure conv_structure(const LinearOp& A) {
    ConvStructure s;
    if (const auto* conv = dynamic_cast<const ValidConv2D*>(&A)) {
        s.conv = conv;
        return s;
    }
    if (const auto* comp = dynamic_cast<const ComposeOp*>(&A)) {
        const auto* outer = dynamic_cast<const Decimation*>(comp->outer().get());
        const auto* inner = dynamic_cast<const ValidConv2D*>(comp->inner().get());
        if (outer && inner) {
            s.conv = inner;
            s.decim = outer;
        }
    }
    return s;
}

}  // namespace detail

/// FFT Wiener initializer with periodic boundary:
///   x0 = Finv[ conj(Khat) F(y_canvas) / (|Khat|^2 + lambda) ],
/// lambda = max(100 sigma_n^2, 1e-4) unless overridden. For conv+decimation
/// the observation is first upsampled (nearest); for non-convolutional
/// operators this falls back to back-projection.
inline Tensor wiener_init(const LinearOp& A, const Tensor& y, double sigma_n,
                          double lambda_override = -1.0) {
    const auto structure = detail::conv_structure(A);
    if (!structure.conv) return backproject_init(A, y);

    const auto image_shape = A.input_shape();
    const std::size_t c = image_shape[0], H = image_shape[1], W = image_shape[2];
    const Tensor& kernel = structure.conv->kernel();
    const std::size_t h = kernel.extent(0), w = kernel.extent(1);
    const std::size_t Ho = H - h + 1, Wo = W - w + 1;
    const std::size_t oy = (h - 1) / 2, ox = (w - 1) / 2;

    // observation on the valid grid (nearest-neighbor upsample for
    // super-resolution, honoring the decimation stride and phase)
    Tensor yv({c, Ho, Wo});
    if (structure.decim) {
        const Tensor& yc = y;
        const std::size_t Hc = yc.extent(1), Wc = yc.extent(2);
        const std::size_t sy = structure.decim->stride_y(), sx = structure.decim->stride_x();
        const std::size_t py = structure.decim->phase_y(), px = structure.decim->phase_x();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j) {
                    const std::size_t ci = std::min(i >= py ? (i - py) / sy : 0, Hc - 1);
                    const std::size_t cj = std::min(j >= px ? (j - px) / sx : 0, Wc - 1);
                    yv.at3(ch, i, j) = yc.at3(ch, ci, cj);
                }
    } else {
        yv = y;
    }

    const double lambda =
        lambda_override >= 0.0 ? lambda_override : std::max(100.0 * sigma_n * sigma_n, 1e-4);

    // kernel spectrum, center tap at the origin
    std::vector<std::complex<double>> khat(H * W, 0.0);
    for (std::size_t a = 0; a < h; ++a)
        for (std::size_t b = 0; b < w; ++b) {
            const std::size_t yy = (a + H - oy) % H, xx = (b + W - ox) % W;
            khat[yy * W + xx] += kernel.at2(a, b);
        }
    fft::forward_2d(khat, H, W);

    const double n = static_cast<double>(H * W);
    Tensor x0({c, H, W});
    std::vector<std::complex<double>> field(H * W);
    for (std::size_t ch = 0; ch < c; ++ch) {
        // edge-replicated canvas at full resolution
        for (std::size_t yy = 0; yy < H; ++yy)
            for (std::size_t xx = 0; xx < W; ++xx) {
                const std::size_t sy =
                    std::min(Ho - 1, static_cast<std::size_t>(std::max<long>(
                                         0, static_cast<long>(yy) - static_cast<long>(oy))));
                const std::size_t sx =
                    std::min(Wo - 1, static_cast<std::size_t>(std::max<long>(
                                         0, static_cast<long>(xx) - static_cast<long>(ox))));
                field[yy * W + xx] = yv.at3(ch, sy, sx);
            }
        fft::forward_2d(field, H, W);
        // observation model in the unitary domain: Yhat = sqrt(n) conj(Ku) Xhat
        for (std::size_t i = 0; i < H * W; ++i) {
            const std::complex<double> hresp = std::sqrt(n) * std::conj(khat[i]);
            field[i] = std::conj(hresp) * field[i] / (std::norm(hresp) + lambda);
        }
        fft::inverse_2d(field, H, W);
        for (std::size_t i = 0; i < H * W; ++i) x0[ch * H * W + i] = field[i].real();
    }
    return x0;
}

}  // namespace irlsrec
