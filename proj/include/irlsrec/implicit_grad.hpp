#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "irlsrec/irls.hpp"
#include "irlsrec/krylov.hpp"
#include "irlsrec/priors.hpp"
#include "irlsrec/theta.hpp"

namespace irlsrec {

/// Everything of a reconstruction problem except the learnable parameters.
struct ProblemTemplate {
    LinearOpPtr A;
    Tensor y;
    double sigma_n = 0.01;
    double delta = 8e-4;
    double gamma = 1e-5;

    ProblemSpec instantiate(const ThetaParams& theta) const {
        ProblemSpec spec;
        spec.A = A;
        spec.y = y;
        spec.sigma_n = sigma_n;
        spec.delta = delta;
        spec.G = theta.bank();
        spec.prior = theta.prior(gamma);
        return spec;
    }
};

/// Fixed-point residual map g(x, theta) = S(x,theta) x - A'y with
/// S = A'A + p sigma^2 G'W(Gx)G (the alpha terms cancel at the fixed point).
/// This equals sigma^2 times the objective gradient, so its x-Jacobian is the
/// (scaled) Hessian of J.
inline Tensor residual_g(const ProblemSpec& spec, const Tensor& x) {
    const FeatureField f = extract_features(spec.G, x);
    const WeightField W = build_weights(f, spec.prior);
    Tensor g = apply_prior_normal_matrix(spec, W, x);
    g -= spec.A->apply_adjoint(spec.y);
    return g;
}

struct BackwardSettings {
    double rtol = 1e-2;
    int maxiter = 2000;
};

namespace detail {

// 1 + (p/2) log(z^2+gamma) factor of the p-derivative of w (z^2+g)^{(p-2)/2} z
inline double plog_factor(double s, double p) { return 1.0 + 0.5 * p * std::log(s); }

}  // namespace detail

/// Action of the symmetric Jacobian (d g / d x)' on v. Analytic for the
/// sparse family via the scalar derivative
///   h'(z) = w [ (z^2+g)^{(p-2)/2} + (p-2) z^2 (z^2+g)^{(p-4)/2} ],
/// a centered directional difference of g for the low-rank family.
inline Tensor vjp_x(const ProblemSpec& spec, const Tensor& x, const Tensor& v) {
    if (spec.prior.family == PriorFamily::Sparse) {
        Tensor out = spec.A->apply_adjoint(spec.A->apply(v));
        const FeatureField z = extract_features(spec.G, x);
        FeatureField u = extract_features(spec.G, v);
        const double p = spec.prior.p, gamma = spec.prior.gamma;
        for (std::size_t i = 0; i < z.positions(); ++i) {
            const Eigen::VectorXd w = detail::sparse_weights_at(spec.prior, z, i);
            for (std::size_t j = 0; j < z.dim(); ++j) {
                const double zj = z.values[i * z.dim() + j];
                const double s = zj * zj + gamma;
                const double hp = w[static_cast<Eigen::Index>(j)] *
                                  (std::pow(s, 0.5 * (p - 2.0)) +
                                   (p - 2.0) * zj * zj * std::pow(s, 0.5 * (p - 4.0)));
                u.values[i * u.dim() + j] *= hp;
            }
        }
        Tensor reg = features_adjoint(spec.G, u, x.shape());
        reg *= p * spec.sigma_n * spec.sigma_n;
        out += reg;
        return out;
    }
    // numerical path (desk scale): centered difference of g along v
    const double vn = norm2(v);
    if (vn == 0.0) return Tensor(x.shape());
    const double eps = 1e-6 * (1.0 + norm2(x)) / vn;
    Tensor xp = x, xm = x;
    Tensor step = v;
    step *= eps;
    xp += step;
    xm -= step;
    Tensor diff = residual_g(spec, xp) - residual_g(spec, xm);
    diff *= 1.0 / (2.0 * eps);
    return diff;
}

/// Gradient of <g(x,theta), v> with respect to theta, in raw coordinates.
/// Analytic (product rule through G, G', and W(Gx)) for the sparse family;
/// centered finite differences per raw component for the low-rank family.
inline ThetaGrad vjp_theta(const ProblemTemplate& tmpl, const ThetaParams& theta,
                           const Tensor& x, const Tensor& v) {
    ThetaGrad grad(theta);
    const ProblemSpec spec = tmpl.instantiate(theta);

    if (theta.family == PriorFamily::Sparse) {
        const FeatureField z = extract_features(spec.G, x);
        const FeatureField u = extract_features(spec.G, v);
        const double p = spec.prior.p, gamma = spec.prior.gamma;
        const double s2 = spec.sigma_n * spec.sigma_n;
        const std::size_t c = z.channels, d = z.dim();

        FeatureField dz_field = z;  // multiplies dG x: w h'(z) u
        FeatureField du_field = z;  // multiplies dG v: w h(z)
        Eigen::VectorXd dw = Eigen::VectorXd::Zero(theta.w_raw.size());
        double dp_term = 0.0;
        const Eigen::VectorXd w_mapped = spec.prior.source == WeightSource::Ones
                                             ? Eigen::VectorXd::Ones(z.filters)
                                             : spec.prior.w;
        for (std::size_t i = 0; i < z.positions(); ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                const std::size_t t = j / c;
                const double wj = w_mapped[static_cast<Eigen::Index>(t)];
                const double zj = z.values[i * d + j];
                const double uj = u.values[i * d + j];
                const double s = zj * zj + gamma;
                const double f0 = std::pow(s, 0.5 * (p - 2.0));
                const double f1 = std::pow(s, 0.5 * (p - 4.0));
                const double h = f0 * zj;
                const double hp = f0 + (p - 2.0) * zj * zj * f1;
                dz_field.values[i * d + j] = p * s2 * wj * hp * uj;
                du_field.values[i * d + j] = p * s2 * wj * h;
                if (theta.weights_mode != WeightsMode::FixedOnes)
                    dw[static_cast<Eigen::Index>(t)] += p * s2 * f0 * zj * uj;
                if (theta.p_mode == PMode::LogisticInterval)
                    dp_term += s2 * wj * f0 * zj * uj * detail::plog_factor(s, p);
            }
        }
        grad.d_filters = filter_tap_gradient(spec.G, dz_field, x);
        grad.d_filters += filter_tap_gradient(spec.G, du_field, v);
        grad.d_w_raw = theta.weights_grad_to_raw(dw);
        grad.d_p_raw = dp_term * theta.dp_dpraw();
        return grad;
    }

    // numerical path: centered differences of <g, v> per raw component
    auto inner = [&](const ThetaParams& th) {
        const ProblemSpec s = tmpl.instantiate(th);
        return dot(residual_g(s, x), v);
    };
    auto central = [&](ThetaParams& th, double* slot) {
        const double h = 1e-6 * (1.0 + std::abs(*slot));
        const double orig = *slot;
        *slot = orig + h;
        const double fp = inner(th);
        *slot = orig - h;
        const double fm = inner(th);
        *slot = orig;
        return (fp - fm) / (2.0 * h);
    };
    {
        ThetaParams th = theta;
        for (std::size_t i = 0; i < th.filters.size(); ++i)
            grad.d_filters[i] = central(th, &th.filters[i]);
        if (theta.weights_mode != WeightsMode::FixedOnes)
            for (Eigen::Index j = 0; j < th.w_raw.size(); ++j)
                grad.d_w_raw[j] = central(th, &th.w_raw[j]);
        if (theta.p_mode == PMode::LogisticInterval) grad.d_p_raw = central(th, &th.p_raw);
    }
    return grad;
}

struct GradReport {
    ThetaGrad grad;
    SolveReport adjoint;
    bool has_fd = false;
    ThetaGrad fd;
    double fd_max_rel_err = 0.0;
};

/// Implicit backward pass at the fixed point: solves (dg/dx*) v = dL/dx*
/// (CG when the configured prior keeps J convex, MINRES otherwise) and
/// returns grad_theta L = -vjp_theta(v).
inline GradReport backward_pass(const ProblemTemplate& tmpl, const ThetaParams& theta,
                                const Tensor& x_star, const Tensor& dLdx,
                                const BackwardSettings& settings = {}) {
    const ProblemSpec spec = tmpl.instantiate(theta);
    GradReport report;
    report.grad = ThetaGrad(theta);
    if (norm2(dLdx) == 0.0) {
        report.adjoint.converged = true;
        report.adjoint.exit_reason = "zero loss gradient";
        return report;
    }
    const std::vector<std::size_t> shape = x_star.shape();
    SymOp H{static_cast<Eigen::Index>(x_star.size()), [&](const Eigen::VectorXd& vv) {
                const Tensor vt = detail::tensor_from_vec(vv, shape);
                return vjp_x(spec, x_star, vt).vec().eval();
            }};
    const bool convex = spec.prior.family == PriorFamily::Sparse && spec.prior.p == 1.0;
    const Eigen::VectorXd rhs = dLdx.vec();
    const Eigen::VectorXd v0 = Eigen::VectorXd::Zero(rhs.size());
    auto [v, rep] = convex ? cg_solve(H, rhs, v0, settings.rtol, settings.maxiter)
                           : minres_solve(H, rhs, v0, settings.rtol, settings.maxiter);
    report.adjoint = rep;
    const Tensor vt = detail::tensor_from_vec(v, shape);
    report.grad = vjp_theta(tmpl, theta, x_star, vt);
    report.grad *= -1.0;
    return report;
}

/// Finite-difference oracle: re-runs the IRLS forward pass to convergence for
/// every probe. Central differences with per-component step
/// eps_rel * (1 + |theta_j|). Desk-scale instances only.
inline ThetaGrad fd_gradient(const ProblemTemplate& tmpl, const ThetaParams& theta,
                             const std::function<double(const Tensor&)>& loss,
                             const Tensor& x0, const IrlsSettings& settings,
                             double eps_rel = 1e-5) {
    auto forward_loss = [&](const ThetaParams& th) {
        const ProblemSpec spec = tmpl.instantiate(th);
        const IrlsResult res = run_irls(spec, x0, settings);
        if (!res.state.converged)
            throw std::runtime_error("fd_gradient: forward pass did not converge during a probe");
        return loss(res.x);
    };
    auto central = [&](ThetaParams& th, double* slot) {
        const double h = eps_rel * (1.0 + std::abs(*slot));
        const double orig = *slot;
        *slot = orig + h;
        const double fp = forward_loss(th);
        *slot = orig - h;
        const double fm = forward_loss(th);
        *slot = orig;
        return (fp - fm) / (2.0 * h);
    };
    ThetaGrad grad(theta);
    ThetaParams th = theta;
    for (std::size_t i = 0; i < th.filters.size(); ++i)
        grad.d_filters[i] = central(th, &th.filters[i]);
    if (theta.weights_mode != WeightsMode::FixedOnes)
        for (Eigen::Index j = 0; j < th.w_raw.size(); ++j)
            grad.d_w_raw[j] = central(th, &th.w_raw[j]);
    if (theta.p_mode == PMode::LogisticInterval) grad.d_p_raw = central(th, &th.p_raw);
    return grad;
}

}  // namespace irlsrec
