#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "irlsrec/linop.hpp"
#include "irlsrec/priors.hpp"

namespace irlsrec {

/// Symmetric matrix-free operator on flat vectors.
struct SymOp {
    Eigen::Index dim = 0;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> apply;
};

struct SolveReport {
    int iterations = 0;
    double rel_residual = 0.0;  // recomputed |b - Mx| / |b| at exit
    bool converged = false;
    std::string exit_reason;
    std::vector<double> residual_history;  // per-iteration recurrence estimates
};

/// Diagonal preconditioner D = diag(d), d > 0.
struct DiagPrecond {
    Eigen::VectorXd d;

    void validate() const {
        for (Eigen::Index i = 0; i < d.size(); ++i)
            if (!(d[i] > 0.0) || !std::isfinite(d[i]))
                throw std::invalid_argument("DiagPrecond: entries must be finite and positive");
    }
    static DiagPrecond identity(Eigen::Index n) {
        DiagPrecond p;
        p.d = Eigen::VectorXd::Ones(n);
        return p;
    }
};

namespace detail {

inline SolveReport finish_report(const SymOp& M, const Eigen::VectorXd& b,
                                 const Eigen::VectorXd& x, double bnorm, double rtol,
                                 int iterations, std::string reason,
                                 std::vector<double> history) {
    SolveReport rep;
    rep.iterations = iterations;
    rep.rel_residual = (b - M.apply(x)).norm() / bnorm;
    rep.converged = rep.rel_residual <= rtol;
    rep.exit_reason = std::move(reason);
    rep.residual_history = std::move(history);
    return rep;
}

}  // namespace detail

/// Conjugate gradients for SPD systems. Stops when the recurrence residual
/// satisfies |r|/|b| <= rtol; the report always carries the recomputed true
/// residual. Breakdown returns the best iterate with a flagged report.
inline std::pair<Eigen::VectorXd, SolveReport> cg_solve(const SymOp& M, const Eigen::VectorXd& b,
                                                        const Eigen::VectorXd& x0, double rtol,
                                                        int maxiter) {
    const double bnorm = b.norm();
    if (bnorm == 0.0) {
        SolveReport rep;
        rep.converged = true;
        rep.exit_reason = "zero right-hand side";
        return {Eigen::VectorXd::Zero(M.dim), rep};
    }
    Eigen::VectorXd x = x0;
    Eigen::VectorXd r = b - M.apply(x);
    std::vector<double> history{r.norm() / bnorm};
    if (history.back() <= rtol)
        return {x, detail::finish_report(M, b, x, bnorm, rtol, 0, "converged at start",
                                         std::move(history))};
    Eigen::VectorXd p = r;
    double rho = r.squaredNorm();
    for (int it = 1; it <= maxiter; ++it) {
        const Eigen::VectorXd q = M.apply(p);
        const double pq = p.dot(q);
        if (!(pq > 0.0) || !std::isfinite(pq))
            return {x, detail::finish_report(M, b, x, bnorm, rtol, it - 1,
                                             "breakdown: nonpositive curvature",
                                             std::move(history))};
        const double alpha = rho / pq;
        x += alpha * p;
        r -= alpha * q;
        const double rel = r.norm() / bnorm;
        history.push_back(rel);
        if (!std::isfinite(rel))
            return {x, detail::finish_report(M, b, x, bnorm, rtol, it, "breakdown: NaN residual",
                                             std::move(history))};
        if (rel <= rtol)
            return {x, detail::finish_report(M, b, x, bnorm, rtol, it, "tolerance reached",
                                             std::move(history))};
        const double rho_new = r.squaredNorm();
        p = r + (rho_new / rho) * p;
        rho = rho_new;
    }
    return {x, detail::finish_report(M, b, x, bnorm, rtol, maxiter, "iteration cap",
                                     std::move(history))};
}

/// Split-form preconditioned CG: runs CG on (D M D) u = D b and returns
/// x = D u. With d = 1 the iterates coincide with plain CG.
inline std::pair<Eigen::VectorXd, SolveReport> pcg_solve(const SymOp& M,
                                                         const DiagPrecond& precond,
                                                         const Eigen::VectorXd& b,
                                                         const Eigen::VectorXd& x0, double rtol,
                                                         int maxiter) {
    precond.validate();
    if (precond.d.size() != M.dim) throw std::invalid_argument("pcg_solve: preconditioner size");
    const Eigen::VectorXd& d = precond.d;
    SymOp scaled{M.dim, [&M, &d](const Eigen::VectorXd& v) -> Eigen::VectorXd {
                     return d.array() * M.apply(d.asDiagonal() * v).array();
                 }};
    const Eigen::VectorXd bs = d.asDiagonal() * b;
    const Eigen::VectorXd u0 = (x0.array() / d.array()).matrix();
    auto [u, rep] = cg_solve(scaled, bs, u0, rtol, maxiter);
    Eigen::VectorXd x = d.asDiagonal() * u;
    const double bnorm = b.norm();
    if (bnorm > 0.0) {
        rep.rel_residual = (b - M.apply(x)).norm() / bnorm;
        rep.converged = rep.rel_residual <= rtol;
    }
    return {std::move(x), std::move(rep)};
}

/// MINRES for symmetric (possibly indefinite) systems, standard Lanczos +
/// Givens recurrences. The residual-norm estimate is non-increasing.
inline std::pair<Eigen::VectorXd, SolveReport> minres_solve(const SymOp& M,
                                                            const Eigen::VectorXd& b,
                                                            const Eigen::VectorXd& x0, double rtol,
                                                            int maxiter) {
    const double bnorm = b.norm();
    if (bnorm == 0.0) {
        SolveReport rep;
        rep.converged = true;
        rep.exit_reason = "zero right-hand side";
        return {Eigen::VectorXd::Zero(M.dim), rep};
    }
    Eigen::VectorXd x = x0;
    Eigen::VectorXd r1 = b - M.apply(x);
    const double beta1 = r1.norm();
    std::vector<double> history{beta1 / bnorm};
    if (history.back() <= rtol)
        return {x, detail::finish_report(M, b, x, bnorm, rtol, 0, "converged at start",
                                         std::move(history))};

    Eigen::VectorXd r2 = r1;
    Eigen::VectorXd w = Eigen::VectorXd::Zero(M.dim);
    Eigen::VectorXd w2 = Eigen::VectorXd::Zero(M.dim);
    double oldb = 0.0, beta = beta1, dbar = 0.0, epsln = 0.0, phibar = beta1;
    double cs = -1.0, sn = 0.0;
    std::string reason = "iteration cap";
    int itn = 0;
    while (itn < maxiter) {
        ++itn;
        const Eigen::VectorXd v = r2 / beta;
        Eigen::VectorXd y = M.apply(v);
        if (itn >= 2) y -= (beta / oldb) * r1;
        const double alfa = v.dot(y);
        y -= (alfa / beta) * r2;
        r1 = r2;
        r2 = y;
        oldb = beta;
        beta = r2.norm();
        if (!std::isfinite(beta)) {
            reason = "breakdown: NaN in Lanczos";
            break;
        }

        const double oldeps = epsln;
        const double delta = cs * dbar + sn * alfa;
        const double gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;

        const double gamma = std::max(std::sqrt(gbar * gbar + beta * beta), 1e-300);
        cs = gbar / gamma;
        sn = beta / gamma;
        const double phi = cs * phibar;
        phibar = sn * phibar;

        const Eigen::VectorXd w1 = w2;
        w2 = w;
        w = (v - oldeps * w1 - delta * w2) / gamma;
        x += phi * w;

        history.push_back(std::abs(phibar) / bnorm);
        if (history.back() <= rtol) {
            reason = "tolerance reached";
            break;
        }
        if (beta / beta1 < 1e-14) {  // Krylov space exhausted
            reason = "Lanczos breakdown (exact solution subspace)";
            break;
        }
    }
    return {x, detail::finish_report(M, b, x, bnorm, rtol, itn, reason, std::move(history))};
}

/// Diagonal equilibration of S = A'A + p sigma^2 G'WG + alpha I built from
/// the squared-column norms of its factor B = [A; sqrt(p) sigma W^{1/2} G;
/// sqrt(alpha) I], computed matrix-free with Hadamard-squared operators:
///   |B_:,j|^2 = (A^{.2})' 1 + p sigma^2 (G^{.2})' ((W^{1/2})^{.2})' 1 + alpha,
/// and d_j = |B_:,j|^{-1}. The preconditioned D S D has a unit diagonal.
inline DiagPrecond equilibrate(const LinearOp& A, const FilterBank& G, const WeightField& W,
                               double p, double sigma_n, double alpha) {
    if (!(alpha > 0.0)) throw std::invalid_argument("equilibrate: alpha must be positive");
    const std::vector<std::size_t> image_shape = A.input_shape();

    Tensor ones_out(A.output_shape());
    for (auto& v : ones_out.values()) v = 1.0;
    const Tensor col_a = A.hadamard_square()->apply_adjoint(ones_out);

    FeatureField wfield;
    wfield.channels = image_shape[0];
    wfield.filters = W.filters;
    wfield.grid_h = W.grid_h;
    wfield.grid_w = W.grid_w;
    if (W.family == PriorFamily::Sparse) {
        // (W^{1/2})^{.2} = W for a diagonal weight field
        wfield.values = W.diag;
    } else {
        const std::size_t c = W.channels, d = c * W.filters;
        wfield.values = Tensor({W.positions, d});
        for (std::size_t i = 0; i < W.positions; ++i) {
            const auto half = W.block_sqrt(i);
            Eigen::VectorXd row_sums = half.array().square().matrix().rowwise().sum();
            for (std::size_t t = 0; t < W.filters; ++t)
                for (std::size_t ch = 0; ch < c; ++ch)
                    wfield.values[i * d + t * c + ch] = row_sums[static_cast<Eigen::Index>(ch)];
        }
    }
    const Tensor col_g = features_adjoint(G.squared(), wfield, image_shape);

    DiagPrecond precond;
    precond.d.resize(static_cast<Eigen::Index>(col_a.size()));
    const double reg_scale = p * sigma_n * sigma_n;
    for (std::size_t j = 0; j < col_a.size(); ++j) {
        const double norm_sq = col_a[j] + reg_scale * col_g[j] + alpha;
        if (!(norm_sq > 0.0))
            throw std::logic_error("equilibrate: nonpositive column norm");
        precond.d[static_cast<Eigen::Index>(j)] = 1.0 / std::sqrt(norm_sq);
    }
    return precond;
}

}  // namespace irlsrec
