#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "irlsrec/linop.hpp"
#include "irlsrec/tensor.hpp"

namespace irlsrec {

/// Convolutional regularization filter bank: (k,h,w) taps shared across image
/// channels, applied as valid cross-correlation. For an image (c,H,W) it
/// produces per-position features of dimension d = k*c on the interior grid
/// of l = (H-h+1)*(W-w+1) positions.
struct FilterBank {
    Tensor filters;  // (k,h,w)

    FilterBank() = default;
    explicit FilterBank(Tensor taps) : filters(std::move(taps)) {
        if (filters.rank() != 3) throw std::invalid_argument("FilterBank: taps must be (k,h,w)");
        if (filters.extent(0) < 1 || filters.extent(1) < 1 || filters.extent(2) < 1)
            throw std::invalid_argument("FilterBank: need k,h,w >= 1");
    }

    std::size_t count() const { return filters.extent(0); }
    std::size_t fh() const { return filters.extent(1); }
    std::size_t fw() const { return filters.extent(2); }

    FilterBank squared() const {
        Tensor t = filters;
        for (auto& v : t.values()) v *= v;
        FilterBank g;
        g.filters = std::move(t);
        return g;
    }
};

enum class PriorFamily { Sparse, LowRank };
enum class WeightSource { Ones, PerFilter, External };

/// Prior family and parameters {w, p, gamma}. For the low-rank family the
/// weight vector lives on singular-value indices (r = min(c,q) entries,
/// nondecreasing); for the sparse family on filter indices (k entries,
/// broadcast across channels).
struct PriorConfig {
    PriorFamily family = PriorFamily::Sparse;
    double p = 1.0;
    double gamma = 1e-5;
    WeightSource source = WeightSource::Ones;
    Eigen::VectorXd w;  // PerFilter source
    Tensor external;    // External source: (l,d) sparse / (l,r) low-rank

    void validate() const {
        if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("PriorConfig: p must be in (0,1]");
        if (!(gamma > 0.0)) throw std::invalid_argument("PriorConfig: gamma must be positive");
        if (source == WeightSource::PerFilter) {
            if ((w.array() < 0.0).any())
                throw std::invalid_argument("PriorConfig: weights must be nonnegative");
            if (family == PriorFamily::LowRank)
                for (Eigen::Index j = 1; j < w.size(); ++j)
                    if (w[j] < w[j - 1])
                        throw std::invalid_argument("PriorConfig: low-rank weights must be nondecreasing");
        }
    }
};

/// Per-position transform-domain features. values is (l,d) with d = k*c;
/// entry (i, t*c + ch) is the response of filter t on channel ch. Read as a
/// column-major (c,q) matrix per position for the low-rank family.
struct FeatureField {
    Tensor values;
    std::size_t channels = 0, filters = 0, grid_h = 0, grid_w = 0;

    std::size_t positions() const { return grid_h * grid_w; }
    std::size_t dim() const { return channels * filters; }

    Eigen::Map<const Eigen::MatrixXd> block(std::size_t i) const {
        return {values.data() + i * dim(), static_cast<Eigen::Index>(channels),
                static_cast<Eigen::Index>(filters)};
    }
    Eigen::Map<Eigen::MatrixXd> block(std::size_t i) {
        return {values.data() + i * dim(), static_cast<Eigen::Index>(channels),
                static_cast<Eigen::Index>(filters)};
    }
};

/// IRLS weights: diagonal entries (l,d) for the sparse family, symmetric PSD
/// blocks (l,c,c) plus their symmetric square roots for the low-rank family.
struct WeightField {
    PriorFamily family = PriorFamily::Sparse;
    Tensor diag;         // sparse: (l,d)
    Tensor blocks;       // low-rank: (l,c,c)
    Tensor blocks_sqrt;  // low-rank: (l,c,c)
    std::size_t positions = 0, channels = 0, filters = 0, grid_h = 0, grid_w = 0;

    Eigen::Map<const Eigen::MatrixXd> block(std::size_t i) const {
        return {blocks.data() + i * channels * channels,
                static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(channels)};
    }
    Eigen::Map<const Eigen::MatrixXd> block_sqrt(std::size_t i) const {
        return {blocks_sqrt.data() + i * channels * channels,
                static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(channels)};
    }
};

inline FeatureField extract_features(const FilterBank& G, const Tensor& x) {
    if (x.rank() != 3) throw std::invalid_argument("extract_features: image must be (c,H,W)");
    const std::size_t c = x.extent(0), H = x.extent(1), W = x.extent(2);
    const std::size_t k = G.count(), h = G.fh(), w = G.fw();
    if (H < h || W < w) throw std::invalid_argument("extract_features: image smaller than filters");
    FeatureField f;
    f.channels = c;
    f.filters = k;
    f.grid_h = H - h + 1;
    f.grid_w = W - w + 1;
    f.values = Tensor({f.positions(), f.dim()});
    for (std::size_t t = 0; t < k; ++t)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < f.grid_h; ++y)
                for (std::size_t xx = 0; xx < f.grid_w; ++xx) {
                    double s = 0.0;
                    for (std::size_t a = 0; a < h; ++a)
                        for (std::size_t b = 0; b < w; ++b)
                            s += G.filters.at3(t, a, b) * x.at3(ch, y + a, xx + b);
                    f.values[(y * f.grid_w + xx) * f.dim() + t * c + ch] = s;
                }
    return f;
}

inline Tensor features_adjoint(const FilterBank& G, const FeatureField& f,
                               const std::vector<std::size_t>& image_shape) {
    const std::size_t c = image_shape[0];
    const std::size_t k = G.count(), h = G.fh(), w = G.fw();
    if (c != f.channels || k != f.filters)
        throw std::invalid_argument("features_adjoint: field/bank mismatch");
    if (image_shape[1] != f.grid_h + h - 1 || image_shape[2] != f.grid_w + w - 1)
        throw std::invalid_argument("features_adjoint: image shape mismatch");
    Tensor out(image_shape);
    for (std::size_t t = 0; t < k; ++t)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < f.grid_h; ++y)
                for (std::size_t xx = 0; xx < f.grid_w; ++xx) {
                    const double val = f.values[(y * f.grid_w + xx) * f.dim() + t * c + ch];
                    if (val == 0.0) continue;
                    for (std::size_t a = 0; a < h; ++a)
                        for (std::size_t b = 0; b < w; ++b)
                            out.at3(ch, y + a, xx + b) += G.filters.at3(t, a, b) * val;
                }
    return out;
}

/// Tap gradient of <field, extract_features(G, x)> with respect to the bank:
/// the cross-correlation between x and the output-side field. Used by the
/// backward pass.
inline Tensor filter_tap_gradient(const FilterBank& G, const FeatureField& field,
                                  const Tensor& x) {
    const std::size_t c = x.extent(0);
    Tensor grad({G.count(), G.fh(), G.fw()});
    for (std::size_t t = 0; t < G.count(); ++t)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < field.grid_h; ++y)
                for (std::size_t xx = 0; xx < field.grid_w; ++xx) {
                    const double val =
                        field.values[(y * field.grid_w + xx) * field.dim() + t * c + ch];
                    if (val == 0.0) continue;
                    for (std::size_t a = 0; a < G.fh(); ++a)
                        for (std::size_t b = 0; b < G.fw(); ++b)
                            grad.at3(t, a, b) += val * x.at3(ch, y + a, xx + b);
                }
    return grad;
}

/// Weighted smooth l_p^p potential: sum_j w_j (z_j^2 + gamma)^{p/2}.
inline double phi_sparse(const Eigen::VectorXd& z, const Eigen::VectorXd& w, double p,
                         double gamma) {
    if (!(p > 0.0 && p <= 2.0)) throw std::invalid_argument("phi_sparse: p must be in (0,2]");
    if (gamma < 0.0) throw std::invalid_argument("phi_sparse: gamma must be nonnegative");
    if (z.size() != w.size()) throw std::invalid_argument("phi_sparse: size mismatch");
    double acc = 0.0;
    for (Eigen::Index j = 0; j < z.size(); ++j)
        acc += w[j] * std::pow(z[j] * z[j] + gamma, 0.5 * p);
    return acc;
}

/// Weighted smooth Schatten-S_p^p potential: sum_j w_j (sigma_j^2 + gamma)^{p/2}
/// with singular values sorted decreasing and weights sorted increasing.
inline double phi_lowrank(const Eigen::MatrixXd& Z, const Eigen::VectorXd& w, double p,
                          double gamma) {
    if (!(p > 0.0 && p <= 2.0)) throw std::invalid_argument("phi_lowrank: p must be in (0,2]");
    if (gamma < 0.0) throw std::invalid_argument("phi_lowrank: gamma must be nonnegative");
    const Eigen::Index r = std::min(Z.rows(), Z.cols());
    if (w.size() != r) throw std::invalid_argument("phi_lowrank: weight size must be min(m,n)");
    for (Eigen::Index j = 1; j < r; ++j)
        if (w[j] < w[j - 1]) throw std::invalid_argument("phi_lowrank: weights must be nondecreasing");
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Z);
    const Eigen::VectorXd sigma = svd.singularValues();  // decreasing
    double acc = 0.0;
    for (Eigen::Index j = 0; j < r; ++j)
        acc += w[j] * std::pow(sigma[j] * sigma[j] + gamma, 0.5 * p);
    return acc;
}

namespace detail {

// per-position weight vector for the sparse family (length d = k*c)
inline Eigen::VectorXd sparse_weights_at(const PriorConfig& cfg, const FeatureField& f,
                                         std::size_t i) {
    const std::size_t d = f.dim(), c = f.channels;
    Eigen::VectorXd w(d);
    switch (cfg.source) {
        case WeightSource::Ones:
            w.setOnes();
            break;
        case WeightSource::PerFilter:
            if (static_cast<std::size_t>(cfg.w.size()) != f.filters)
                throw std::invalid_argument("prior weights: need one entry per filter");
            for (std::size_t j = 0; j < d; ++j) w[j] = cfg.w[j / c];
            break;
        case WeightSource::External:
            if (cfg.external.shape() != std::vector<std::size_t>{f.positions(), d})
                throw std::invalid_argument("prior weights: external field shape mismatch");
            for (std::size_t j = 0; j < d; ++j) w[j] = cfg.external[i * d + j];
            break;
    }
    return w;
}

// per-position weight vector for the low-rank family (length r = channels)
inline Eigen::VectorXd lowrank_weights_at(const PriorConfig& cfg, const FeatureField& f,
                                          std::size_t i) {
    const std::size_t r = std::min(f.channels, f.filters);
    Eigen::VectorXd w(r);
    switch (cfg.source) {
        case WeightSource::Ones:
            w.setOnes();
            break;
        case WeightSource::PerFilter:
            if (static_cast<std::size_t>(cfg.w.size()) != r)
                throw std::invalid_argument("prior weights: need one entry per singular value");
            w = cfg.w;
            break;
        case WeightSource::External:
            if (cfg.external.shape() != std::vector<std::size_t>{f.positions(), r})
                throw std::invalid_argument("prior weights: external field shape mismatch");
            for (std::size_t j = 0; j < r; ++j) w[j] = cfg.external[i * r + j];
            for (std::size_t j = 1; j < r; ++j)
                if (w[j] < w[j - 1])
                    throw std::invalid_argument("prior weights: external low-rank row not sorted");
            break;
    }
    return w;
}

}  // namespace detail

/// R(x) = sum over positions of the per-position potential.
inline double regularizer_eval(const FilterBank& G, const PriorConfig& cfg, const Tensor& x) {
    const FeatureField f = extract_features(G, x);
    double acc = 0.0;
    if (cfg.family == PriorFamily::Sparse) {
        for (std::size_t i = 0; i < f.positions(); ++i) {
            const Eigen::VectorXd w = detail::sparse_weights_at(cfg, f, i);
            Eigen::Map<const Eigen::VectorXd> z(f.values.data() + i * f.dim(),
                                                static_cast<Eigen::Index>(f.dim()));
            acc += phi_sparse(z, w, cfg.p, cfg.gamma);
        }
    } else {
        for (std::size_t i = 0; i < f.positions(); ++i) {
            const Eigen::VectorXd w = detail::lowrank_weights_at(cfg, f, i);
            acc += phi_lowrank(f.block(i), w, cfg.p, cfg.gamma);
        }
    }
    return acc;
}

/// J(x) = |y - Ax|^2 / (2 sigma_n^2) + R(x).
inline double objective_eval(const LinearOp& A, const Tensor& y, double sigma_n,
                             const FilterBank& G, const PriorConfig& cfg, const Tensor& x) {
    if (!(sigma_n > 0.0)) throw std::invalid_argument("objective_eval: sigma_n must be positive");
    const Tensor r = y - A.apply(x);
    const double fidelity = r.vec().squaredNorm() / (2.0 * sigma_n * sigma_n);
    return fidelity + regularizer_eval(G, cfg, x);
}

/// Diagonal IRLS weights w_j (z_j^2 + gamma)^{(p-2)/2} per feature entry.
inline WeightField weights_sparse(const FeatureField& zfield, const PriorConfig& cfg) {
    if (!(cfg.gamma > 0.0))
        throw std::invalid_argument("weights_sparse: gamma must be positive");
    WeightField W;
    W.family = PriorFamily::Sparse;
    W.positions = zfield.positions();
    W.channels = zfield.channels;
    W.filters = zfield.filters;
    W.grid_h = zfield.grid_h;
    W.grid_w = zfield.grid_w;
    W.diag = Tensor({zfield.positions(), zfield.dim()});
    const double expo = 0.5 * (cfg.p - 2.0);
    for (std::size_t i = 0; i < zfield.positions(); ++i) {
        const Eigen::VectorXd w = detail::sparse_weights_at(cfg, zfield, i);
        for (std::size_t j = 0; j < zfield.dim(); ++j) {
            const double z = zfield.values[i * zfield.dim() + j];
            W.diag[i * zfield.dim() + j] = w[static_cast<Eigen::Index>(j)] *
                                           std::pow(z * z + cfg.gamma, expo);
        }
    }
    return W;
}

/// Low-rank IRLS weights: per position the c x c block
/// U diag(w_j (sigma_j^2 + gamma)^{(p-2)/2}) U' sharing the eigenbasis of
/// Z Z'. Weights pair with singular values by index (w increasing, sigma
/// decreasing); when c > q the c - q null directions of the thin SVD carry
/// weight zero, matching the thin-U construction. Also caches the symmetric
/// square roots.
inline WeightField weights_lowrank(const FeatureField& zfield, const PriorConfig& cfg) {
    if (!(cfg.gamma > 0.0))
        throw std::invalid_argument("weights_lowrank: gamma must be positive");
    const std::size_t c = zfield.channels;
    WeightField W;
    W.family = PriorFamily::LowRank;
    W.positions = zfield.positions();
    W.channels = c;
    W.filters = zfield.filters;
    W.grid_h = zfield.grid_h;
    W.grid_w = zfield.grid_w;
    W.blocks = Tensor({zfield.positions(), c, c});
    W.blocks_sqrt = Tensor({zfield.positions(), c, c});
    const double expo = 0.5 * (cfg.p - 2.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig;
    for (std::size_t i = 0; i < zfield.positions(); ++i) {
        const Eigen::VectorXd w = detail::lowrank_weights_at(cfg, zfield, i);
        const auto Z = zfield.block(i);
        const Eigen::MatrixXd gram = Z * Z.transpose();
        eig.compute(gram);
        if (eig.info() != Eigen::Success)
            throw std::runtime_error("weights_lowrank: eigen-solver failure at position " +
                                     std::to_string(i));
        // Eigen returns eigenvalues ascending; sigma_j descending pairs with
        // w_j ascending, so ascending eigenvalue index e takes w[c-1-e].
        const std::size_t r = std::min(c, zfield.filters);
        Eigen::VectorXd lam(c), lam_sqrt(c);
        for (std::size_t e = 0; e < c; ++e) {
            const std::size_t sv_index = c - 1 - e;
            const double scale =
                sv_index < r
                    ? w[static_cast<Eigen::Index>(sv_index)] *
                          std::pow(std::max(eig.eigenvalues()[static_cast<Eigen::Index>(e)], 0.0) +
                                       cfg.gamma,
                                   expo)
                    : 0.0;
            lam[static_cast<Eigen::Index>(e)] = scale;
            lam_sqrt[static_cast<Eigen::Index>(e)] = std::sqrt(scale);
        }
        const Eigen::MatrixXd U = eig.eigenvectors();
        Eigen::Map<Eigen::MatrixXd>(W.blocks.data() + i * c * c, c, c) =
            U * lam.asDiagonal() * U.transpose();
        Eigen::Map<Eigen::MatrixXd>(W.blocks_sqrt.data() + i * c * c, c, c) =
            U * lam_sqrt.asDiagonal() * U.transpose();
    }
    return W;
}

inline WeightField build_weights(const FeatureField& zfield, const PriorConfig& cfg) {
    return cfg.family == PriorFamily::Sparse ? weights_sparse(zfield, cfg)
                                             : weights_lowrank(zfield, cfg);
}

/// Applies the per-position weights to a feature field (the W G x action
/// inside the normal equations).
inline FeatureField apply_weights(const WeightField& W, const FeatureField& f) {
    FeatureField out = f;
    if (W.family == PriorFamily::Sparse) {
        if (W.diag.shape() != f.values.shape())
            throw std::invalid_argument("apply_weights: field shape mismatch");
        for (std::size_t i = 0; i < f.values.size(); ++i) out.values[i] = W.diag[i] * f.values[i];
    } else {
        for (std::size_t i = 0; i < f.positions(); ++i)
            out.block(i) = W.block(i) * f.block(i);
    }
    return out;
}

/// Quadratic majorizer of the regularizer around xk, constants included so
/// that Q(xk;xk) = R(xk):
///   Q(x;xk) = (p/2) sum_i <z_i, W_i z_i> + (p gamma/2) sum_i tr(W_i)
///           + ((2-p)/2) R(xk).
inline double majorizer_eval(const FilterBank& G, const PriorConfig& cfg, const Tensor& x,
                             const Tensor& xk) {
    const FeatureField fk = extract_features(G, xk);
    const WeightField W = build_weights(fk, cfg);
    const FeatureField f = extract_features(G, x);
    double quad = 0.0, trace = 0.0;
    if (cfg.family == PriorFamily::Sparse) {
        for (std::size_t i = 0; i < f.values.size(); ++i) {
            quad += W.diag[i] * f.values[i] * f.values[i];
            trace += W.diag[i];
        }
    } else {
        for (std::size_t i = 0; i < f.positions(); ++i) {
            const auto Z = f.block(i);
            quad += (Z.transpose() * W.block(i) * Z).trace();
            trace += W.block(i).trace();
        }
    }
    const double r_at_xk = regularizer_eval(G, cfg, xk);
    return 0.5 * cfg.p * quad + 0.5 * cfg.p * cfg.gamma * trace + 0.5 * (2.0 - cfg.p) * r_at_xk;
}

}  // namespace irlsrec
