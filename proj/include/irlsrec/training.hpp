#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "irlsrec/implicit_grad.hpp"
#include "irlsrec/irls.hpp"
#include "irlsrec/metrics.hpp"
#include "irlsrec/rng.hpp"
#include "irlsrec/theta.hpp"

namespace irlsrec {

struct TrainConfig {
    double lr = 5e-3;
    double lr_decay = 0.98;  // applied after each epoch
    int batch_size = 8;
    int epochs = 100;
    int batches_per_epoch = 500;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::uint64_t seed = 0;
    bool learn_filters = true;
    bool learn_weights = false;
    bool learn_p = false;

    void validate() const {
        if (!(lr >= 0.0)) throw std::invalid_argument("TrainConfig: lr must be >= 0");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0))
            throw std::invalid_argument("TrainConfig: decay must be in (0,1]");
        if (batch_size < 1 || epochs < 1 || batches_per_epoch < 1)
            throw std::invalid_argument("TrainConfig: counts must be >= 1");
    }
};

/// Negative-PSNR loss (unit peak) and its gradient
/// dL/dx = (20/ln 10) (x - target) / |x - target|^2.
struct LossGrad {
    double value = 0.0;
    Tensor grad;
};

inline LossGrad loss_neg_psnr(const Tensor& x, const Tensor& target) {
    if (!x.same_shape(target)) throw std::invalid_argument("loss_neg_psnr: shape mismatch");
    Tensor err = x - target;
    const double sq = err.vec().squaredNorm();
    if (sq == 0.0) throw std::invalid_argument("loss_neg_psnr: zero-error degenerate input");
    LossGrad out;
    out.value = -psnr(x, target);
    err *= (20.0 / std::numbers::ln10) / sq;
    out.grad = std::move(err);
    return out;
}

struct AdamMoments {
    Eigen::VectorXd m, v;

    static AdamMoments zeros(Eigen::Index n) {
        return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
    }
};

/// One bias-corrected Adam update; t is the 1-based step count with this
/// moment state.
inline void adam_step(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, AdamMoments& moments,
                      const TrainConfig& config, int t) {
    if (t < 1) throw std::invalid_argument("adam_step: t must be >= 1");
    moments.m = config.beta1 * moments.m + (1.0 - config.beta1) * grad;
    moments.v = config.beta2 * moments.v + (1.0 - config.beta2) * grad.cwiseProduct(grad);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        const double mhat = moments.m[i] / bc1;
        const double vhat = moments.v[i] / bc2;
        theta[i] -= config.lr * mhat / (std::sqrt(vhat) + config.eps);
    }
}

struct TrainSample {
    Tensor clean;
    ProblemTemplate tmpl;  // A, degraded y, sigma_n, delta, gamma
    Tensor x0;             // cached initializer
};

struct SampleSet {
    std::vector<TrainSample> samples;
};

/// Draws random crops from clean images, degrades them through the operator
/// factory and adds i.i.d. Gaussian noise. The noise is baked in here so that
/// training is a pure function of (theta0, set, config).
inline SampleSet make_sample_set(
    const std::vector<Tensor>& clean_images, std::size_t crop, std::size_t count,
    const std::function<LinearOpPtr(const std::vector<std::size_t>&)>& make_operator,
    double sigma_lo, double sigma_hi, double delta, double gamma, std::uint64_t seed) {
    if (clean_images.empty()) throw std::invalid_argument("make_sample_set: no images");
    Rng rng(seed);
    SampleSet set;
    for (std::size_t s = 0; s < count; ++s) {
        const Tensor& img = clean_images[s % clean_images.size()];
        const std::size_t c = img.extent(0), H = img.extent(1), W = img.extent(2);
        if (H < crop || W < crop) throw std::invalid_argument("make_sample_set: crop too large");
        const std::size_t oy = rng.integer(H - crop + 1), ox = rng.integer(W - crop + 1);
        Tensor x({c, crop, crop});
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < crop; ++y)
                for (std::size_t xx = 0; xx < crop; ++xx)
                    x.at3(ch, y, xx) = img.at3(ch, oy + y, ox + xx);

        TrainSample sample;
        sample.clean = x;
        sample.tmpl.A = make_operator(x.shape());
        sample.tmpl.sigma_n = sigma_lo + (sigma_hi - sigma_lo) * rng.uniform();
        sample.tmpl.delta = delta;
        sample.tmpl.gamma = gamma;
        Tensor y = sample.tmpl.A->apply(x);
        for (auto& v : y.values()) v += sample.tmpl.sigma_n * rng.normal();
        sample.tmpl.y = std::move(y);
        sample.x0 = wiener_init(*sample.tmpl.A, sample.tmpl.y, sample.tmpl.sigma_n);
        set.samples.push_back(std::move(sample));
    }
    return set;
}

namespace detail {

inline Eigen::Index learnable_size(const ThetaParams& theta, const TrainConfig& cfg) {
    Eigen::Index n = 0;
    if (cfg.learn_filters) n += static_cast<Eigen::Index>(theta.filters.size());
    if (cfg.learn_weights) n += theta.w_raw.size();
    if (cfg.learn_p) n += 1;
    return n;
}

inline Eigen::VectorXd pack(const ThetaParams& theta, const TrainConfig& cfg) {
    Eigen::VectorXd flat(learnable_size(theta, cfg));
    Eigen::Index at = 0;
    if (cfg.learn_filters)
        for (std::size_t i = 0; i < theta.filters.size(); ++i) flat[at++] = theta.filters[i];
    if (cfg.learn_weights)
        for (Eigen::Index j = 0; j < theta.w_raw.size(); ++j) flat[at++] = theta.w_raw[j];
    if (cfg.learn_p) flat[at++] = theta.p_raw;
    return flat;
}

inline void unpack(const Eigen::VectorXd& flat, const TrainConfig& cfg, ThetaParams& theta) {
    Eigen::Index at = 0;
    if (cfg.learn_filters)
        for (std::size_t i = 0; i < theta.filters.size(); ++i) theta.filters[i] = flat[at++];
    if (cfg.learn_weights)
        for (Eigen::Index j = 0; j < theta.w_raw.size(); ++j) theta.w_raw[j] = flat[at++];
    if (cfg.learn_p) theta.p_raw = flat[at++];
}

inline Eigen::VectorXd pack_grad(const ThetaGrad& g, const ThetaParams& theta,
                                 const TrainConfig& cfg) {
    Eigen::VectorXd flat(learnable_size(theta, cfg));
    Eigen::Index at = 0;
    if (cfg.learn_filters)
        for (std::size_t i = 0; i < g.d_filters.size(); ++i) flat[at++] = g.d_filters[i];
    if (cfg.learn_weights)
        for (Eigen::Index j = 0; j < g.d_w_raw.size(); ++j) flat[at++] = g.d_w_raw[j];
    if (cfg.learn_p) flat[at++] = g.d_p_raw;
    return flat;
}

}  // namespace detail

struct TrainLogRow {
    int epoch = 0;
    int batch = 0;
    double loss = 0.0;
    double mean_forward_steps = 0.0;
    double mean_cg_iters = 0.0;
    int skipped = 0;
};

struct TrainResult {
    ThetaParams theta;
    AdamMoments moments;
    int steps_done = 0;
    std::vector<TrainLogRow> log;
};

/// Supervised training of theta with the implicit gradient: per batch the
/// mean of per-sample gradients, skipping samples whose forward pass misses
/// the fixed-point criterion.
inline TrainResult train(const SampleSet& set, const ThetaParams& theta0,
                         const TrainConfig& config, const IrlsSettings& irls_settings,
                         const BackwardSettings& backward_settings = {},
                         const AdamMoments* resume_moments = nullptr, int resume_step = 0) {
    config.validate();
    if (set.samples.empty()) throw std::invalid_argument("train: empty sample set");

    TrainResult result;
    result.theta = theta0;
    const Eigen::Index n = detail::learnable_size(theta0, config);
    result.moments = resume_moments ? *resume_moments : AdamMoments::zeros(n);

    const int total_steps = config.epochs * config.batches_per_epoch;
    for (int step = resume_step; step < total_steps; ++step) {
        const int epoch = step / config.batches_per_epoch;
        const int batch = step % config.batches_per_epoch;
        TrainConfig current = config;
        current.lr = config.lr * std::pow(config.lr_decay, epoch);

        ThetaGrad batch_grad(result.theta);
        double batch_loss = 0.0;
        double fwd_steps = 0.0, cg_iters = 0.0;
        int contributed = 0, skipped = 0;
        for (int b = 0; b < config.batch_size; ++b) {
            const std::size_t idx =
                (static_cast<std::size_t>(step) * config.batch_size + b) % set.samples.size();
            const TrainSample& sample = set.samples[idx];
            const ProblemSpec spec = sample.tmpl.instantiate(result.theta);
            const IrlsResult fwd = run_irls(spec, sample.x0, irls_settings);
            if (!fwd.state.converged) {
                ++skipped;
                continue;
            }
            const LossGrad loss = loss_neg_psnr(fwd.x, sample.clean);
            const GradReport rep =
                backward_pass(sample.tmpl, result.theta, fwd.x, loss.grad, backward_settings);
            batch_grad += rep.grad;
            batch_loss += loss.value;
            fwd_steps += fwd.state.step;
            double iters = 0.0;
            for (const auto& row : fwd.trace) iters += row.cg_iters;
            cg_iters += iters;
            ++contributed;
        }
        if (contributed == 0)
            throw std::runtime_error("train: every sample in the batch failed to converge");
        batch_grad *= 1.0 / contributed;
        batch_loss /= contributed;

        if (n > 0) {
            Eigen::VectorXd flat = detail::pack(result.theta, config);
            const Eigen::VectorXd grad = detail::pack_grad(batch_grad, result.theta, config);
            adam_step(flat, grad, result.moments, current, step + 1);
            detail::unpack(flat, config, result.theta);
        }

        TrainLogRow row;
        row.epoch = epoch;
        row.batch = batch;
        row.loss = batch_loss;
        row.mean_forward_steps = fwd_steps / contributed;
        row.mean_cg_iters = cg_iters / contributed;
        row.skipped = skipped;
        result.log.push_back(row);
        result.steps_done = step + 1;
    }
    return result;
}

/// Checkpoint = theta + optimizer state + step counter, in the same
/// container format as save_theta.
inline void save_checkpoint(const TrainResult& state, const std::filesystem::path& path) {
    std::map<std::string, Tensor> extra;
    extra["adam_m"] = detail::vec_tensor(state.moments.m.size() ? state.moments.m
                                                                : Eigen::VectorXd::Zero(1));
    extra["adam_v"] = detail::vec_tensor(state.moments.v.size() ? state.moments.v
                                                                : Eigen::VectorXd::Zero(1));
    extra["opt_state"] = Tensor({2}, {static_cast<double>(state.steps_done),
                                      static_cast<double>(state.moments.m.size())});
    save_theta(state.theta, path, extra);
}

inline TrainResult load_checkpoint(const std::filesystem::path& path) {
    TrainResult state;
    std::map<std::string, Tensor> extra;
    state.theta = load_theta(path, &extra);
    const Tensor& opt = extra.at("opt_state");
    state.steps_done = static_cast<int>(opt[0]);
    const auto n = static_cast<Eigen::Index>(opt[1]);
    state.moments.m = detail::tensor_vec(extra.at("adam_m")).head(n);
    state.moments.v = detail::tensor_vec(extra.at("adam_v")).head(n);
    return state;
}

}  // namespace irlsrec
