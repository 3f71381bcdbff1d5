#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <Eigen/Core>

#include "irlsrec/priors.hpp"
#include "irlsrec/tensor.hpp"
#include "irlsrec/tensor_io.hpp"

namespace irlsrec {

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double softplus_inv(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }
inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

enum class WeightsMode { FixedOnes, Softplus, CumsumSoftplus };
enum class PMode { Fixed, LogisticInterval };

/// Learnable prior parameters theta = {filter bank, weights, norm order p}.
/// Weights and p are stored in unconstrained raw form: weights map through
/// softplus (sparse) or a cumulative sum of softplus increments (low-rank,
/// which enforces the nondecreasing order), and p maps onto [0.4, 0.9]
/// through a scaled logistic.
struct ThetaParams {
    PriorFamily family = PriorFamily::Sparse;
    Tensor filters;          // (k,h,w)
    Eigen::VectorXd w_raw;   // k entries (sparse) or r = min(c,q) (low-rank)
    WeightsMode weights_mode = WeightsMode::FixedOnes;
    double p_raw = 0.0;
    PMode p_mode = PMode::Fixed;
    double p_fixed = 1.0;

    static constexpr double kPLow = 0.4;
    static constexpr double kPHigh = 0.9;

    double p() const {
        if (p_mode == PMode::Fixed) return p_fixed;
        return kPLow + (kPHigh - kPLow) * logistic(p_raw);
    }

    double dp_dpraw() const {
        if (p_mode == PMode::Fixed) return 0.0;
        const double s = logistic(p_raw);
        return (kPHigh - kPLow) * s * (1.0 - s);
    }

    Eigen::VectorXd weights() const {
        switch (weights_mode) {
            case WeightsMode::FixedOnes:
                return Eigen::VectorXd::Ones(w_raw.size());
            case WeightsMode::Softplus: {
                Eigen::VectorXd w(w_raw.size());
                for (Eigen::Index j = 0; j < w.size(); ++j) w[j] = softplus(w_raw[j]);
                return w;
            }
            case WeightsMode::CumsumSoftplus: {
                Eigen::VectorXd w(w_raw.size());
                double acc = 0.0;
                for (Eigen::Index j = 0; j < w.size(); ++j) {
                    acc += softplus(w_raw[j]);
                    w[j] = acc;
                }
                return w;
            }
        }
        return {};
    }

    /// Pulls a gradient on the mapped weights back to the raw parameters.
    Eigen::VectorXd weights_grad_to_raw(const Eigen::VectorXd& dw) const {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(w_raw.size());
        switch (weights_mode) {
            case WeightsMode::FixedOnes:
                break;
            case WeightsMode::Softplus:
                for (Eigen::Index j = 0; j < g.size(); ++j) g[j] = dw[j] * logistic(w_raw[j]);
                break;
            case WeightsMode::CumsumSoftplus: {
                double suffix = 0.0;
                for (Eigen::Index j = g.size() - 1; j >= 0; --j) {
                    suffix += dw[j];
                    g[j] = suffix * logistic(w_raw[j]);
                }
                break;
            }
        }
        return g;
    }

    /// Builds the prior configuration this parameter set induces.
    PriorConfig prior(double gamma) const {
        PriorConfig cfg;
        cfg.family = family;
        cfg.p = p();
        cfg.gamma = gamma;
        if (weights_mode == WeightsMode::FixedOnes) {
            cfg.source = WeightSource::Ones;
        } else {
            cfg.source = WeightSource::PerFilter;
            cfg.w = weights();
        }
        return cfg;
    }

    FilterBank bank() const { return FilterBank(filters); }
};

/// Gradient of a loss with respect to theta, in raw-parameter coordinates.
struct ThetaGrad {
    Tensor d_filters;
    Eigen::VectorXd d_w_raw;
    double d_p_raw = 0.0;

    ThetaGrad() = default;
    explicit ThetaGrad(const ThetaParams& theta)
        : d_filters(theta.filters.shape()),
          d_w_raw(Eigen::VectorXd::Zero(theta.w_raw.size())) {}

    ThetaGrad& operator+=(const ThetaGrad& o) {
        d_filters += o.d_filters;
        d_w_raw += o.d_w_raw;
        d_p_raw += o.d_p_raw;
        return *this;
    }
    ThetaGrad& operator*=(double s) {
        d_filters *= s;
        d_w_raw *= s;
        d_p_raw *= s;
        return *this;
    }

    bool all_finite() const {
        return d_filters.all_finite() && d_w_raw.allFinite() && std::isfinite(d_p_raw);
    }
};

namespace detail {

constexpr std::uint32_t kThetaVersion = 1;

inline void write_named_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor_stream(t, os);
}

inline std::map<std::string, Tensor> read_named_tensors(std::istream& is, std::uint32_t count) {
    std::map<std::string, Tensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = get_u32(is);
        if (len > 256) throw IoError("theta container: name too long");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw IoError("theta container: truncated name");
        out[name] = read_tensor_stream(is);
    }
    return out;
}

inline Tensor vec_tensor(const Eigen::VectorXd& v) {
    Tensor t({static_cast<std::size_t>(v.size())});
    for (Eigen::Index i = 0; i < v.size(); ++i) t[static_cast<std::size_t>(i)] = v[i];
    return t;
}

inline Eigen::VectorXd tensor_vec(const Tensor& t) {
    return Eigen::Map<const Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
}

}  // namespace detail

/// Saves theta (and optionally extra named tensors, e.g. optimizer state) to
/// an LTSR-based container. Round-trip is bit exact.
inline void save_theta(const ThetaParams& theta, const std::filesystem::path& path,
                       const std::map<std::string, Tensor>& extra = {}) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write("TPRM", 4);
    detail::put_u32(os, detail::kThetaVersion);
    std::map<std::string, Tensor> entries = extra;
    entries["filters"] = theta.filters;
    entries["w_raw"] = detail::vec_tensor(theta.w_raw);
    entries["scalars"] = Tensor({5}, {static_cast<double>(theta.family == PriorFamily::LowRank),
                                      static_cast<double>(static_cast<int>(theta.weights_mode)),
                                      theta.p_raw,
                                      static_cast<double>(static_cast<int>(theta.p_mode)),
                                      theta.p_fixed});
    detail::put_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, tensor] : entries) detail::write_named_tensor(os, name, tensor);
    if (!os) throw IoError("theta container: write failure");
}

inline ThetaParams load_theta(const std::filesystem::path& path,
                              std::map<std::string, Tensor>* extra_out = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "TPRM", 4) != 0)
        throw IoError("theta container: bad magic");
    const std::uint32_t version = detail::get_u32(is);
    if (version != detail::kThetaVersion)
        throw IoError("theta container: version mismatch (got " + std::to_string(version) + ")");
    const std::uint32_t count = detail::get_u32(is);
    auto entries = detail::read_named_tensors(is, count);

    ThetaParams theta;
    theta.filters = entries.at("filters");
    theta.w_raw = detail::tensor_vec(entries.at("w_raw"));
    const Tensor& s = entries.at("scalars");
    theta.family = s[0] != 0.0 ? PriorFamily::LowRank : PriorFamily::Sparse;
    theta.weights_mode = static_cast<WeightsMode>(static_cast<int>(s[1]));
    theta.p_raw = s[2];
    theta.p_mode = static_cast<PMode>(static_cast<int>(s[3]));
    theta.p_fixed = s[4];
    if (extra_out) {
        entries.erase("filters");
        entries.erase("w_raw");
        entries.erase("scalars");
        *extra_out = std::move(entries);
    }
    return theta;
}

}  // namespace irlsrec
