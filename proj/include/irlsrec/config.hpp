#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "irlsrec/implicit_grad.hpp"
#include "irlsrec/irls.hpp"
#include "irlsrec/synth.hpp"
#include "irlsrec/tensor_io.hpp"
#include "irlsrec/theta.hpp"

namespace irlsrec {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat key=value configuration. '#' starts a comment; keys are validated
/// against the documented list so typos fail loudly.
class Config {
public:
    static const std::set<std::string>& known_keys() {
        static const std::set<std::string> keys{
            "task",         "sigma_n",        "delta",          "seed",
            "preset",       "filters",        "filters.count",  "filters.size",
            "prior.family", "prior.p",        "prior.gamma",    "prior.weights",
            "irls.max_steps", "irls.fp_rtol", "irls.consecutive", "irls.precondition",
            "cg.rtol",      "cg.maxiter",     "backward.rtol",  "backward.maxiter",
            "input",        "kernel",         "mask",           "theta",
            "output",       "reference",      "sr.scale",
            "train.lr",     "train.lr_decay", "train.epochs",   "train.batches_per_epoch",
            "train.batch_size", "train.crop", "train.count",    "train.sigma_lo",
            "train.sigma_hi", "train.learn_filters", "train.learn_weights", "train.learn_p",
            "train.input",  "train.checkpoint"};
        return keys;
    }

    void set(const std::string& key, const std::string& value) {
        if (!known_keys().contains(key)) throw ConfigError("unknown config key: " + key);
        kv_[key] = value;
    }

    static Config parse_file(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file: " + path.string());
        Config cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
            };
            if (trim(line).empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
            cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    void apply_override(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override must be key=value: " + assignment);
        set(assignment.substr(0, eq), assignment.substr(eq + 1));
    }

    bool has(const std::string& key) const { return kv_.contains(key); }

    std::string str(const std::string& key, const std::string& fallback = "") const {
        const auto it = kv_.find(key);
        return it == kv_.end() ? fallback : it->second;
    }

    std::string require(const std::string& key) const {
        const auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("missing required config key: " + key);
        return it->second;
    }

    double number(const std::string& key, double fallback) const {
        const auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": not a number: " + it->second);
        }
    }

    long integer(const std::string& key, long fallback) const {
        const double v = number(key, static_cast<double>(fallback));
        return static_cast<long>(v);
    }

    bool flag(const std::string& key, bool fallback) const {
        const auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        if (it->second == "on" || it->second == "true" || it->second == "1") return true;
        if (it->second == "off" || it->second == "false" || it->second == "0") return false;
        throw ConfigError("config key " + key + ": expected on/off");
    }

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

namespace detail {

inline Tensor load_carrier(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("file does not exist: " + path.string());
    if (path.extension() == ".png") return read_image(path);
    return read_tensor(path);
}

inline FilterBank bank_by_name(const std::string& name) {
    if (name == "gradient") return make_gradient_bank();
    if (name == "directional") return make_directional_bank();
    if (name == "default") return make_default_bank();
    if (name.starts_with("file:")) return FilterBank(load_carrier(name.substr(5)));
    throw ConfigError("unknown filter bank: " + name +
                      " (expected gradient|directional|default|file:PATH)");
}

}  // namespace detail

struct AssembledProblem {
    ProblemSpec spec;
    Tensor x0;
    std::optional<Tensor> reference;
    IrlsSettings settings;
    BackwardSettings backward;
    std::uint64_t seed = 0;
    std::string task;
};

/// Applies a named baseline preset: the classical TV family realized as
/// fixed gradient-filter configurations, plus the hand-built l1 bank.
inline void apply_preset(Config& cfg, const std::string& preset) {
    const auto set_default = [&](const std::string& k, const std::string& v) {
        if (!cfg.has(k)) cfg.set(k, v);
    };
    if (preset == "tv-l1") {
        set_default("prior.family", "sparse");
        set_default("filters", "gradient");
    } else if (preset == "tv-iso" || preset == "tvn") {
        set_default("prior.family", "lowrank");
        set_default("filters", "gradient");
    } else if (preset == "l1") {
        set_default("prior.family", "sparse");
        set_default("filters", "default");
    } else {
        throw ConfigError("unknown preset: " + preset + " (expected tv-l1|tv-iso|tvn|l1)");
    }
    set_default("prior.p", "1.0");
    set_default("prior.weights", "ones");
}

/// Builds the reconstruction problem a config describes: degradation
/// operator from the task, prior from theta/preset/filter keys, solver
/// settings from the documented keys.
inline AssembledProblem assemble_problem(Config cfg) {
    if (cfg.has("preset")) apply_preset(cfg, cfg.str("preset"));

    AssembledProblem out;
    out.task = cfg.require("task");
    out.seed = static_cast<std::uint64_t>(cfg.integer("seed", 0));

    const Tensor y = detail::load_carrier(cfg.require("input"));
    const double sigma = cfg.number("sigma_n", 0.01);

    ProblemSpec& spec = out.spec;
    spec.sigma_n = sigma;
    spec.delta = cfg.number("delta", 8e-4);

    if (out.task == "deblur" || out.task == "sr") {
        const Tensor kernel = detail::load_carrier(cfg.require("kernel"));
        if (kernel.rank() != 2) throw ConfigError("kernel must be a rank-2 LTSR tensor");
        if (y.rank() != 3) throw ConfigError("input observation must be (c,H,W)");
        const std::size_t h = kernel.extent(0), w = kernel.extent(1);
        if (out.task == "deblur") {
            const std::vector<std::size_t> shape{y.extent(0), y.extent(1) + h - 1,
                                                 y.extent(2) + w - 1};
            spec.A = std::make_shared<ValidConv2D>(kernel, shape);
        } else {
            const auto s = static_cast<std::size_t>(cfg.integer("sr.scale", 2));
            if (s < 1) throw ConfigError("sr.scale must be >= 1");
            const std::vector<std::size_t> shape{y.extent(0), s * y.extent(1) + h - 1,
                                                 s * y.extent(2) + w - 1};
            auto conv = std::make_shared<ValidConv2D>(kernel, shape);
            auto decim = std::make_shared<Decimation>(conv->output_shape(), s, s);
            spec.A = std::make_shared<ComposeOp>(decim, conv);
        }
    } else if (out.task == "demosaick") {
        if (y.rank() != 3 || y.extent(0) != 3)
            throw ConfigError("demosaick requires a 3-channel observation");
        spec.A = std::make_shared<CFAMask>(y.extent(1), y.extent(2));
    } else if (out.task == "fourier") {
        const Tensor mask = detail::load_carrier(cfg.require("mask"));
        auto dft = make_subsampled_dft(mask);
        if (y.rank() != 1 || y.extent(0) != dft->sampled_bins())
            throw ConfigError("fourier observation must be a rank-1 tensor of " +
                              std::to_string(dft->sampled_bins()) + " samples");
        spec.A = dft;
    } else {
        throw ConfigError("unknown task: " + out.task +
                          " (expected deblur|sr|demosaick|fourier)");
    }
    spec.y = y;

    // prior: an explicit theta container wins over filter/weight keys
    const double gamma = cfg.number("prior.gamma", 1e-5);
    if (cfg.has("theta")) {
        const ThetaParams theta = load_theta(cfg.str("theta"));
        spec.G = theta.bank();
        spec.prior = theta.prior(gamma);
    } else {
        spec.G = detail::bank_by_name(cfg.str("filters", "default"));
        spec.prior.family =
            cfg.str("prior.family", "sparse") == "lowrank" ? PriorFamily::LowRank
                                                           : PriorFamily::Sparse;
        spec.prior.gamma = gamma;
        spec.prior.p = cfg.number("prior.p", 1.0);
        const std::string weights = cfg.str("prior.weights", "ones");
        if (weights == "ones") {
            spec.prior.source = WeightSource::Ones;
        } else if (weights.starts_with("file:")) {
            const Tensor wt = detail::load_carrier(weights.substr(5));
            if (wt.rank() == 1) {
                spec.prior.source = WeightSource::PerFilter;
                spec.prior.w = Eigen::Map<const Eigen::VectorXd>(
                    wt.data(), static_cast<Eigen::Index>(wt.size()));
            } else if (wt.rank() == 2) {
                spec.prior.source = WeightSource::External;
                spec.prior.external = wt;
            } else {
                throw ConfigError("prior.weights file must be rank-1 or rank-2");
            }
        } else {
            // comma-separated per-filter values
            std::vector<double> vals;
            std::stringstream ss(weights);
            std::string tok;
            while (std::getline(ss, tok, ',')) vals.push_back(std::stod(tok));
            spec.prior.source = WeightSource::PerFilter;
            spec.prior.w = Eigen::Map<const Eigen::VectorXd>(
                vals.data(), static_cast<Eigen::Index>(vals.size()));
        }
    }
    spec.validate();

    out.settings.max_steps = static_cast<int>(cfg.integer("irls.max_steps", 400));
    out.settings.fp_rtol = cfg.number("irls.fp_rtol", 1e-4);
    out.settings.consecutive = static_cast<int>(cfg.integer("irls.consecutive", 3));
    out.settings.precondition = cfg.flag("irls.precondition", true);
    out.settings.cg_rtol = cfg.number("cg.rtol", 1e-6);
    out.settings.cg_maxiter = static_cast<int>(cfg.integer("cg.maxiter", 150));
    out.settings.validate();
    out.backward.rtol = cfg.number("backward.rtol", 1e-2);
    out.backward.maxiter = static_cast<int>(cfg.integer("backward.maxiter", 2000));

    out.x0 = (out.task == "deblur" || out.task == "sr")
                 ? wiener_init(*spec.A, spec.y, spec.sigma_n)
                 : backproject_init(*spec.A, spec.y);
    if (cfg.has("reference")) out.reference = detail::load_carrier(cfg.str("reference"));
    return out;
}

}  // namespace irlsrec
