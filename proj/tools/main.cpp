// Command-line surface: reconstruct / train / check / grad-check.
// Exit codes: 0 success, 1 numerical failure, 2 usage or config error.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "irlsrec/config.hpp"
#include "irlsrec/implicit_grad.hpp"
#include "irlsrec/irls.hpp"
#include "irlsrec/metrics.hpp"
#include "irlsrec/synth.hpp"
#include "irlsrec/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace irlsrec;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNumerical = 1;
constexpr int kExitUsage = 2;

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path);
    os << j.dump(2) << "\n";
}

void emit_error(const fs::path& outdir, const std::string& type, const std::string& message) {
    const json j{{"error", {{"type", type}, {"message", message}}}};
    std::cerr << j.dump() << "\n";
    std::error_code ec;
    if (!outdir.empty() && fs::exists(outdir, ec)) write_json(outdir / "report.json", j);
}

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
    Config cfg = Config::parse_file(path);
    for (const auto& o : overrides) cfg.apply_override(o);
    return cfg;
}

void write_trace_csv(const fs::path& path, const std::vector<IrlsTraceRow>& trace,
                     bool with_psnr) {
    std::ofstream os(path);
    os << "step,fixed_point_rtol,objective";
    if (with_psnr) os << ",psnr";
    os << ",cg_iters\n";
    os << std::setprecision(17);
    for (const auto& row : trace) {
        os << row.step << "," << row.fp_residual << "," << row.objective;
        if (with_psnr) os << "," << row.psnr_db;
        os << "," << row.cg_iters << "\n";
    }
}

int cmd_reconstruct(const Config& cfg, const fs::path& outdir) {
    AssembledProblem problem = assemble_problem(cfg);
    const Tensor* ref = problem.reference ? &*problem.reference : nullptr;
    const IrlsResult result = run_irls(problem.spec, problem.x0, problem.settings, ref);

    Tensor out = result.x;
    for (auto& v : out.values()) v = std::clamp(v, 0.0, 1.0);
    const fs::path image_path =
        cfg.has("output") ? fs::path(cfg.str("output")) : outdir / "reconstruction.png";
    if (image_path.extension() == ".ltsr")
        write_tensor(result.x, image_path);  // full-precision carrier
    else
        write_image(out, image_path, ImageMeta{8, out.extent(0)});
    write_trace_csv(outdir / "trace.csv", result.trace, ref != nullptr);

    json metrics;
    metrics["objective"] = result.state.objective_history.back();
    metrics["fixed_point_residual"] = result.state.residual_history.back();
    if (ref) {
        metrics["psnr"] = psnr(result.x, *ref);
        metrics["ssim"] = ssim(out, *ref);
        metrics["psnr_init"] = psnr(problem.x0, *ref);
    }
    write_json(outdir / "metrics.json", metrics);

    json report;
    report["task"] = problem.task;
    report["converged"] = result.state.converged;
    report["steps"] = result.state.step;
    report["descent_flagged"] = result.state.descent_flagged;
    report["image"] = image_path.string();
    write_json(outdir / "report.json", report);

    if (!result.state.converged) {
        std::cerr << "reconstruct: fixed-point criterion not met within "
                  << problem.settings.max_steps << " steps\n";
        return kExitNumerical;
    }
    std::cout << "wrote " << image_path.string() << "\n";
    return kExitOk;
}

LinearOpPtr training_operator(const Config& cfg, const std::string& task,
                              const std::vector<std::size_t>& shape) {
    if (task == "deblur") {
        const Tensor kernel = read_tensor(cfg.require("kernel"));
        return std::make_shared<ValidConv2D>(kernel, shape);
    }
    if (task == "sr") {
        const Tensor kernel = read_tensor(cfg.require("kernel"));
        const auto s = static_cast<std::size_t>(cfg.integer("sr.scale", 2));
        auto conv = std::make_shared<ValidConv2D>(kernel, shape);
        return std::make_shared<ComposeOp>(
            std::make_shared<Decimation>(conv->output_shape(), s, s), conv);
    }
    if (task == "demosaick") return std::make_shared<CFAMask>(shape[1], shape[2]);
    if (task == "fourier") return make_subsampled_dft(read_tensor(cfg.require("mask")));
    throw ConfigError("unknown task: " + task);
}

int cmd_train(const Config& cfg, const fs::path& outdir) {
    const std::string task = cfg.require("task");
    const Tensor clean = detail::load_carrier(cfg.require("train.input"));

    TrainConfig tc;
    tc.lr = cfg.number("train.lr", 5e-3);
    tc.lr_decay = cfg.number("train.lr_decay", 0.98);
    tc.epochs = static_cast<int>(cfg.integer("train.epochs", 1));
    tc.batches_per_epoch = static_cast<int>(cfg.integer("train.batches_per_epoch", 50));
    tc.batch_size = static_cast<int>(cfg.integer("train.batch_size", 2));
    tc.seed = static_cast<std::uint64_t>(cfg.integer("seed", 0));
    tc.learn_filters = cfg.flag("train.learn_filters", true);
    tc.learn_weights = cfg.flag("train.learn_weights", false);
    tc.learn_p = cfg.flag("train.learn_p", false);

    const auto crop = static_cast<std::size_t>(cfg.integer("train.crop", 16));
    const auto count = static_cast<std::size_t>(cfg.integer("train.count", 4));
    const double sigma_lo = cfg.number("train.sigma_lo", 0.01);
    const double sigma_hi = cfg.number("train.sigma_hi", 0.01);

    ThetaParams theta;
    AdamMoments moments;
    int resume_step = 0;
    bool resumed = false;
    if (cfg.has("train.checkpoint")) {
        TrainResult ck = load_checkpoint(cfg.str("train.checkpoint"));
        theta = ck.theta;
        moments = ck.moments;
        resume_step = ck.steps_done;
        resumed = true;
    } else if (cfg.has("theta")) {
        theta = load_theta(cfg.str("theta"));
    } else {
        const auto k = static_cast<std::size_t>(cfg.integer("filters.count", 4));
        const auto fsize = static_cast<std::size_t>(cfg.integer("filters.size", 3));
        theta.family = cfg.str("prior.family", "sparse") == "lowrank" ? PriorFamily::LowRank
                                                                      : PriorFamily::Sparse;
        theta.filters = make_random_bank(k, fsize, 0.1, tc.seed + 17).filters;
        const std::size_t wlen = theta.family == PriorFamily::Sparse
                                     ? k
                                     : std::min<std::size_t>(clean.extent(0), k);
        theta.w_raw = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(wlen),
                                                softplus_inv(1.0));
        theta.weights_mode =
            tc.learn_weights ? (theta.family == PriorFamily::Sparse ? WeightsMode::Softplus
                                                                    : WeightsMode::CumsumSoftplus)
                             : WeightsMode::FixedOnes;
        theta.p_mode = tc.learn_p ? PMode::LogisticInterval : PMode::Fixed;
        theta.p_fixed = cfg.number("prior.p", 1.0);
    }

    const SampleSet set = make_sample_set(
        {clean}, crop, count,
        [&](const std::vector<std::size_t>& shape) { return training_operator(cfg, task, shape); },
        sigma_lo, sigma_hi, cfg.number("delta", 8e-4), cfg.number("prior.gamma", 1e-5), tc.seed);

    IrlsSettings irls;
    irls.max_steps = static_cast<int>(cfg.integer("irls.max_steps", 400));
    irls.fp_rtol = cfg.number("irls.fp_rtol", 1e-4);
    irls.cg_rtol = cfg.number("cg.rtol", 1e-6);
    irls.cg_maxiter = static_cast<int>(cfg.integer("cg.maxiter", 150));
    BackwardSettings backward;
    backward.rtol = cfg.number("backward.rtol", 1e-2);
    backward.maxiter = static_cast<int>(cfg.integer("backward.maxiter", 2000));

    const TrainResult result = train(set, theta, tc, irls, backward,
                                     resumed ? &moments : nullptr, resume_step);

    const fs::path theta_path =
        cfg.has("output") ? fs::path(cfg.str("output")) : outdir / "theta.tprm";
    save_theta(result.theta, theta_path);
    save_checkpoint(result, outdir / "checkpoint.tprm");
    {
        std::ofstream os(outdir / "train_log.csv");
        os << "epoch,batch,loss,mean_forward_steps,mean_cg_iters\n" << std::setprecision(17);
        for (const auto& row : result.log)
            os << row.epoch << "," << row.batch << "," << row.loss << ","
               << row.mean_forward_steps << "," << row.mean_cg_iters << "\n";
    }
    json report;
    report["steps_done"] = result.steps_done;
    report["first_loss"] = result.log.empty() ? 0.0 : result.log.front().loss;
    report["last_loss"] = result.log.empty() ? 0.0 : result.log.back().loss;
    report["theta"] = theta_path.string();
    write_json(outdir / "report.json", report);
    std::cout << "wrote " << theta_path.string() << "\n";
    return kExitOk;
}

struct CheckRow {
    std::string suite;
    std::string detail;
    bool pass = false;
};

int cmd_check(const std::string& suites_csv, bool mutate_adjoint, const fs::path& outdir) {
    std::vector<std::string> suites;
    {
        std::stringstream ss(suites_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (!tok.empty()) suites.push_back(tok);
        }
    }
    if (suites.empty()) {
        emit_error(outdir, "usage", "empty suite selection");
        return kExitUsage;
    }

    std::vector<CheckRow> rows;
    for (const auto& suite : suites) {
        CheckRow row;
        row.suite = suite;
        if (suite == "adjoint") {
            double worst = 0.0;
            const auto shape = std::vector<std::size_t>{1, 12, 12};
            std::vector<LinearOpPtr> ops;
            ops.push_back(std::make_shared<ValidConv2D>(gaussian_kernel(5, 1.2), shape));
            ops.push_back(std::make_shared<CFAMask>(12, 12));
            ops.push_back(make_subsampled_dft(dft_mask(12, 12, 0.5, 3)));
            auto conv = std::make_shared<ValidConv2D>(gaussian_kernel(3, 0.8), shape);
            ops.push_back(std::make_shared<ComposeOp>(
                std::make_shared<Decimation>(conv->output_shape(), 2, 2), conv));
            for (const auto& op : ops) worst = std::max(worst, adjoint_check(*op, 25));
            if (mutate_adjoint) {
                // deliberately broken adjoint, to prove the check detects it
                struct Broken final : LinearOp {
                    std::vector<std::size_t> input_shape() const override { return {8}; }
                    std::vector<std::size_t> output_shape() const override { return {8}; }
                    Tensor apply(const Tensor& v) const override {
                        Tensor o = v;
                        o *= 2.0;
                        return o;
                    }
                    Tensor apply_adjoint(const Tensor& u) const override {
                        Tensor o = u;
                        o *= 2.125;
                        return o;
                    }
                };
                worst = std::max(worst, adjoint_check(Broken{}, 25));
            }
            row.pass = worst <= 1e-10;
            row.detail = "max discrepancy " + std::to_string(worst);
        } else if (suite == "majorizer") {
            Rng rng(11);
            double worst_gap = 0.0, worst_tight = 0.0;
            for (int t = 0; t < 200; ++t) {
                PriorConfig prior;
                prior.family = t % 2 ? PriorFamily::LowRank : PriorFamily::Sparse;
                prior.p = 0.4 + 0.6 * rng.uniform();
                prior.gamma = 1e-5;
                const FilterBank G = make_directional_bank();
                Tensor x({3, 6, 6}), xk({3, 6, 6});
                for (auto& v : x.values()) v = rng.normal();
                for (auto& v : xk.values()) v = rng.normal();
                const double q = majorizer_eval(G, prior, x, xk);
                const double r = regularizer_eval(G, prior, x);
                const double q0 = majorizer_eval(G, prior, xk, xk);
                const double r0 = regularizer_eval(G, prior, xk);
                worst_gap = std::min(worst_gap, q - r);
                worst_tight = std::max(worst_tight, std::abs(q0 - r0));
            }
            row.pass = worst_gap >= -1e-10 && worst_tight <= 1e-10;
            row.detail = "min slack " + std::to_string(worst_gap) + ", tightness " +
                         std::to_string(worst_tight);
        } else if (suite == "equilibration") {
            const Fixture fx = make_fixture("deblur-sparse", 12);
            const FeatureField f = extract_features(fx.spec.G, fx.x0);
            const WeightField W = build_weights(f, fx.spec.prior);
            const DiagPrecond D =
                equilibrate(*fx.spec.A, fx.spec.G, W, fx.spec.prior.p, fx.spec.sigma_n,
                            fx.spec.alpha());
            const NormalSystem sys = assemble_normal_system(
                fx.spec, std::make_shared<WeightField>(W), fx.x0);
            Eigen::MatrixXd S(sys.op.dim, sys.op.dim);
            Eigen::VectorXd e = Eigen::VectorXd::Zero(sys.op.dim);
            for (Eigen::Index j = 0; j < sys.op.dim; ++j) {
                e[j] = 1.0;
                S.col(j) = sys.op.apply(e);
                e[j] = 0.0;
            }
            const Eigen::MatrixXd P = D.d.asDiagonal() * S * D.d.asDiagonal();
            const double diag_err = (P.diagonal().array() - 1.0).abs().maxCoeff();
            double off_max = 0.0;
            for (Eigen::Index i = 0; i < P.rows(); ++i)
                for (Eigen::Index j = 0; j < P.cols(); ++j)
                    if (i != j) off_max = std::max(off_max, std::abs(P(i, j)));
            row.pass = diag_err <= 1e-10 && off_max <= 1.0 + 1e-10;
            row.detail = "unit-diagonal error " + std::to_string(diag_err) +
                         ", max off-diagonal " + std::to_string(off_max);
        } else if (suite == "descent") {
            double worst = 0.0;
            for (const char* name : {"deblur-sparse", "demosaick-lowrank"}) {
                const Fixture fx = make_fixture(name, 16);
                IrlsSettings s;
                s.max_steps = 25;
                const IrlsResult res = run_irls(fx.spec, fx.x0, s);
                const auto& hist = res.state.objective_history;
                for (std::size_t i = 1; i < hist.size(); ++i)
                    worst = std::max(worst, hist[i] - hist[i - 1]);
            }
            row.pass = worst <= 1e-9;
            row.detail = "max objective increase " + std::to_string(worst);
        } else {
            emit_error(outdir, "usage", "unknown suite: " + suite);
            return kExitUsage;
        }
        rows.push_back(row);
    }

    bool all_pass = true;
    std::cout << std::left << std::setw(16) << "suite" << std::setw(8) << "result"
              << "detail\n";
    for (const auto& row : rows) {
        std::cout << std::left << std::setw(16) << row.suite << std::setw(8)
                  << (row.pass ? "PASS" : "FAIL") << row.detail << "\n";
        all_pass = all_pass && row.pass;
    }
    json report;
    for (const auto& row : rows)
        report["suites"][row.suite] = {{"pass", row.pass}, {"detail", row.detail}};
    write_json(outdir / "report.json", report);
    return all_pass ? kExitOk : kExitNumerical;
}

int cmd_grad_check(const Config& cfg, const fs::path& outdir) {
    AssembledProblem problem = assemble_problem(cfg);
    if (!problem.reference)
        throw ConfigError("grad-check requires a reference image as the loss target");
    const Tensor target = *problem.reference;

    ThetaParams theta;
    if (cfg.has("theta")) {
        theta = load_theta(cfg.str("theta"));
    } else {
        theta.family = problem.spec.prior.family;
        theta.filters = problem.spec.G.filters;
        theta.w_raw = Eigen::VectorXd::Constant(
            static_cast<Eigen::Index>(problem.spec.G.count()), softplus_inv(1.0));
        theta.weights_mode = cfg.flag("train.learn_weights", true) ? WeightsMode::Softplus
                                                                   : WeightsMode::FixedOnes;
        theta.p_mode = PMode::Fixed;
        theta.p_fixed = problem.spec.prior.p;
    }

    ProblemTemplate tmpl;
    tmpl.A = problem.spec.A;
    tmpl.y = problem.spec.y;
    tmpl.sigma_n = problem.spec.sigma_n;
    tmpl.delta = problem.spec.delta;
    tmpl.gamma = problem.spec.prior.gamma;

    IrlsSettings tight = problem.settings;
    tight.fp_rtol = std::min(tight.fp_rtol, 1e-9);
    tight.cg_rtol = std::min(tight.cg_rtol, 1e-12);
    tight.max_steps = std::max(tight.max_steps, 1500);
    tight.cg_maxiter = std::max(tight.cg_maxiter, 6000);

    const ProblemSpec spec = tmpl.instantiate(theta);
    const IrlsResult fwd = run_irls(spec, problem.x0, tight);
    if (!fwd.state.converged) {
        emit_error(outdir, "numerical",
                   "forward pass did not converge; residual " +
                       std::to_string(fwd.state.residual_history.back()));
        return kExitNumerical;
    }

    const LossGrad loss = loss_neg_psnr(fwd.x, target);
    BackwardSettings bw = problem.backward;
    bw.rtol = std::min(bw.rtol, 1e-10);
    bw.maxiter = std::max(bw.maxiter, 8000);
    const GradReport rep = backward_pass(tmpl, theta, fwd.x, loss.grad, bw);
    const ThetaGrad fd = fd_gradient(
        tmpl, theta, [&](const Tensor& x) { return loss_neg_psnr(x, target).value; },
        problem.x0, tight, 3e-4);

    std::vector<std::tuple<std::string, double, double>> entries;
    for (std::size_t i = 0; i < theta.filters.size(); ++i)
        entries.emplace_back("G[" + std::to_string(i) + "]", rep.grad.d_filters[i],
                             fd.d_filters[i]);
    if (theta.weights_mode != WeightsMode::FixedOnes)
        for (Eigen::Index j = 0; j < theta.w_raw.size(); ++j)
            entries.emplace_back("w_raw[" + std::to_string(j) + "]", rep.grad.d_w_raw[j],
                                 fd.d_w_raw[j]);
    if (theta.p_mode == PMode::LogisticInterval)
        entries.emplace_back("p_raw", rep.grad.d_p_raw, fd.d_p_raw);

    double scale = 0.0;
    for (const auto& [name, a, f] : entries) scale = std::max(scale, std::abs(f));
    double max_rel = 0.0;
    std::cout << std::left << std::setw(12) << "parameter" << std::setw(16) << "analytic"
              << std::setw(16) << "fd" << "rel_error\n"
              << std::setprecision(6);
    for (const auto& [name, a, f] : entries) {
        const double rel = std::abs(a - f) / std::max(std::abs(f), 1e-6 * scale + 1e-300);
        max_rel = std::max(max_rel, rel);
        std::cout << std::left << std::setw(12) << name << std::setw(16) << a << std::setw(16)
                  << f << rel << "\n";
    }
    json report;
    report["max_rel_error"] = max_rel;
    report["parameters"] = entries.size();
    write_json(outdir / "report.json", report);
    std::cout << "max relative error: " << max_rel << "\n";
    return max_rel <= 1e-3 ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"matrix-free IRLS image reconstruction"};
    app.require_subcommand(1);

    std::string config_path, out_dir = ".", suites = "adjoint,majorizer,equilibration,descent";
    std::vector<std::string> overrides;
    bool mutate_adjoint = false;

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* opt = sub->add_option("--config", config_path, "config file (key = value lines)");
        if (config_required) opt->required();
        sub->add_option("--override", overrides, "override config entries, key=value");
        sub->add_option("--out", out_dir, "output directory");
    };

    auto* rec = app.add_subcommand("reconstruct", "solve one inverse problem");
    add_common(rec, true);
    auto* tr = app.add_subcommand("train", "learn prior parameters on crops");
    add_common(tr, true);
    auto* ck = app.add_subcommand("check", "run the numerical property suites");
    add_common(ck, false);
    ck->add_option("--suites", suites, "comma-separated suite selection");
    ck->add_flag("--mutate-adjoint", mutate_adjoint, "inject a broken adjoint (self-test)");
    auto* gc = app.add_subcommand("grad-check", "implicit gradient vs finite differences");
    add_common(gc, true);

    CLI11_PARSE(app, argc, argv);

    const fs::path outdir(out_dir);
    try {
        std::error_code ec;
        fs::create_directories(outdir, ec);
        if (rec->parsed()) return cmd_reconstruct(load_config(config_path, overrides), outdir);
        if (tr->parsed()) return cmd_train(load_config(config_path, overrides), outdir);
        if (ck->parsed()) return cmd_check(suites, mutate_adjoint, outdir);
        if (gc->parsed()) return cmd_grad_check(load_config(config_path, overrides), outdir);
    } catch (const ConfigError& e) {
        emit_error(outdir, "config", e.what());
        return kExitUsage;
    } catch (const IoError& e) {
        emit_error(outdir, "io", e.what());
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        emit_error(outdir, "usage", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        emit_error(outdir, "numerical", e.what());
        return kExitNumerical;
    }
    return kExitUsage;
}
