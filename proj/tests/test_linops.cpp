#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Eigenvalues>

#include "irlsrec/linop.hpp"
#include "irlsrec/operators.hpp"
#include "irlsrec/rng.hpp"
#include "irlsrec/synth.hpp"
#include "oracles.hpp"

using namespace irlsrec;

namespace {

Tensor random_input(const LinearOp& op, Rng& rng) {
    Tensor v(op.input_shape());
    for (auto& x : v.values()) x = rng.normal();
    return v;
}

// all operators exercised by the suite, at small sizes
std::vector<std::pair<std::string, LinearOpPtr>> shipped_operators() {
    std::vector<std::pair<std::string, LinearOpPtr>> ops;
    const std::vector<std::size_t> gray{1, 10, 10}, rgb{3, 10, 10};
    Rng rng(21);
    Tensor kernel({3, 3});
    for (auto& v : kernel.values()) v = rng.normal();

    ops.emplace_back("identity", std::make_shared<IdentityOp>(gray));
    ops.emplace_back("scale", std::make_shared<ScaleOp>(-1.7, gray));
    ops.emplace_back("conv", std::make_shared<ValidConv2D>(kernel, rgb));
    ops.emplace_back("decimation", std::make_shared<Decimation>(gray, 2, 2));
    ops.emplace_back("cfa", std::make_shared<CFAMask>(10, 10));
    ops.emplace_back("dft", make_subsampled_dft(dft_mask(10, 10, 0.5, 4)));
    auto conv = std::make_shared<ValidConv2D>(kernel, gray);
    ops.emplace_back("conv+decimation",
                     std::make_shared<ComposeOp>(
                         std::make_shared<Decimation>(conv->output_shape(), 2, 2), conv));
    ops.emplace_back("sum", std::make_shared<SumOp>(std::make_shared<IdentityOp>(gray),
                                                    std::make_shared<ScaleOp>(0.5, gray)));
    return ops;
}

}  // namespace

TEST_CASE("apply basics") {
    Rng rng(1);
    IdentityOp id({1, 4, 4});
    const Tensor v = random_input(id, rng);
    CHECK(norm2(id.apply(v) - v) == 0.0);

    // 1x1 kernel [2] scales the image
    ValidConv2D scale2(Tensor({1, 1}, {2.0}), {1, 4, 4});
    Tensor doubled = v;
    doubled *= 2.0;
    CHECK(norm2(scale2.apply(v) - doubled) <= 1e-15);

    CHECK_THROWS_AS(id.apply(Tensor({1, 3, 3})), std::invalid_argument);
}

TEST_CASE("decimation adjoint interleaves zeros and composes to identity") {
    Decimation dec({1, 6, 6}, 2, 2);
    Rng rng(3);
    Tensor coarse(dec.output_shape());
    for (auto& v : coarse.values()) v = rng.normal();
    const Tensor up = dec.apply_adjoint(coarse);
    CHECK(norm2(dec.apply(up) - coarse) == 0.0);  // D D' = I on the coarse grid
    double mass_up = 0.0, mass_coarse = 0.0;
    for (double v : up.values()) mass_up += v * v;
    for (double v : coarse.values()) mass_coarse += v * v;
    CHECK(mass_up == doctest::Approx(mass_coarse));
    CHECK(up.at3(0, 1, 0) == 0.0);
    CHECK(up.at3(0, 0, 1) == 0.0);
}

TEST_CASE("every shipped operator passes the adjoint and densify oracles") {
    Rng rng(17);
    for (const auto& [name, op] : shipped_operators()) {
        CAPTURE(name);
        CHECK(adjoint_check(*op, 100) <= 1e-10);

        const Eigen::MatrixXd M = densify(*op);
        const Tensor v = random_input(*op, rng);
        const Eigen::VectorXd direct = op->apply(v).vec();
        const Eigen::VectorXd via_dense = M * v.vec();
        CHECK((direct - via_dense).norm() <= 1e-12 * (1.0 + via_dense.norm()));

        Tensor u(op->output_shape());
        for (auto& x : u.values()) x = rng.normal();
        const Eigen::VectorXd adj = op->apply_adjoint(u).vec();
        const Eigen::VectorXd adj_dense = M.transpose() * u.vec();
        CHECK((adj - adj_dense).norm() <= 1e-12 * (1.0 + adj_dense.norm()));
    }
}

TEST_CASE("hadamard squares equal the densified elementwise-squared matrix") {
    Rng rng(29);
    for (const auto& [name, op] : shipped_operators()) {
        if (name == "sum") continue;  // no exact square rule, by design
        CAPTURE(name);
        const auto sq = op->hadamard_square();
        const Eigen::MatrixXd M2 = densify(*op).array().square().matrix();
        const Tensor v = random_input(*op, rng);
        const Eigen::VectorXd direct = sq->apply(v).vec();
        CHECK((direct - M2 * v.vec()).norm() <= 1e-12 * (1.0 + direct.norm()));
        Tensor u(op->output_shape());
        for (auto& x : u.values()) x = rng.normal();
        const Eigen::VectorXd adj = sq->apply_adjoint(u).vec();
        CHECK((adj - M2.transpose() * u.vec()).norm() <= 1e-12 * (1.0 + adj.norm()));
    }
}

TEST_CASE("cfa square equals the operator itself") {
    CFAMask cfa(8, 8);
    Rng rng(31);
    Tensor v({3, 8, 8});
    for (auto& x : v.values()) x = rng.normal();
    CHECK(norm2(cfa.hadamard_square()->apply(v) - cfa.apply(v)) == 0.0);
}

TEST_CASE("dft square on the ones vector returns the sampling rate") {
    const Tensor mask = dft_mask(8, 8, 0.4, 9);
    auto dft = make_subsampled_dft(mask);
    const double rate = static_cast<double>(dft->sampled_bins()) / 64.0;
    Tensor ones({1, 8, 8});
    for (auto& v : ones.values()) v = 1.0;
    // adjoint-side ones give the squared column norms m/n
    const Tensor cols = dft->hadamard_square()->apply_adjoint([&] {
        Tensor u({dft->sampled_bins()});
        for (auto& v : u.values()) v = 1.0;
        return u;
    }());
    for (std::size_t i = 0; i < cols.size(); ++i)
        CHECK(cols[i] == doctest::Approx(rate).epsilon(1e-12));
}

TEST_CASE("subsampled dft rows are orthonormal and A'A is a projection") {
    auto dft = make_subsampled_dft(dft_mask(8, 8, 0.5, 5));
    const Eigen::MatrixXd A = densify(*dft);
    const Eigen::MatrixXd AAt = A * A.transpose();
    CHECK((AAt - Eigen::MatrixXd::Identity(AAt.rows(), AAt.cols())).norm() <= 1e-12 * AAt.rows());

    // column norms all equal m/n
    const double rate = static_cast<double>(dft->sampled_bins()) / 64.0;
    for (Eigen::Index j = 0; j < A.cols(); ++j)
        CHECK(A.col(j).squaredNorm() == doctest::Approx(rate).epsilon(1e-12));

    const Eigen::MatrixXd P = A.transpose() * A;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(P);
    for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
        const double lambda = eig.eigenvalues()[i];
        CHECK(std::min(std::abs(lambda), std::abs(lambda - 1.0)) <= 1e-12);
    }
}

TEST_CASE("1d-style densify examples") {
    const Eigen::MatrixXd I4 = densify(IdentityOp({1, 1, 4}));
    CHECK((I4 - Eigen::MatrixXd::Identity(4, 4)).norm() == 0.0);

    const Eigen::MatrixXd D = densify(Decimation({1, 1, 4}, 1, 2));
    Eigen::MatrixXd expected = Eigen::MatrixXd::Zero(2, 4);
    expected(0, 0) = 1.0;
    expected(1, 2) = 1.0;
    CHECK((D - expected).norm() == 0.0);
}

TEST_CASE("composition of conv and decimation equals the dense product") {
    Rng rng(41);
    Tensor kernel({3, 3});
    for (auto& v : kernel.values()) v = rng.normal();
    auto conv = std::make_shared<ValidConv2D>(kernel, std::vector<std::size_t>{1, 9, 9});
    auto decim = std::make_shared<Decimation>(conv->output_shape(), 2, 2);
    ComposeOp both(decim, conv);
    const Eigen::MatrixXd dense = densify(*decim) * densify(*conv);
    CHECK((densify(both) - dense).norm() <= 1e-13 * dense.norm());
}

TEST_CASE("random operator compositions keep passing the adjoint test") {
    Rng rng(55);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor kernel({1 + rng.integer(3), 1 + rng.integer(3)});
        for (auto& v : kernel.values()) v = rng.normal();
        auto conv = std::make_shared<ValidConv2D>(kernel, std::vector<std::size_t>{1, 12, 12});
        LinearOpPtr op = conv;
        if (rng.uniform() < 0.5)
            op = std::make_shared<ComposeOp>(
                std::make_shared<Decimation>(op->output_shape(), 1 + rng.integer(2),
                                             1 + rng.integer(2)),
                op);
        if (rng.uniform() < 0.5) op = std::make_shared<ScaleOp>(rng.normal(), op);
        if (rng.uniform() < 0.5) op = std::make_shared<SumOp>(op, std::make_shared<ScaleOp>(0.3, op));
        CHECK(adjoint_check(*op, 10, 1000 + trial) <= 1e-10);
    }
}

TEST_CASE("adjoint_check flags a broken adjoint") {
    CHECK(adjoint_check(IdentityOp({4}), 10) == 0.0);

    struct Broken final : LinearOp {
        std::vector<std::size_t> input_shape() const override { return {6}; }
        std::vector<std::size_t> output_shape() const override { return {6}; }
        Tensor apply(const Tensor& v) const override {
            Tensor o = v;
            o *= 2.0;
            return o;
        }
        Tensor apply_adjoint(const Tensor& u) const override {
            Tensor o = u;
            o *= 2.01;
            return o;
        }
    };
    CHECK(adjoint_check(Broken{}, 10) > 1e-3);
    CHECK_THROWS_AS(adjoint_check(IdentityOp({4}), 0), std::invalid_argument);
}

TEST_CASE("densify refuses oversized instances") {
    CHECK_THROWS_AS(densify(IdentityOp({4000, 4000})), std::invalid_argument);
}

TEST_CASE("compose square rule applies only with an entrywise factor") {
    Rng rng(77);
    Tensor k1({2, 2}), k2({2, 2});
    for (auto& v : k1.values()) v = rng.normal();
    for (auto& v : k2.values()) v = rng.normal();
    auto c1 = std::make_shared<ValidConv2D>(k1, std::vector<std::size_t>{1, 6, 6});
    auto c2 = std::make_shared<ValidConv2D>(k2, c1->output_shape());
    ComposeOp conv_conv(c2, c1);
    CHECK_THROWS_AS(conv_conv.hadamard_square(), std::logic_error);

    SumOp s(std::make_shared<IdentityOp>(std::vector<std::size_t>{4}),
            std::make_shared<IdentityOp>(std::vector<std::size_t>{4}));
    CHECK_THROWS_AS(s.hadamard_square(), std::logic_error);
}

TEST_CASE("subsampled dft on odd extents") {
    auto dft = make_subsampled_dft(dft_mask(7, 9, 0.5, 13));
    CHECK(adjoint_check(*dft, 50) <= 1e-10);
    const Eigen::MatrixXd A = densify(*dft);
    const Eigen::MatrixXd AAt = A * A.transpose();
    CHECK((AAt - Eigen::MatrixXd::Identity(AAt.rows(), AAt.cols())).norm() <= 1e-12 * AAt.rows());
    const Eigen::MatrixXd M2 = densify(*dft->hadamard_square());
    CHECK((M2 - A.array().square().matrix()).norm() <= 1e-12);
}

TEST_CASE("decimation with a phase offset") {
    Decimation dec({1, 7, 7}, 2, 3, 1, 2);
    CHECK(adjoint_check(dec, 50) <= 1e-12);
    Rng rng(91);
    Tensor v({1, 7, 7});
    for (auto& x : v.values()) x = rng.normal();
    const Tensor out = dec.apply(v);
    CHECK(out.extent(1) == 3);  // rows 1,3,5
    CHECK(out.extent(2) == 2);  // cols 2,5
    CHECK(out.at3(0, 0, 0) == v.at3(0, 1, 2));
    CHECK(out.at3(0, 2, 1) == v.at3(0, 5, 5));
}

TEST_CASE("dft mask validation") {
    Tensor bad({4, 4});
    bad.at2(1, 1) = 1.0;  // mirror bin (3,3) not set
    CHECK_THROWS_AS(make_subsampled_dft(bad), std::invalid_argument);

    Tensor nonbinary({4, 4});
    nonbinary.at2(0, 0) = 0.5;
    CHECK_THROWS_AS(make_subsampled_dft(nonbinary), std::invalid_argument);
}
