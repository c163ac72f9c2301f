#include "cnnto/rng.hpp"
#include "cnnto/simp.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace cnnto {
namespace {

constexpr double kXmin = 1e-3;

struct Instance {
    DensityField x;
    SensitivityField s;
};

Instance random_instance(Rng& rng, int nelx, int nely, double vf) {
    GridMesh mesh(nelx, nely);
    Instance in{DensityField(mesh), SensitivityField{Eigen::MatrixXd(nely, nelx)}};
    for (int i = 0; i < in.x.size(); ++i) {
        in.x[i] = rng.uniform(kXmin, 1.0);
        in.s.values.data()[i] = -rng.uniform(1e-3, 10.0);
    }
    // rescale towards the volume target so the move limit can reach it
    in.x.values *= vf * in.x.size() / in.x.volume();
    in.x.values = in.x.values.cwiseMax(kXmin).cwiseMin(1.0);
    return in;
}

TEST(OcUpdate, UniformFieldIsAFixedPoint) {
    GridMesh mesh(4, 3);
    OcParams p;
    DensityField x(mesh, p.volume_fraction);
    SensitivityField s{Eigen::MatrixXd::Constant(3, 4, -2.5)};
    const auto out = oc_update(x, s, p, kXmin);
    EXPECT_LT((out.values - x.values).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(OcUpdate, ScaleInvariance) {
    Rng rng(1);
    OcParams p;
    for (int t = 0; t < 10; ++t) {
        auto in = random_instance(rng, 5, 4, p.volume_fraction);
        const auto ref = oc_update(in.x, in.s, p, kXmin, in.x.volume());
        for (double a : {1e-3, 7.3, 1e3}) {
            SensitivityField scaled{in.s.values * a};
            const auto out = oc_update(in.x, scaled, p, kXmin, in.x.volume());
            EXPECT_LT((out.values - ref.values).cwiseAbs().maxCoeff(), 1e-9) << a;
        }
    }
}

// Brute-force scan over lambda on a fine log grid (step 1e-6 in log10),
// keeping the lambda whose volume is closest to the target.
DensityField lambda_scan(const DensityField& x, const SensitivityField& s, const OcParams& p, double target) {
    DensityField best;
    double best_err = 1e300;
    for (double e = -4.0; e <= 4.0; e += 1e-6) {
        const auto y = oc_apply(x, s, std::pow(10.0, e), p, kXmin);
        const double err = std::abs(y.volume() - target);
        if (err < best_err) {
            best_err = err;
            best = y;
        }
    }
    return best;
}

TEST(OcUpdate, MatchesLambdaScanOn2x2) {
    GridMesh mesh(2, 2);
    DensityField x(mesh);
    x.values << 0.5, 0.4, 0.6, 0.5;
    SensitivityField s{Eigen::MatrixXd(2, 2)};
    s.values << -1.0, -3.0, -0.5, -2.0;
    OcParams p;
    const auto out = oc_update(x, s, p, kXmin);
    const auto ref = lambda_scan(x, s, p, p.volume_fraction * 4);
    EXPECT_LT((out.values - ref.values).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_NEAR(out.volume(), 2.0, 1e-4 * 4);
}

TEST(BisectLambda, SingleElementClosedForm) {
    // 0.5 * (4 / L)^0.5 = 0.5  =>  L = 4
    GridMesh mesh(1, 1);
    DensityField x(mesh, 0.5);
    SensitivityField s{Eigen::MatrixXd::Constant(1, 1, -4.0)};
    OcParams p;
    const double lambda = bisect_lambda(x, s, p, kXmin, 0.5);
    EXPECT_NEAR(lambda, 4.0, 1e-6);
}

TEST(BisectLambda, VolumeIsNonIncreasingInLambda) {
    Rng rng(4);
    OcParams p;
    for (int t = 0; t < 20; ++t) {
        auto in = random_instance(rng, 4, 4, 0.4);
        double lambda = 1e-4;
        double prev = oc_apply(in.x, in.s, lambda, p, kXmin).volume();
        for (int k = 0; k < 40; ++k) {
            lambda *= 2.0;
            const double v = oc_apply(in.x, in.s, lambda, p, kXmin).volume();
            EXPECT_LE(v, prev);
            prev = v;
        }
    }
}

TEST(BisectLambda, HitsTargetWithinTolerance) {
    Rng rng(5);
    OcParams p;
    for (int t = 0; t < 20; ++t) {
        auto in = random_instance(rng, 6, 5, p.volume_fraction);
        const double target = in.x.volume();
        const double l = bisect_lambda(in.x, in.s, p, kXmin, target);
        EXPECT_GT(l, 0.0);
        EXPECT_LE(std::abs(oc_apply(in.x, in.s, l, p, kXmin).volume() - target), 1e-4 * in.x.size());
    }
}

TEST(BisectLambda, UnreachableTargetIsABracketError) {
    GridMesh mesh(2, 2);
    DensityField x(mesh, 0.1);
    SensitivityField s{Eigen::MatrixXd::Constant(2, 2, -1.0)};
    OcParams p;  // move limit 0.2 caps the volume at 4 * 0.3
    EXPECT_THROW(bisect_lambda(x, s, p, kXmin, 3.5), BracketError);
}

TEST(OcUpdate, DegenerateAndInvalidSensitivities) {
    GridMesh mesh(2, 2);
    DensityField x(mesh, 0.5);
    OcParams p;
    EXPECT_THROW(oc_update(x, SensitivityField{Eigen::MatrixXd::Zero(2, 2)}, p, kXmin), DegenerateInputError);
    SensitivityField pos{Eigen::MatrixXd::Constant(2, 2, -1.0)};
    pos.values(0, 0) = 0.5;
    EXPECT_THROW(oc_update(x, pos, p, kXmin), InputError);
    EXPECT_THROW(oc_update(x, SensitivityField{Eigen::MatrixXd::Constant(3, 2, -1.0)}, p, kXmin), InputError);
}

TEST(OcUpdate, MoveLimitBoxAndVolumeProperties) {
    Rng rng(6);
    for (int t = 0; t < 50; ++t) {
        OcParams p;
        p.move_limit = rng.uniform(0.05, 0.5);
        p.eta = rng.uniform(0.2, 1.0);
        auto in = random_instance(rng, 5, 5, p.volume_fraction);
        const double target = in.x.volume();
        const auto out = oc_update(in.x, in.s, p, kXmin, target);
        EXPECT_LE(std::abs(out.volume() - target), 1e-4 * out.size());
        for (int i = 0; i < out.size(); ++i) {
            EXPECT_LE(std::abs(out[i] - in.x[i]), p.move_limit + 1e-12);
            EXPECT_GE(out[i], kXmin);
            EXPECT_LE(out[i], 1.0);
        }
        const auto again = oc_update(in.x, in.s, p, kXmin, target);
        EXPECT_TRUE(again.values == out.values);
    }
}

TEST(RunSimp, ZeroIterationsReturnsInitial) {
    GridMesh mesh(8, 4);
    FemProblem prob{mesh, MaterialParams{}, cantilever_left_clamp_tip_load(mesh)};
    OcParams p;
    p.max_iters = 0;
    const auto init = uniform_density(mesh, p.volume_fraction);
    const auto r = run_simp(prob, p, init);
    EXPECT_TRUE(r.density.values == init.values);
    ASSERT_EQ(r.trace.records.size(), 1u);
    EXPECT_EQ(r.trace.records[0].iteration, 0);
    EXPECT_NEAR(r.trace.records[0].compliance, prob.compliance_of(init), 1e-12);
}

TEST(RunSimp, RejectsInitialOffTheVolumeTarget) {
    GridMesh mesh(4, 4);
    FemProblem prob{mesh, MaterialParams{}, cantilever_left_clamp_tip_load(mesh)};
    EXPECT_THROW(run_simp(prob, OcParams{}, uniform_density(mesh, 0.8)), InputError);
}

TEST(RunSimp, SmallCantileverDecreasesComplianceAndKeepsVolume) {
    GridMesh mesh(16, 8);
    FemProblem prob{mesh, MaterialParams{}, cantilever_left_clamp_tip_load(mesh)};
    OcParams p;
    LoopOptions opt;
    opt.snapshot_all = true;
    const auto r = run_simp(prob, p, uniform_density(mesh, p.volume_fraction), opt);
    EXPECT_LT(r.trace.final().compliance, r.trace.initial().compliance / 2.0);
    EXPECT_LE(r.trace.updates(), p.max_iters);
    for (const auto& [k, snap] : r.trace.snapshots)
        EXPECT_LE(std::abs(snap.volume() - p.volume_fraction * mesh.element_count()), 1e-3 * mesh.element_count());
    for (std::size_t i = 0; i < r.trace.records.size(); ++i) EXPECT_EQ(r.trace.records[i].iteration, int(i));
}

TEST(RunSimp, SingularProblemReportsIterationContext) {
    GridMesh mesh(4, 4);
    BoundaryConditions bc;
    bc.fixed_dofs = {0};
    bc.loads[2 * mesh.node(4, 4) + 1] = 1.0;
    FemProblem prob{mesh, MaterialParams{}, bc};
    try {
        run_simp(prob, OcParams{}, uniform_density(mesh, 0.5));
        FAIL() << "expected SingularSystemError";
    } catch (const SingularSystemError& e) {
        EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos);
    }
}

TEST(TraceCsv, HeaderAndRows) {
    OptimizationTrace t;
    t.records.push_back({0, 2.5, 8.0, 0.0});
    t.records.push_back({1, 1.25, 8.0, 0.2});
    EXPECT_EQ(trace_to_csv(t), "iter,compliance,volume,linf_change\n0,2.5,8,0\n1,1.25,8,0.20000000000000001\n");
}

TEST(ThresholdBinarize, Semantics) {
    GridMesh mesh(2, 1);
    DensityField x(mesh);
    x.values << 0.49, 0.50;
    const auto b = threshold_binarize(x, 0.5);
    EXPECT_EQ(b(0, 0), 0.0);
    EXPECT_EQ(b(0, 1), 1.0);
    EXPECT_TRUE(b.binary);
    EXPECT_THROW(threshold_binarize(x, 0.0), InputError);
    EXPECT_THROW(threshold_binarize(x, 1.5), InputError);
}

TEST(ThresholdBinarize, XminGivesAllOnesAndBinaryIsIdempotent) {
    Rng rng(8);
    GridMesh mesh(5, 4);
    DensityField x(mesh);
    for (int i = 0; i < x.size(); ++i) x[i] = rng.uniform(kXmin, 1.0);
    x[3] = kXmin;
    EXPECT_EQ(threshold_binarize(x, kXmin).volume(), x.size());
    const auto b = threshold_binarize(x, 0.5);
    for (double l : {0.01, 0.3, 1.0}) EXPECT_TRUE(threshold_binarize(b, l).values == b.values);
    for (int i = 0; i < x.size(); ++i) EXPECT_EQ(b[i], x[i] >= 0.5 ? 1.0 : 0.0);
}

TEST(ChooseThreshold, FourValues) {
    GridMesh mesh(4, 1);
    DensityField x(mesh);
    x.values << 0.1, 0.4, 0.8, 0.9;
    const double l = choose_threshold(x, 2.0);
    EXPECT_GT(l, 0.4);
    EXPECT_LE(l, 0.8);
    EXPECT_EQ(threshold_binarize(x, l).volume(), 2.0);
    EXPECT_LE(choose_threshold(x, 4.0), 0.1);
    EXPECT_EQ(threshold_binarize(x, choose_threshold(x, 4.0)).volume(), 4.0);
}

TEST(ChooseThreshold, MatchesExhaustiveScan) {
    Rng rng(9);
    for (int t = 0; t < 100; ++t) {
        GridMesh mesh(rng.uniform_int(1, 6), rng.uniform_int(1, 6));
        DensityField x(mesh);
        for (int i = 0; i < x.size(); ++i) x[i] = std::round(rng.uniform(kXmin, 1.0) * 8.0) / 8.0 + kXmin;
        x.values = x.values.cwiseMin(1.0);
        const double target = rng.uniform(0.5, x.size());
        // every threshold on a fine grid is a candidate
        double best = 1e300;
        for (int k = 1; k <= 10000; ++k)
            best = std::min(best, std::abs(threshold_binarize(x, k / 10000.0).volume() - target));
        const double got = std::abs(threshold_binarize(x, choose_threshold(x, target)).volume() - target);
        EXPECT_LE(got, best + 1e-12);
    }
}

}  // namespace
}  // namespace cnnto
