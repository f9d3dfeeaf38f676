// Copyright Contributors to the cosplat project
// SPDX-License-Identifier: Apache-2.0

#include "cosplat/scene.hpp"

#include "test_utils.hpp"

#include <gtest/gtest.h>

using namespace cosplat;

namespace {

Vec4 axis_angle_quat(const Vec3& axis, double angle) {
    const Vec3 a = axis.normalized();
    Vec4 q;
    q[0] = std::cos(angle / 2);
    q.tail<3>() = a * std::sin(angle / 2);
    return q;
}

TEST(Covariance, IdentityCase) {
    const Mat3 cov = build_covariance(Vec3(1, 1, 1), Vec4(1, 0, 0, 0)).matrix;
    EXPECT_LT((cov - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Covariance, DiagonalSquaring) {
    const Mat3 cov = build_covariance(Vec3(2, 1, 1), Vec4(1, 0, 0, 0)).matrix;
    EXPECT_LT((cov - Vec3(4, 1, 1).asDiagonal().toDenseMatrix()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Covariance, RotatedMatchesComposedMatrices) {
    const Vec3 scale(1, 2, 3);
    const Vec4 q = axis_angle_quat(Vec3(0, 0, 1), M_PI / 2);
    const Mat3 cov = build_covariance(scale, q).matrix;

    // oracle: compose R * S * S^T * R^T with an independently built R
    Mat3 rot;
    rot = Eigen::AngleAxisd(M_PI / 2, Vec3::UnitZ()).toRotationMatrix();
    const Mat3 expect = rot * Vec3(1, 4, 9).asDiagonal() * rot.transpose();
    EXPECT_LT((cov - expect).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((cov - Vec3(4, 1, 9).asDiagonal().toDenseMatrix()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Covariance, SymmetricPositiveSemidefinite) {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const Vec3 scale(rng.uniform(0.01, 3), rng.uniform(0.01, 3), rng.uniform(0.01, 3));
        const Vec4 q = rng.unit_quaternion();
        const Mat3 cov = build_covariance(scale, q).matrix;
        EXPECT_LT((cov - cov.transpose()).cwiseAbs().maxCoeff(), 1e-9);
        Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
        EXPECT_GE(es.eigenvalues().minCoeff(), -1e-12);
    }
}

TEST(Covariance, QuaternionSignFlipInvariance) {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const Vec3 scale(rng.uniform(0.1, 2), rng.uniform(0.1, 2), rng.uniform(0.1, 2));
        const Vec4 q = rng.unit_quaternion();
        const Mat3 a = build_covariance(scale, q).matrix;
        const Mat3 b = build_covariance(scale, Vec4(-q)).matrix;
        EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Covariance, RejectsNonFiniteInput) {
    EXPECT_THROW(build_covariance(Vec3(1, std::nan(""), 1), Vec4(1, 0, 0, 0)),
                 std::invalid_argument);
    EXPECT_THROW(build_covariance(Vec3(1, -1, 1), Vec4(1, 0, 0, 0)), std::invalid_argument);
}

TEST(EvalGaussian, OneAtMean) {
    GaussianPrimitive g;
    g.mean = Vec3(0.3, -0.2, 1.0);
    g.scale = Vec3(0.5, 1.0, 2.0);
    EXPECT_DOUBLE_EQ(eval_gaussian(g, g.mean), 1.0);
}

TEST(EvalGaussian, IsotropicUnitDistance) {
    GaussianPrimitive g;
    for (const Vec3& axis : {Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)}) {
        EXPECT_NEAR(eval_gaussian(g, g.mean + axis), std::exp(-0.5), 1e-15);
    }
}

TEST(EvalGaussian, MatchesDenseInverseOracle) {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        GaussianPrimitive g;
        g.mean = rng.uniform_vec3(-1, 1);
        g.scale = Vec3(rng.uniform(0.2, 2), rng.uniform(0.2, 2), rng.uniform(0.2, 2));
        g.rotation = rng.unit_quaternion();
        const Vec3 x = rng.uniform_vec3(-2, 2);

        const Mat3 sigma = build_covariance(g.scale, g.rotation).matrix;
        // explicit adjugate-based 3x3 inverse as the oracle
        Mat3 inv;
        const double det =
            sigma(0, 0) * (sigma(1, 1) * sigma(2, 2) - sigma(1, 2) * sigma(2, 1)) -
            sigma(0, 1) * (sigma(1, 0) * sigma(2, 2) - sigma(1, 2) * sigma(2, 0)) +
            sigma(0, 2) * (sigma(1, 0) * sigma(2, 1) - sigma(1, 1) * sigma(2, 0));
        inv(0, 0) = (sigma(1, 1) * sigma(2, 2) - sigma(1, 2) * sigma(2, 1)) / det;
        inv(0, 1) = (sigma(0, 2) * sigma(2, 1) - sigma(0, 1) * sigma(2, 2)) / det;
        inv(0, 2) = (sigma(0, 1) * sigma(1, 2) - sigma(0, 2) * sigma(1, 1)) / det;
        inv(1, 0) = (sigma(1, 2) * sigma(2, 0) - sigma(1, 0) * sigma(2, 2)) / det;
        inv(1, 1) = (sigma(0, 0) * sigma(2, 2) - sigma(0, 2) * sigma(2, 0)) / det;
        inv(1, 2) = (sigma(0, 2) * sigma(1, 0) - sigma(0, 0) * sigma(1, 2)) / det;
        inv(2, 0) = (sigma(1, 0) * sigma(2, 1) - sigma(1, 1) * sigma(2, 0)) / det;
        inv(2, 1) = (sigma(0, 1) * sigma(2, 0) - sigma(0, 0) * sigma(2, 1)) / det;
        inv(2, 2) = (sigma(0, 0) * sigma(1, 1) - sigma(0, 1) * sigma(1, 0)) / det;
        const Vec3 d = x - g.mean;
        const double expect = std::exp(-0.5 * d.dot(inv * d));
        EXPECT_NEAR(eval_gaussian(g, x), expect, 1e-12);
    }
}

TEST(EvalGaussian, RigidRotationInvariance) {
    Rng rng(14);
    for (int trial = 0; trial < 50; ++trial) {
        GaussianPrimitive g;
        g.mean = rng.uniform_vec3(-1, 1);
        g.scale = Vec3(rng.uniform(0.2, 2), rng.uniform(0.2, 2), rng.uniform(0.2, 2));
        g.rotation = rng.unit_quaternion();
        const Vec3 x = rng.uniform_vec3(-2, 2);
        const double before = eval_gaussian(g, x);

        const Vec4 qr = rng.unit_quaternion();
        const Mat3 rot = quat_to_rotmat(qr);
        GaussianPrimitive g2 = g;
        g2.mean = rot * g.mean;
        // rotate the orientation by quaternion product qr * q
        const Vec4 a = qr, b = g.rotation;
        g2.rotation = Vec4(
            a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
        EXPECT_NEAR(eval_gaussian(g2, rot * x), before, 1e-9);
    }
}

TEST(EvalGaussian, SingularCovarianceThrows) {
    GaussianPrimitive g;
    g.scale = Vec3(1e-160, 1e-160, 1e-160);
    EXPECT_THROW(eval_gaussian(g, Vec3(0.1, 0, 0)), std::runtime_error);
}

TEST(Anchors, SpawnExamples) {
    AnchorSet a;
    a.resize(1, 3, 4);
    a.positions.col(0) = Vec3(1, 0, 0);

    // all offsets zero -> every mean equals the anchor position
    for (const Vec3& mu : spawn_gaussians(a, 0)) {
        EXPECT_EQ(mu, Vec3(1, 0, 0));
    }

    // near-zero anchor scale
    a.offsets.col(0) = Vec3(5, -3, 2);
    a.log_anchor_scale[0] = std::log(1e-8);
    EXPECT_LT((a.spawn_position(0, 0) - Vec3(1, 0, 0)).norm(), 1e-7);

    // plain arithmetic
    a.offsets.col(0) = Vec3(0, 1, 0);
    a.log_anchor_scale[0] = std::log(2.0);
    EXPECT_LT((a.spawn_position(0, 0) - Vec3(1, 2, 0)).norm(), 1e-14);
}

TEST(Anchors, TranslationEquivariance) {
    Rng rng(15);
    AnchorSet a;
    a.resize(1, 4, 4);
    a.positions.col(0) = rng.uniform_vec3(-1, 1);
    for (int i = 0; i < 4; ++i) a.offsets.col(i) = rng.uniform_vec3(-1, 1);
    a.log_anchor_scale[0] = rng.uniform(-1, 1);

    const Vec3 t = rng.uniform_vec3(-5, 5);
    AnchorSet b = a;
    b.positions.col(0) += t;
    for (int i = 0; i < 4; ++i) {
        EXPECT_LT((b.spawn_position(0, i) - (a.spawn_position(0, i) + t)).norm(),
                  1e-12 * (1 + t.norm()));
    }
}

TEST(Anchors, OffsetScaleTradeInvariance) {
    Rng rng(16);
    AnchorSet a;
    a.resize(1, 4, 4);
    a.positions.col(0) = rng.uniform_vec3(-1, 1);
    for (int i = 0; i < 4; ++i) a.offsets.col(i) = rng.uniform_vec3(-1, 1);
    a.log_anchor_scale[0] = rng.uniform(-0.5, 0.5);

    const double c = rng.uniform(0.5, 3.0);
    AnchorSet b = a;
    b.offsets *= c;
    b.log_anchor_scale[0] -= std::log(c);
    for (int i = 0; i < 4; ++i) {
        EXPECT_LT((b.spawn_position(0, i) - a.spawn_position(0, i)).norm(), 1e-10);
    }
}

TEST(SceneBounds, ProjectToPlaneExamples) {
    SceneBounds unit;
    unit.aabb_min = Vec3::Zero();
    unit.aabb_max = Vec3::Ones();

    EXPECT_EQ(project_to_plane(Vec3(0.5, 0.5, 0.5), PlaneAxis::XY, unit), Vec2(0.5, 0.5));
    for (auto plane : {PlaneAxis::XY, PlaneAxis::XZ, PlaneAxis::YZ}) {
        EXPECT_EQ(project_to_plane(unit.aabb_min, plane, unit), Vec2(0, 0));
    }
}

TEST(SceneBounds, OutOfBoundsClampsBeforeProjecting) {
    Rng rng(17);
    SceneBounds b;
    b.aabb_min = Vec3(-1, -2, 0);
    b.aabb_max = Vec3(3, 2, 1);
    for (int trial = 0; trial < 200; ++trial) {
        Vec3 p = rng.uniform_vec3(-2.5, 4.5);
        const Vec2 got = project_to_plane(p, PlaneAxis::XZ, b);
        // clamp-then-project oracle
        Vec3 q = p.cwiseMax(b.aabb_min).cwiseMin(b.aabb_max);
        const Vec2 expect((q.x() - b.aabb_min.x()) / (b.aabb_max.x() - b.aabb_min.x()),
                          (q.z() - b.aabb_min.z()) / (b.aabb_max.z() - b.aabb_min.z()));
        EXPECT_LT((got - expect).norm(), 1e-15);
    }
    const Vec2 edge = project_to_plane(Vec3(3.1, 0, 0.5), PlaneAxis::XY, b);
    EXPECT_DOUBLE_EQ(edge.x(), 1.0);
}

TEST(SceneBounds, DegenerateExtentThrows) {
    SceneBounds b;
    b.aabb_min = Vec3(0, 0, 0);
    b.aabb_max = Vec3(1, 0, 1); // zero extent on y
    EXPECT_THROW(project_to_plane(Vec3(0.5, 0, 0.5), PlaneAxis::XY, b), std::runtime_error);
}

TEST(SceneBounds, MarginAndSigma) {
    Mat3X pts(3, 2);
    pts.col(0) = Vec3(0, 0, 0);
    pts.col(1) = Vec3(2, 4, 6);
    const SceneBounds b = SceneBounds::from_points(pts, 0.05);
    EXPECT_LT((b.aabb_min - Vec3(-0.1, -0.2, -0.3)).norm(), 1e-12);
    EXPECT_LT((b.aabb_max - Vec3(2.1, 4.2, 6.3)).norm(), 1e-12);
    EXPECT_LT((b.centroid - Vec3(1, 2, 3)).norm(), 1e-12);
    EXPECT_NEAR(b.spatial_sigma, Vec3(1, 2, 3).norm(), 1e-12);
}

}  // namespace
