// Copyright Contributors to the cosplat project
// SPDX-License-Identifier: Apache-2.0
//
// Scene-domain types shared by every module: Gaussian primitives and their
// raw (pre-activation) parameterization, anchors with learnable offsets,
// pinhole cameras and scene bounds.

#pragma once

#include "cosplat/core.hpp"

#include <array>
#include <cstdint>
#include <optional>

namespace cosplat {

// ---------------------------------------------------------------------------
// Gaussian primitives
// ---------------------------------------------------------------------------

// Activated (render-ready) attributes of one Gaussian.
struct GaussianPrimitive {
    Vec3 mean = Vec3::Zero();
    Vec3 scale = Vec3::Ones();        // strictly positive
    Vec4 rotation = Vec4(1, 0, 0, 0); // unit quaternion (w, x, y, z)
    double opacity = 1.0;             // in [0, 1]
    Vec3 color = Vec3::Zero();        // base color
    Eigen::Matrix<double, 9, 1> sh1 = Eigen::Matrix<double, 9, 1>::Zero();
};

// Raw learnable parameters, struct-of-arrays. Activations:
//   scale   = max(exp(log_scale), scale_floor)
//   quat    = rotation / |rotation|
//   opacity = sigmoid(opacity_logit)
// Base colors are stored directly; per-view color is clamped to [0,1]
// after spherical-harmonic evaluation.
struct GaussianParams {
    Mat3X means;
    Mat3X log_scales;
    Mat4X rotations;       // raw quaternions (w, x, y, z)
    VecX opacity_logits;
    Mat3X base_colors;
    Eigen::Matrix<double, 9, Eigen::Dynamic> sh1; // rows: 3 SH-1 bases x 3 channels

    GaussianParams() = default;

    explicit GaussianParams(int n) { resize(n); }

    void resize(int n) {
        means.setZero(3, n);
        log_scales.setZero(3, n);
        rotations.setZero(4, n);
        rotations.row(0).setOnes();
        opacity_logits.setZero(n);
        base_colors.setZero(3, n);
        sh1.setZero(9, n);
    }

    int size() const { return static_cast<int>(means.cols()); }

    GaussianPrimitive primitive(int i, double scale_floor = 0.0) const {
        GaussianPrimitive g;
        g.mean = means.col(i);
        g.scale = log_scales.col(i).array().exp().max(scale_floor);
        g.rotation = rotations.col(i).normalized();
        g.opacity = sigmoid(opacity_logits[i]);
        g.color = base_colors.col(i);
        g.sh1 = sh1.col(i);
        return g;
    }
};

// Gradient buffers matching GaussianParams, one slot per raw parameter.
struct GaussianGrads {
    Mat3X means;
    Mat3X log_scales;
    Mat4X rotations;
    VecX opacity_logits;
    Mat3X base_colors;
    Eigen::Matrix<double, 9, Eigen::Dynamic> sh1;

    GaussianGrads() = default;
    explicit GaussianGrads(int n) { setZero(n); }

    void setZero(int n) {
        means.setZero(3, n);
        log_scales.setZero(3, n);
        rotations.setZero(4, n);
        opacity_logits.setZero(n);
        base_colors.setZero(3, n);
        sh1.setZero(9, n);
    }

    void add(const GaussianGrads& o) {
        means += o.means;
        log_scales += o.log_scales;
        rotations += o.rotations;
        opacity_logits += o.opacity_logits;
        base_colors += o.base_colors;
        sh1 += o.sh1;
    }
};

// ---------------------------------------------------------------------------
// Covariance factorization, Eq.-style Sigma = R * S * S^T * R^T
// ---------------------------------------------------------------------------

inline Mat3 quat_to_rotmat(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

// dR/dq for a unit quaternion, one 3x3 slab per component (w, x, y, z).
inline std::array<Mat3, 4> quat_rotmat_jacobian(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    std::array<Mat3, 4> d;
    d[0] << 0, -z, y, z, 0, -x, -y, x, 0;
    d[1] << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    d[2] << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    d[3] << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    for (auto& m : d) m *= 2.0;
    return d;
}

struct Covariance3 {
    Mat3 matrix = Mat3::Identity();
};

inline Covariance3 build_covariance(const Vec3& scale, const Vec4& rotation) {
    if (!all_finite(scale) || !all_finite(rotation) || (scale.array() <= 0).any()) {
        throw std::invalid_argument("build_covariance: scale must be finite-positive and rotation finite");
    }
    const Mat3 r = quat_to_rotmat(rotation.normalized());
    const Mat3 m = r * scale.asDiagonal();
    Covariance3 cov;
    cov.matrix = m * m.transpose();
    return cov;
}

// exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)), in (0, 1].
inline double eval_gaussian(const GaussianPrimitive& g, const Vec3& x) {
    const Mat3 sigma = build_covariance(g.scale, g.rotation).matrix;
    const double det = sigma.determinant();
    if (!(det > 1e-300) || !std::isfinite(det)) {
        throw std::runtime_error("eval_gaussian: covariance numerically singular");
    }
    const Vec3 d = x - g.mean;
    const double m = d.dot(sigma.inverse() * d);
    return std::exp(-0.5 * m);
}

// ---------------------------------------------------------------------------
// Anchors
// ---------------------------------------------------------------------------

// Scaffold point spawning k neural Gaussians at x^a + O_i * l^a.
// `offsets` and `offset_scales` hold k columns per anchor; `log_anchor_scale`
// keeps l^a positive. `intrinsic` is the per-anchor feature f_p.
// `offset_alive` masks pruned offsets; an anchor with no live offsets is
// removed entirely by pruning.
struct AnchorSet {
    int k = 5;
    int feature_dim = 8;
    Mat3X positions;            // fixed (not optimized)
    Mat3X offsets;              // 3 x (n*k)
    VecX log_anchor_scale;      // n
    MatX intrinsic;             // feature_dim x n
    Mat3X offset_scales;        // 3 x (n*k), feature inputs only
    std::vector<std::uint8_t> offset_alive; // n*k

    int size() const { return static_cast<int>(positions.cols()); }

    void resize(int n, int k_, int feat_dim) {
        k = k_;
        feature_dim = feat_dim;
        positions.setZero(3, n);
        offsets.setZero(3, n * k);
        log_anchor_scale.setZero(n);
        intrinsic.setZero(feat_dim, n);
        offset_scales.setZero(3, n * k);
        offset_alive.assign(static_cast<std::size_t>(n) * k, 1);
    }

    double anchor_scale(int a) const { return std::exp(log_anchor_scale[a]); }

    bool alive(int a, int i) const { return offset_alive[static_cast<std::size_t>(a) * k + i] != 0; }

    int live_offsets(int a) const {
        int c = 0;
        for (int i = 0; i < k; ++i) c += alive(a, i) ? 1 : 0;
        return c;
    }

    // Spawned position of offset slot i (Eq.-style mu_i = x^a + O_i * l^a).
    Vec3 spawn_position(int a, int i) const {
        return positions.col(a) + offsets.col(a * k + i) * anchor_scale(a);
    }
};

inline std::vector<Vec3> spawn_gaussians(const AnchorSet& anchors, int a) {
    std::vector<Vec3> out;
    out.reserve(anchors.k);
    for (int i = 0; i < anchors.k; ++i) out.push_back(anchors.spawn_position(a, i));
    return out;
}

// Gradient buffers for the learnable anchor parameters (positions are fixed).
struct AnchorGrads {
    Mat3X offsets;
    VecX log_anchor_scale;
    MatX intrinsic;
    Mat3X offset_scales;

    void setZero(const AnchorSet& a) {
        offsets.setZero(3, a.offsets.cols());
        log_anchor_scale.setZero(a.size());
        intrinsic.setZero(a.feature_dim, a.size());
        offset_scales.setZero(3, a.offset_scales.cols());
    }

    void add(const AnchorGrads& o) {
        offsets += o.offsets;
        log_anchor_scale += o.log_anchor_scale;
        intrinsic += o.intrinsic;
        offset_scales += o.offset_scales;
    }
};

// ---------------------------------------------------------------------------
// Camera
// ---------------------------------------------------------------------------

// Pinhole camera with world-to-camera extrinsics. Continuous image
// coordinates follow the integer-center convention: pixel (i, j) is sampled
// at exactly (i, j), so the image plane spans [-0.5, width-0.5).
struct Camera {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    Mat3 rotation = Mat3::Identity(); // world -> camera
    Vec3 translation = Vec3::Zero();
    int width = 0, height = 0;

    Camera() = default;
    Camera(double fx_, double fy_, double cx_, double cy_, const Mat3& r, const Vec3& t,
           int w, int h)
        : fx(fx_), fy(fy_), cx(cx_), cy(cy_), rotation(r), translation(t), width(w), height(h) {
        validate();
    }

    void validate() const {
        if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("Camera: focal lengths must be positive");
        if (width <= 0 || height <= 0) throw std::invalid_argument("Camera: image size must be positive");
        const Mat3 e = rotation * rotation.transpose() - Mat3::Identity();
        if (e.cwiseAbs().maxCoeff() > 1e-8) {
            throw std::invalid_argument("Camera: rotation not orthonormal within 1e-8");
        }
    }

    Vec3 center() const { return -rotation.transpose() * translation; }

    Vec3 to_camera(const Vec3& p) const { return rotation * p + translation; }

    // Perspective projection to continuous pixel coordinates.
    Vec2 project(const Vec3& p_world) const {
        const Vec3 pc = to_camera(p_world);
        return {fx * pc.x() / pc.z() + cx, fy * pc.y() / pc.z() + cy};
    }

    // Unit direction of the ray through continuous pixel coordinate (u, v).
    Vec3 ray_direction(double u, double v) const {
        const Vec3 d_cam((u - cx) / fx, (v - cy) / fy, 1.0);
        return (rotation.transpose() * d_cam).normalized();
    }
};

// ---------------------------------------------------------------------------
// Scene bounds
// ---------------------------------------------------------------------------

enum class PlaneAxis { XY = 0, XZ = 1, YZ = 2 };

// Axis-aligned bounds of the anchor cloud, expanded by a margin so boundary
// anchors interpolate interior cells, plus the centroid / spatial sigma used
// by the pruning mask. aabb_min/max store the *expanded* box.
struct SceneBounds {
    Vec3 aabb_min = Vec3::Zero();
    Vec3 aabb_max = Vec3::Ones();
    Vec3 centroid = Vec3::Zero();
    double spatial_sigma = 1.0; // RMS distance of points to centroid

    static SceneBounds from_points(const Mat3X& pts, double margin = 0.05) {
        if (pts.cols() == 0) throw std::invalid_argument("SceneBounds: empty point set");
        SceneBounds b;
        const Vec3 lo = pts.rowwise().minCoeff();
        const Vec3 hi = pts.rowwise().maxCoeff();
        const Vec3 ext = hi - lo;
        b.aabb_min = lo - margin * ext;
        b.aabb_max = hi + margin * ext;
        b.update_statistics(pts);
        return b;
    }

    void update_statistics(const Mat3X& pts) {
        centroid = pts.rowwise().mean();
        double acc = 0;
        for (int i = 0; i < pts.cols(); ++i) acc += (pts.col(i) - centroid).squaredNorm();
        spatial_sigma = std::sqrt(acc / static_cast<double>(pts.cols()));
    }

    Vec3 extent() const { return aabb_max - aabb_min; }

    double diagonal() const { return extent().norm(); }

    // Normalized coordinates in [0,1]^3, clamped.
    Vec3 normalized(const Vec3& p) const {
        const Vec3 ext = extent();
        if ((ext.array() <= 0).any()) {
            throw std::runtime_error("SceneBounds: degenerate extent (zero on an axis)");
        }
        Vec3 n = (p - aabb_min).cwiseQuotient(ext);
        return n.cwiseMax(0.0).cwiseMin(1.0);
    }
};

// Drop the orthogonal coordinate and normalize to [0,1]^2 by the bounds.
// Out-of-bounds points are clamped before normalization.
inline Vec2 project_to_plane(const Vec3& p, PlaneAxis plane, const SceneBounds& bounds) {
    const Vec3 n = bounds.normalized(p);
    switch (plane) {
        case PlaneAxis::XY: return {n.x(), n.y()};
        case PlaneAxis::XZ: return {n.x(), n.z()};
        case PlaneAxis::YZ: return {n.y(), n.z()};
    }
    throw std::invalid_argument("project_to_plane: bad plane axis");
}

}  // namespace cosplat
