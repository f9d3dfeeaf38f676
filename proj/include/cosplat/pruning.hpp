// Copyright Contributors to the cosplat project
// SPDX-License-Identifier: Apache-2.0
//
// Cross-view consistency supervision over SSIM-selected view pairs, and the
// geometric pruning mask that removes Gaussians hugging a camera or sitting
// far outside the point cloud while lying on a view ray.
//
// Distance thresholds are interpreted in normalized scene units: world
// distances are divided by the diagonal of the camera-position bounding box,
// which makes the 0.01 / 0.5 constants scale-free.

#pragma once

#include "cosplat/losses.hpp"
#include "cosplat/scene.hpp"

#include <cstdint>
#include <limits>
#include <vector>

namespace cosplat {

struct ViewPair {
    int i = 0, j = 0;
    double pair_ssim = 0.0;
};

// All unordered pairs of ground-truth images with SSIM above the threshold.
inline std::vector<ViewPair> select_view_pairs(const std::vector<ImageBuffer>& images,
                                               const SSIMParams& params = {},
                                               double threshold = 0.6) {
    std::vector<ViewPair> pairs;
    for (int i = 0; i < static_cast<int>(images.size()); ++i) {
        for (int j = i + 1; j < static_cast<int>(images.size()); ++j) {
            const double s = ssim(images[i], images[j], params).value;
            if (s > threshold) pairs.push_back({i, j, s});
        }
    }
    return pairs;
}

struct CrossViewLoss {
    double value = 0.0;
    ImageBuffer grad_i; // d value / d render_i
    ImageBuffer grad_j;
};

// pair_ssim * mean|(gt_i - render_i) - (gt_j - render_j)|. The SSIM factor
// involves only ground truth and is treated as a constant weight;
// subgradient 0 at the L1 kink.
inline CrossViewLoss cross_view_loss(double pair_ssim, const ImageBuffer& gt_i,
                                     const ImageBuffer& gt_j, const ImageBuffer& render_i,
                                     const ImageBuffer& render_j) {
    check_same_shape(gt_i, gt_j, "cross_view_loss");
    check_same_shape(gt_i, render_i, "cross_view_loss");
    check_same_shape(gt_i, render_j, "cross_view_loss");
    CrossViewLoss out;
    out.grad_i = ImageBuffer(gt_i.width, gt_i.height);
    out.grad_j = ImageBuffer(gt_i.width, gt_i.height);
    const double inv_n = 1.0 / static_cast<double>(gt_i.size());
    double acc = 0;
    for (std::size_t p = 0; p < gt_i.data.size(); ++p) {
        const double diff = (gt_i.data[p] - render_i.data[p]) - (gt_j.data[p] - render_j.data[p]);
        acc += std::abs(diff);
        const double sgn = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
        out.grad_i.data[p] = -pair_ssim * sgn * inv_n;
        out.grad_j.data[p] = pair_ssim * sgn * inv_n;
    }
    out.value = pair_ssim * acc * inv_n;
    return out;
}

struct PruneThresholds {
    double ray_distance = 0.01;    // d_I, normalized units
    double camera_distance = 0.5;  // d_C, normalized units
    double outlier_sigma = 3.0;    // d_O > outlier_sigma * spatial_sigma
};

struct PruneDecision {
    std::vector<std::uint8_t> mask; // 1 = prune
    std::vector<double> d_ray;      // world units; +inf when off-frustum
    std::vector<double> d_camera;   // world units
    std::vector<double> d_centroid; // world units
    int flagged_near_camera = 0;
    int flagged_outlier = 0;
};

// Diagonal of the camera-position bounding box: the normalization unit for
// the prune thresholds.
inline double camera_bbox_diagonal(const std::vector<Camera>& cameras) {
    if (cameras.empty()) throw std::invalid_argument("camera_bbox_diagonal: no cameras");
    Vec3 lo = cameras[0].center(), hi = lo;
    for (const Camera& c : cameras) {
        lo = lo.cwiseMin(c.center());
        hi = hi.cwiseMax(c.center());
    }
    return (hi - lo).norm();
}

// d_I is realized as the distance to the ray through the point's own
// projected pixel center (nearest integer pixel); points behind the camera
// or projecting off-image get d_I = +inf and are never flagged.
inline PruneDecision prune_mask(const Mat3X& positions, const Camera& cam,
                                const SceneBounds& bounds, double scene_unit,
                                const PruneThresholds& thr = {}) {
    if (!(scene_unit > 0)) throw std::invalid_argument("prune_mask: scene unit must be positive");
    const int n = static_cast<int>(positions.cols());
    PruneDecision out;
    out.mask.assign(n, 0);
    out.d_ray.assign(n, std::numeric_limits<double>::infinity());
    out.d_camera.assign(n, 0.0);
    out.d_centroid.assign(n, 0.0);
    const Vec3 origin = cam.center();
    for (int i = 0; i < n; ++i) {
        const Vec3 p = positions.col(i);
        out.d_camera[i] = (p - origin).norm();
        out.d_centroid[i] = (p - bounds.centroid).norm();

        const Vec3 pc = cam.to_camera(p);
        if (pc.z() > 1e-9) {
            const double u = cam.fx * pc.x() / pc.z() + cam.cx;
            const double v = cam.fy * pc.y() / pc.z() + cam.cy;
            const double pu = std::round(u);
            const double pv = std::round(v);
            if (pu >= 0 && pu <= cam.width - 1 && pv >= 0 && pv <= cam.height - 1) {
                const Vec3 dir = cam.ray_direction(pu, pv);
                const Vec3 rel = p - origin;
                out.d_ray[i] = (rel - dir * rel.dot(dir)).norm();
            }
        }

        const bool on_ray = out.d_ray[i] < thr.ray_distance * scene_unit;
        const bool near_cam = out.d_camera[i] < thr.camera_distance * scene_unit;
        const bool outlier = out.d_centroid[i] > thr.outlier_sigma * bounds.spatial_sigma;
        if (on_ray && (near_cam || outlier)) {
            out.mask[i] = 1;
            if (near_cam) ++out.flagged_near_camera;
            if (outlier && !near_cam) ++out.flagged_outlier;
        }
    }
    return out;
}

}  // namespace cosplat
