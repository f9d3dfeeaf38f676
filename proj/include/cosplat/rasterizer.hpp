// Copyright Contributors to the cosplat project
// SPDX-License-Identifier: Apache-2.0
//
// Tile-based splatting of 3D Gaussians: perspective projection with the EWA
// Jacobian, front-to-back alpha compositing, and the analytic backward pass
// producing gradients for every raw Gaussian parameter.
//
// Conventions:
//   - pixel (i, j) is sampled at continuous image coordinate (i, j);
//   - contributors are depth-sorted front to back, ties broken by index;
//   - compositing stops once transmittance drops below the configured floor,
//     mirrored exactly in the backward pass;
//   - contributions with sigma below `contribution_eps` are skipped in both
//     passes, which bounds the support of each splat (radius ~6 sigma at the
//     default 1e-8) so the footprint cutoff stays below test tolerances;
//   - gradients through the depth sort are zero (sorting is piecewise
//     constant in the parameters).

#pragma once

#include "cosplat/image.hpp"
#include "cosplat/scene.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <thread>
#include <vector>

namespace cosplat {

struct RenderSettings {
    double near_plane = 0.01;
    double lowpass = 0.3;                // added to cov2d diagonal, px^2
    double transmittance_floor = 1e-4;   // early-out threshold
    double contribution_eps = 1e-8;      // skip sigma below this
    double scale_floor = 0.0;            // world-units floor on activated scales
    int tile_size = 16;
    int workers = 1;
};

struct SplattedGaussian2D {
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Identity(); // includes the lowpass floor
    double depth = 0.0;
    double opacity = 0.0;
    Vec3 color = Vec3::Zero(); // per-view evaluated, clamped to [0,1]
};

struct RenderOutput {
    ImageBuffer color;
    std::vector<double> alpha;     // accumulated opacity per pixel
    std::vector<int> contributors; // accepted contributions per pixel
    std::vector<double> depth;     // alpha-weighted mean depth (diagnostic)
};

using RenderGradients = GaussianGrads;

namespace rasterdetail {

constexpr double kShC1 = 0.4886025119029199;

enum class CullReason { kNone, kNearPlane, kFootprint, kTransparent };

struct ProjRecord {
    bool valid = false;
    CullReason cull = CullReason::kNone;
    Vec2 mean2d = Vec2::Zero();
    double conic_a = 0, conic_b = 0, conic_c = 0;
    Mat2 cov2d = Mat2::Zero(); // with lowpass
    double depth = 0;
    double alpha = 0;
    double m_cut = 0; // mahalanobis cutoff for sigma >= eps
    Vec3 color_view = Vec3::Zero();
    Vec3 color_pre = Vec3::Zero();
    Vec3 dir = Vec3::Zero();
    double dir_norm = 1;
    // cached activation state for the backward chain
    Vec3 scale = Vec3::Ones();
    Vec3 scale_active = Vec3::Ones(); // 1 where exp(ls) above floor
    Vec4 qhat = Vec4(1, 0, 0, 0);
    double qnorm = 1;
    Mat3 rot = Mat3::Identity();
    Mat23 t2 = Mat23::Zero(); // J * W
    Vec3 p_cam = Vec3::Zero();
};

// Projects one Gaussian given activated attributes. Returns an invalid record
// when culled (behind the near plane or 3-sigma footprint off-image).
inline ProjRecord project_record(const Vec3& mean, const Vec3& scale, const Vec3& scale_active,
                                 const Vec4& qraw, double opacity, const Vec3& c0,
                                 const Eigen::Matrix<double, 9, 1>& sh,
                                 const Camera& cam, const RenderSettings& s) {
    ProjRecord r;
    r.p_cam = cam.to_camera(mean);
    r.depth = r.p_cam.z();
    if (!(r.depth > s.near_plane)) {
        r.cull = CullReason::kNearPlane;
        return r;
    }

    r.scale = scale;
    r.scale_active = scale_active;
    r.qnorm = qraw.norm();
    r.qhat = qraw / r.qnorm;
    r.rot = quat_to_rotmat(r.qhat);
    const Mat3 sigma3 = (r.rot * scale.asDiagonal()) * (r.rot * scale.asDiagonal()).transpose();

    const double x = r.p_cam.x(), y = r.p_cam.y(), z = r.p_cam.z();
    r.mean2d = {cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy};

    Mat23 jac;
    jac << cam.fx / z, 0, -cam.fx * x / (z * z),
           0, cam.fy / z, -cam.fy * y / (z * z);
    r.t2 = jac * cam.rotation;
    Mat2 v = r.t2 * sigma3 * r.t2.transpose();
    v(0, 0) += s.lowpass;
    v(1, 1) += s.lowpass;
    r.cov2d = v;

    // 3-sigma footprint vs the pixel sample rectangle [0, W-1] x [0, H-1]
    const double mid = 0.5 * (v(0, 0) + v(1, 1));
    const double disc = std::sqrt(std::max(0.0, mid * mid - v.determinant()));
    const double lambda_max = mid + disc;
    const double r3 = 3.0 * std::sqrt(lambda_max);
    if (r.mean2d.x() + r3 < 0 || r.mean2d.x() - r3 > cam.width - 1 ||
        r.mean2d.y() + r3 < 0 || r.mean2d.y() - r3 > cam.height - 1) {
        r.cull = CullReason::kFootprint;
        return r;
    }

    const double det = v.determinant();
    r.conic_a = v(1, 1) / det;
    r.conic_b = -v(0, 1) / det;
    r.conic_c = v(0, 0) / det;

    const Vec3 u = mean - cam.center();
    r.dir_norm = u.norm();
    r.dir = r.dir_norm > 1e-12 ? Vec3(u / r.dir_norm) : Vec3(0, 0, 1);
    for (int ch = 0; ch < 3; ++ch) {
        r.color_pre[ch] = c0[ch] + kShC1 * (-r.dir.y() * sh[0 * 3 + ch] +
                                            r.dir.z() * sh[1 * 3 + ch] -
                                            r.dir.x() * sh[2 * 3 + ch]);
        r.color_view[ch] = std::clamp(r.color_pre[ch], 0.0, 1.0);
    }

    r.alpha = opacity;
    if (r.alpha < s.contribution_eps) {
        r.cull = CullReason::kTransparent;
        return r;
    }
    r.m_cut = 2.0 * std::log(r.alpha / s.contribution_eps);
    r.valid = true;
    return r;
}

}  // namespace rasterdetail

// Public projection op over activated attributes; nullopt when culled
// (behind the near plane or 3-sigma footprint off the image).
inline std::optional<SplattedGaussian2D> project_gaussian(const GaussianPrimitive& g,
                                                          const Camera& cam,
                                                          const RenderSettings& s = {}) {
    cam.validate();
    const auto r = rasterdetail::project_record(g.mean, g.scale, Vec3::Ones(),
                                                g.rotation, g.opacity, g.color, g.sh1, cam, s);
    using rasterdetail::CullReason;
    if (!r.valid && r.cull != CullReason::kTransparent) return std::nullopt;
    SplattedGaussian2D out;
    out.mean2d = r.mean2d;
    out.cov2d = r.cov2d;
    out.depth = r.depth;
    out.opacity = g.opacity;
    out.color = r.color_view;
    return out;
}

struct RenderContext {
    int width = 0, height = 0, n = 0;
    RenderSettings settings;
    std::vector<rasterdetail::ProjRecord> records;
    std::vector<std::vector<int>> tiles; // depth-ordered gaussian indices per tile
    int tiles_x = 0, tiles_y = 0;
    bool valid = false;
};

namespace rasterdetail {

// Walks one pixel front to back, invoking fn(gaussian, sigma, T_before) for
// every accepted contribution. Shared by forward and backward so the skip and
// early-out behavior is identical in both passes.
template <typename Fn>
inline void walk_pixel(const RenderContext& ctx, const std::vector<int>& list, int px, int py,
                       Fn&& fn) {
    double t = 1.0;
    for (int g : list) {
        const ProjRecord& r = ctx.records[g];
        const double dx = px - r.mean2d.x();
        const double dy = py - r.mean2d.y();
        const double m = r.conic_a * dx * dx + 2.0 * r.conic_b * dx * dy + r.conic_c * dy * dy;
        if (m > r.m_cut) continue;
        const double sigma = r.alpha * std::exp(-0.5 * m);
        if (sigma < ctx.settings.contribution_eps) continue;
        fn(g, sigma, t);
        t *= 1.0 - sigma;
        if (t < ctx.settings.transmittance_floor) break;
    }
}

template <typename Fn>
inline void for_tiles(int tile_count, int workers, Fn&& body) {
    if (workers <= 1 || tile_count <= 1) {
        for (int t = 0; t < tile_count; ++t) body(t, 0);
        return;
    }
    const int w = std::min(workers, tile_count);
    std::vector<std::thread> pool;
    pool.reserve(w);
    for (int i = 0; i < w; ++i) {
        const int lo = static_cast<int>(static_cast<long long>(tile_count) * i / w);
        const int hi = static_cast<int>(static_cast<long long>(tile_count) * (i + 1) / w);
        pool.emplace_back([&, lo, hi, i] {
            for (int t = lo; t < hi; ++t) body(t, i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace rasterdetail

inline std::pair<RenderOutput, RenderContext> render_forward(const GaussianParams& params,
                                                             const Camera& cam,
                                                             const RenderSettings& settings = {}) {
    cam.validate();
    const int n = params.size();
    RenderContext ctx;
    ctx.width = cam.width;
    ctx.height = cam.height;
    ctx.n = n;
    ctx.settings = settings;
    ctx.records.resize(n);

    for (int i = 0; i < n; ++i) {
        const Vec3 s_raw = params.log_scales.col(i).array().exp();
        const Vec3 s = s_raw.cwiseMax(settings.scale_floor);
        Vec3 active;
        for (int j = 0; j < 3; ++j) active[j] = s_raw[j] >= settings.scale_floor ? 1.0 : 0.0;
        ctx.records[i] = rasterdetail::project_record(
            params.means.col(i), s, active, params.rotations.col(i),
            sigmoid(params.opacity_logits[i]), params.base_colors.col(i), params.sh1.col(i), cam,
            settings);
    }

    // depth sort, stable tie-break by index
    std::vector<int> order;
    order.reserve(n);
    for (int i = 0; i < n; ++i) {
        if (ctx.records[i].valid) order.push_back(i);
    }
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (ctx.records[a].depth != ctx.records[b].depth) {
            return ctx.records[a].depth < ctx.records[b].depth;
        }
        return a < b;
    });

    const int ts = settings.tile_size;
    ctx.tiles_x = (cam.width + ts - 1) / ts;
    ctx.tiles_y = (cam.height + ts - 1) / ts;
    ctx.tiles.assign(static_cast<std::size_t>(ctx.tiles_x) * ctx.tiles_y, {});
    for (int g : order) {
        const auto& r = ctx.records[g];
        const double rx = std::sqrt(std::max(0.0, r.m_cut * r.cov2d(0, 0)));
        const double ry = std::sqrt(std::max(0.0, r.m_cut * r.cov2d(1, 1)));
        const int x0 = std::clamp(static_cast<int>(std::floor(r.mean2d.x() - rx)), 0, cam.width - 1);
        const int x1 = std::clamp(static_cast<int>(std::ceil(r.mean2d.x() + rx)), 0, cam.width - 1);
        const int y0 = std::clamp(static_cast<int>(std::floor(r.mean2d.y() - ry)), 0, cam.height - 1);
        const int y1 = std::clamp(static_cast<int>(std::ceil(r.mean2d.y() + ry)), 0, cam.height - 1);
        for (int ty = y0 / ts; ty <= y1 / ts; ++ty) {
            for (int tx = x0 / ts; tx <= x1 / ts; ++tx) {
                ctx.tiles[static_cast<std::size_t>(ty) * ctx.tiles_x + tx].push_back(g);
            }
        }
    }

    RenderOutput out;
    out.color = ImageBuffer(cam.width, cam.height);
    out.alpha.assign(static_cast<std::size_t>(cam.width) * cam.height, 0.0);
    out.contributors.assign(out.alpha.size(), 0);
    out.depth.assign(out.alpha.size(), 0.0);

    rasterdetail::for_tiles(
        static_cast<int>(ctx.tiles.size()), settings.workers, [&](int tile, int) {
            const int tx = tile % ctx.tiles_x, ty = tile / ctx.tiles_x;
            const auto& list = ctx.tiles[tile];
            const int px1 = std::min(cam.width, (tx + 1) * ts);
            const int py1 = std::min(cam.height, (ty + 1) * ts);
            for (int py = ty * ts; py < py1; ++py) {
                for (int px = tx * ts; px < px1; ++px) {
                    const std::size_t pix = static_cast<std::size_t>(py) * cam.width + px;
                    Vec3 c = Vec3::Zero();
                    double acc_alpha = 0, acc_depth = 0;
                    int count = 0;
                    rasterdetail::walk_pixel(ctx, list, px, py,
                                             [&](int g, double sigma, double t) {
                                                 const auto& r = ctx.records[g];
                                                 c += r.color_view * (sigma * t);
                                                 acc_alpha += sigma * t;
                                                 acc_depth += r.depth * sigma * t;
                                                 ++count;
                                             });
                    for (int ch = 0; ch < 3; ++ch) out.color.at(px, py, ch) = c[ch];
                    out.alpha[pix] = acc_alpha;
                    out.contributors[pix] = count;
                    out.depth[pix] = acc_alpha > 1e-12 ? acc_depth / acc_alpha : 0.0;
                }
            }
        });

    ctx.valid = true;
    return {std::move(out), std::move(ctx)};
}

inline RenderOutput render_view(const GaussianParams& params, const Camera& cam,
                                const RenderSettings& settings = {}) {
    return render_forward(params, cam, settings).first;
}

inline RenderGradients render_backward(const GaussianParams& params, const Camera& cam,
                                       const RenderContext& ctx, const ImageBuffer& upstream,
                                       const RenderSettings& settings = {}) {
    if (!ctx.valid) throw std::logic_error("render_backward: forward state missing");
    if (ctx.n != params.size() || ctx.width != cam.width || ctx.height != cam.height) {
        throw std::logic_error("render_backward: forward state does not match inputs");
    }
    if (upstream.width != ctx.width || upstream.height != ctx.height) {
        throw std::invalid_argument("render_backward: upstream image dimension mismatch");
    }

    const int n = ctx.n;
    // per-gaussian 2D accumulators: dmean2d(2) dconic(3) dalpha dcolor(3).
    // Tiles accumulate into private subtotals that are reduced in tile order,
    // so gradients are bit-identical for any worker count.
    constexpr int kSlots = 9;
    const int tile_count = static_cast<int>(ctx.tiles.size());
    const int workers = std::max(1, std::min(ctx.settings.workers, tile_count));
    std::vector<std::vector<double>> tile_acc(tile_count);

    const int ts = ctx.settings.tile_size;
    struct Entry {
        int g;
        double sigma;
        double t;
    };

    rasterdetail::for_tiles(tile_count, workers, [&](int tile, int) {
        const int tx = tile % ctx.tiles_x, ty = tile / ctx.tiles_x;
        const auto& list = ctx.tiles[tile];
        if (list.empty()) return;
        auto& acc = tile_acc[tile];
        acc.assign(static_cast<std::size_t>(n) * kSlots, 0.0);
        std::vector<Entry> stack;
        stack.reserve(64);
        const int px1 = std::min(ctx.width, (tx + 1) * ts);
        const int py1 = std::min(ctx.height, (ty + 1) * ts);
        for (int py = ty * ts; py < py1; ++py) {
            for (int px = tx * ts; px < px1; ++px) {
                stack.clear();
                rasterdetail::walk_pixel(ctx, list, px, py, [&](int g, double sigma, double t) {
                    stack.push_back({g, sigma, t});
                });
                if (stack.empty()) continue;
                const Vec3 up(upstream.at(px, py, 0), upstream.at(px, py, 1),
                              upstream.at(px, py, 2));
                if (up.isZero()) continue;
                Vec3 suffix = Vec3::Zero(); // sum_{j>i} c_j sigma_j T_j
                for (int e = static_cast<int>(stack.size()) - 1; e >= 0; --e) {
                    const auto& en = stack[e];
                    const auto& r = ctx.records[en.g];
                    double* slot = acc.data() + static_cast<std::size_t>(en.g) * kSlots;
                    const double w = en.sigma * en.t;
                    // dC/dcolor = sigma * T
                    slot[6] += up[0] * w;
                    slot[7] += up[1] * w;
                    slot[8] += up[2] * w;
                    // dC/dsigma = c * T - suffix / (1 - sigma)
                    const double denom = std::max(1.0 - en.sigma, 1e-12);
                    const Vec3 dC_dsigma = r.color_view * en.t - suffix / denom;
                    const double dsigma = up.dot(dC_dsigma);
                    suffix += r.color_view * (en.sigma * en.t);
                    // sigma = alpha * exp(-m/2)
                    const double gval = en.sigma / r.alpha;
                    const double dalpha = dsigma * gval;
                    const double dm = -0.5 * en.sigma * dsigma;
                    const double dx = px - r.mean2d.x();
                    const double dy = py - r.mean2d.y();
                    slot[2] += dm * dx * dx;          // d/d conic_a
                    slot[3] += dm * 2.0 * dx * dy;    // d/d conic_b
                    slot[4] += dm * dy * dy;          // d/d conic_c
                    const double ddx = dm * (2.0 * r.conic_a * dx + 2.0 * r.conic_b * dy);
                    const double ddy = dm * (2.0 * r.conic_b * dx + 2.0 * r.conic_c * dy);
                    slot[0] -= ddx; // d/d mean2d.x
                    slot[1] -= ddy;
                    slot[5] += dalpha;
                }
            }
        }
    });

    std::vector<double> acc(static_cast<std::size_t>(n) * kSlots, 0.0);
    for (const auto& ta : tile_acc) {
        if (ta.empty()) continue;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += ta[i];
    }

    RenderGradients grads(n);
    for (int i = 0; i < n; ++i) {
        const auto& r = ctx.records[i];
        if (!r.valid) continue;
        const double* slot = acc.data() + static_cast<std::size_t>(i) * kSlots;
        const Vec2 dmean2d(slot[0], slot[1]);
        const double dalpha = slot[5];
        Vec3 dcolor_view(slot[6], slot[7], slot[8]);

        // opacity logit
        grads.opacity_logits[i] = dalpha * r.alpha * (1.0 - r.alpha);

        // color: clamp mask, then SH chain (with the view-direction term)
        Vec3 dpre = Vec3::Zero();
        for (int ch = 0; ch < 3; ++ch) {
            if (r.color_pre[ch] > 0.0 && r.color_pre[ch] < 1.0) dpre[ch] = dcolor_view[ch];
        }
        grads.base_colors.col(i) = dpre;
        Vec3 ddir = Vec3::Zero();
        for (int ch = 0; ch < 3; ++ch) {
            grads.sh1(0 * 3 + ch, i) = -rasterdetail::kShC1 * r.dir.y() * dpre[ch];
            grads.sh1(1 * 3 + ch, i) = rasterdetail::kShC1 * r.dir.z() * dpre[ch];
            grads.sh1(2 * 3 + ch, i) = -rasterdetail::kShC1 * r.dir.x() * dpre[ch];
            ddir.x() -= rasterdetail::kShC1 * params.sh1(2 * 3 + ch, i) * dpre[ch];
            ddir.y() -= rasterdetail::kShC1 * params.sh1(0 * 3 + ch, i) * dpre[ch];
            ddir.z() += rasterdetail::kShC1 * params.sh1(1 * 3 + ch, i) * dpre[ch];
        }
        Vec3 dmean = (ddir - r.dir * r.dir.dot(ddir)) / r.dir_norm;

        // conic -> cov2d (inverse-matrix chain)
        Mat2 ginv;
        ginv << slot[2], 0.5 * slot[3], 0.5 * slot[3], slot[4];
        Mat2 inv;
        inv << r.conic_a, r.conic_b, r.conic_b, r.conic_c;
        const Mat2 dcov2d = -inv * ginv * inv;

        // cov2d = T2 * Sigma3 * T2^T + lowpass
        const Mat3 m = r.rot * r.scale.asDiagonal();
        const Mat3 sigma3 = m * m.transpose();
        const Mat3 dsigma3 = r.t2.transpose() * dcov2d * r.t2;
        const Mat23 dt2 = 2.0 * dcov2d * r.t2 * sigma3;
        const Mat23 djac = dt2 * cam.rotation.transpose();

        // J entries depend on the camera-space mean
        const double x = r.p_cam.x(), y = r.p_cam.y(), z = r.p_cam.z();
        Vec3 dp_cam = Vec3::Zero();
        dp_cam.x() += djac(0, 2) * (-cam.fx / (z * z));
        dp_cam.y() += djac(1, 2) * (-cam.fy / (z * z));
        dp_cam.z() += djac(0, 0) * (-cam.fx / (z * z)) + djac(0, 2) * (2.0 * cam.fx * x / (z * z * z)) +
                      djac(1, 1) * (-cam.fy / (z * z)) + djac(1, 2) * (2.0 * cam.fy * y / (z * z * z));

        // projection of the mean itself
        Mat23 jac;
        jac << cam.fx / z, 0, -cam.fx * x / (z * z),
               0, cam.fy / z, -cam.fy * y / (z * z);
        dp_cam += jac.transpose() * dmean2d;
        dmean += cam.rotation.transpose() * dp_cam;
        grads.means.col(i) = dmean;

        // Sigma3 = M M^T with M = R diag(s)
        const Mat3 dm3 = 2.0 * dsigma3 * m;
        const Mat3 drot = dm3 * r.scale.asDiagonal();
        Vec3 dscale;
        for (int j = 0; j < 3; ++j) dscale[j] = r.rot.col(j).dot(dm3.col(j));
        grads.log_scales.col(i) =
            dscale.cwiseProduct(r.scale).cwiseProduct(r.scale_active);

        // rotation: R(qhat) then quaternion normalization
        const auto dr_dq = quat_rotmat_jacobian(r.qhat);
        Vec4 dqhat;
        for (int j = 0; j < 4; ++j) dqhat[j] = (drot.array() * dr_dq[j].array()).sum();
        grads.rotations.col(i) = (dqhat - r.qhat * r.qhat.dot(dqhat)) / r.qnorm;
    }
    return grads;
}

}  // namespace cosplat
