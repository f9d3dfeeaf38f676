// Copyright Contributors to the cosplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cosplat/rasterizer.hpp"
#include "cosplat/scene.hpp"

#include <gtest/gtest.h>

#include <functional>
#include <string>

namespace cosplat::testutil {

// |analytic - numeric| <= max(abs_floor, rel * max(|a|,|n|))
inline void expect_close(double analytic, double numeric, double rel, double abs_floor,
                         const std::string& what) {
    const double tol = std::max(abs_floor, rel * std::max(std::abs(analytic), std::abs(numeric)));
    EXPECT_NEAR(analytic, numeric, tol) << what;
}

inline double central_diff(double* param, const std::function<double()>& loss, double h = 1e-4) {
    const double saved = *param;
    *param = saved + h;
    const double hi = loss();
    *param = saved - h;
    const double lo = loss();
    *param = saved;
    return (hi - lo) / (2.0 * h);
}

// Camera at the origin looking down +z, image centered between samples.
inline Camera look_forward_camera(int size = 16, double focal = 40.0) {
    return Camera(focal, focal, (size - 1) / 2.0, (size - 1) / 2.0, Mat3::Identity(),
                  Vec3::Zero(), size, size);
}

// Random scene in front of look_forward_camera. Opacity logits stay <= 0 so
// stacked transmittance cannot cross the early-out threshold, which keeps
// finite differences clean.
inline GaussianParams random_scene(int n, Rng& rng, double z_lo = 2.5, double z_hi = 4.0) {
    GaussianParams p(n);
    for (int i = 0; i < n; ++i) {
        p.means.col(i) = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                              rng.uniform(z_lo, z_hi));
        for (int j = 0; j < 3; ++j) p.log_scales(j, i) = std::log(rng.uniform(0.08, 0.2));
        p.rotations.col(i) = rng.unit_quaternion();
        p.opacity_logits[i] = rng.uniform(-1.5, 0.0);
        p.base_colors.col(i) = Vec3(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
                                    rng.uniform(0.2, 0.8));
        for (int j = 0; j < 9; ++j) p.sh1(j, i) = rng.uniform(-0.04, 0.04);
    }
    return p;
}

inline ImageBuffer random_image(int w, int h, Rng& rng, double lo = 0.0, double hi = 1.0) {
    ImageBuffer img(w, h);
    for (double& v : img.data) v = rng.uniform(lo, hi);
    return img;
}

}  // namespace cosplat::testutil
