// Copyright Contributors to the cosplat project
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable image losses (L1, SSIM, fine-grained scale regularizer) and
// evaluation metrics (PSNR, SSIM). Gradients are analytic and are verified
// against finite differences in the test suite.

#pragma once

#include "cosplat/image.hpp"
#include "cosplat/scene.hpp"

namespace cosplat {

struct SSIMParams {
    int window = 11;
    double sigma = 1.5;
    double c1 = 0.01 * 0.01; // stabilizers on unit dynamic range
    double c2 = 0.03 * 0.03;

    // Normalized 2D Gaussian window, sums to 1.
    MatX kernel() const {
        MatX k(window, window);
        const double half = (window - 1) / 2.0;
        for (int y = 0; y < window; ++y) {
            for (int x = 0; x < window; ++x) {
                const double dx = x - half, dy = y - half;
                k(y, x) = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            }
        }
        k /= k.sum();
        return k;
    }
};

struct ScalarWithImageGrad {
    double value = 0.0;
    ImageBuffer grad; // d value / d first-argument pixels
};

inline void check_same_shape(const ImageBuffer& a, const ImageBuffer& b, const char* who) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(who) + ": image dimension mismatch");
    }
}

// Mean absolute difference over all pixel-channels; subgradient 0 at ties.
inline ScalarWithImageGrad l1_loss(const ImageBuffer& a, const ImageBuffer& b) {
    check_same_shape(a, b, "l1_loss");
    ScalarWithImageGrad out;
    out.grad = ImageBuffer(a.width, a.height);
    const double inv_n = 1.0 / static_cast<double>(a.size());
    double acc = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        acc += std::abs(d);
        out.grad.data[i] = d > 0 ? inv_n : (d < 0 ? -inv_n : 0.0);
    }
    out.value = acc * inv_n;
    return out;
}

// Mean local SSIM over valid window placements, channels averaged.
// The gradient is taken with respect to `a` only (`b` is the reference).
inline ScalarWithImageGrad ssim(const ImageBuffer& a, const ImageBuffer& b,
                                const SSIMParams& params = {}) {
    check_same_shape(a, b, "ssim");
    const int win = params.window;
    if (a.width < win || a.height < win) {
        throw std::invalid_argument("ssim: image smaller than window");
    }
    const MatX k = params.kernel();
    const int out_w = a.width - win + 1;
    const int out_h = a.height - win + 1;
    const double inv_count = 1.0 / (3.0 * out_w * out_h);

    ScalarWithImageGrad out;
    out.grad = ImageBuffer(a.width, a.height);
    double acc = 0;

    for (int c = 0; c < 3; ++c) {
        for (int wy = 0; wy < out_h; ++wy) {
            for (int wx = 0; wx < out_w; ++wx) {
                double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
                for (int y = 0; y < win; ++y) {
                    for (int x = 0; x < win; ++x) {
                        const double w = k(y, x);
                        const double va = a.at(wx + x, wy + y, c);
                        const double vb = b.at(wx + x, wy + y, c);
                        mu_a += w * va;
                        mu_b += w * vb;
                        aa += w * va * va;
                        bb += w * vb * vb;
                        ab += w * va * vb;
                    }
                }
                const double var_a = aa - mu_a * mu_a;
                const double var_b = bb - mu_b * mu_b;
                const double cov = ab - mu_a * mu_b;
                const double n1 = 2 * mu_a * mu_b + params.c1;
                const double n2 = 2 * cov + params.c2;
                const double d1 = mu_a * mu_a + mu_b * mu_b + params.c1;
                const double d2 = var_a + var_b + params.c2;
                const double s = (n1 * n2) / (d1 * d2);
                acc += s;

                const double ds_dmu_a = 2 * mu_b * n2 / (d1 * d2) - s * 2 * mu_a / d1;
                const double ds_dvar_a = -s / d2;
                const double ds_dcov = 2 * n1 / (d1 * d2);
                for (int y = 0; y < win; ++y) {
                    for (int x = 0; x < win; ++x) {
                        const double w = k(y, x);
                        const double va = a.at(wx + x, wy + y, c);
                        const double vb = b.at(wx + x, wy + y, c);
                        out.grad.at(wx + x, wy + y, c) +=
                            inv_count * w *
                            (ds_dmu_a + 2 * (va - mu_a) * ds_dvar_a + (vb - mu_b) * ds_dcov);
                    }
                }
            }
        }
    }
    out.value = acc * inv_count;
    return out;
}

inline ScalarWithImageGrad ssim_loss(const ImageBuffer& a, const ImageBuffer& b,
                                     const SSIMParams& params = {}) {
    ScalarWithImageGrad s = ssim(a, b, params);
    s.value = 1.0 - s.value;
    for (double& g : s.grad.data) g = -g;
    return s;
}

// Sum over Gaussians of the product of the three scale components; the
// gradient is reported per log-scale (d/dlog s_j of s1*s2*s3 is the product
// itself).
struct FineLoss {
    double value = 0.0;
    Mat3X grad_log_scales;
};

inline FineLoss fine_loss(const Mat3X& scales) {
    FineLoss out;
    out.grad_log_scales.setZero(3, scales.cols());
    for (int i = 0; i < scales.cols(); ++i) {
        const double p = scales(0, i) * scales(1, i) * scales(2, i);
        out.value += p;
        out.grad_log_scales.col(i).setConstant(p);
    }
    return out;
}

// -10 log10(MSE) on unit dynamic range, capped at 99 dB for near-zero MSE.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
    check_same_shape(a, b, "psnr");
    double mse = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse < 1e-10) return 99.0;
    return -10.0 * std::log10(mse);
}

}  // namespace cosplat
