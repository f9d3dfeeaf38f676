// Copyright Contributors to the cosplat project
// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense layers used by the feature field and attribute decoders.
// Batches are column-major: one sample per column. Backward calls accumulate
// into the layer's gradient buffers and return the input gradient.

#pragma once

#include "cosplat/core.hpp"

namespace cosplat {

struct Linear {
    MatX w; // out x in
    VecX b;
    MatX gw;
    VecX gb;

    int in_dim() const { return static_cast<int>(w.cols()); }
    int out_dim() const { return static_cast<int>(w.rows()); }

    void init_xavier(int out, int in, Rng& rng) {
        w.resize(out, in);
        const double a = std::sqrt(6.0 / (in + out));
        for (int j = 0; j < in; ++j)
            for (int i = 0; i < out; ++i) w(i, j) = rng.uniform(-a, a);
        b.setZero(out);
        zero_grad();
    }

    void init_zero(int out, int in) {
        w.setZero(out, in);
        b.setZero(out);
        zero_grad();
    }

    void zero_grad() {
        gw.setZero(w.rows(), w.cols());
        gb.setZero(b.size());
    }

    MatX forward(const MatX& x) const { return (w * x).colwise() + b; }

    MatX backward(const MatX& x, const MatX& dy) {
        gw += dy * x.transpose();
        gb += dy.rowwise().sum();
        return w.transpose() * dy;
    }
};

struct BatchNorm {
    VecX gamma, beta;
    VecX run_mean, run_var;
    VecX ggamma, gbeta;
    double eps = 1e-5;
    double momentum = 0.1;

    struct Cache {
        MatX xhat;
        VecX inv_std;
    };

    void init(int dim) {
        gamma.setOnes(dim);
        beta.setZero(dim);
        run_mean.setZero(dim);
        run_var.setOnes(dim);
        zero_grad();
    }

    void zero_grad() {
        ggamma.setZero(gamma.size());
        gbeta.setZero(beta.size());
    }

    MatX forward(const MatX& x, bool training, bool update_running, Cache* cache) {
        const auto n = static_cast<double>(x.cols());
        MatX out(x.rows(), x.cols());
        if (training) {
            const VecX mean = x.rowwise().mean();
            VecX var(x.rows());
            for (int r = 0; r < x.rows(); ++r) {
                var[r] = (x.row(r).array() - mean[r]).square().sum() / n;
            }
            const VecX inv_std = (var.array() + eps).rsqrt();
            MatX xhat = (x.colwise() - mean).array().colwise() * inv_std.array();
            out = (xhat.array().colwise() * gamma.array()).colwise() + beta.array();
            if (update_running) {
                const double unbias = n > 1 ? n / (n - 1.0) : 1.0;
                run_mean = (1.0 - momentum) * run_mean + momentum * mean;
                run_var = (1.0 - momentum) * run_var + momentum * (var * unbias);
            }
            if (cache) {
                cache->xhat = std::move(xhat);
                cache->inv_std = inv_std;
            }
        } else {
            const VecX inv_std = (run_var.array() + eps).rsqrt();
            MatX xhat = (x.colwise() - run_mean).array().colwise() * inv_std.array();
            out = (xhat.array().colwise() * gamma.array()).colwise() + beta.array();
            if (cache) {
                cache->xhat = std::move(xhat);
                cache->inv_std = inv_std;
            }
        }
        return out;
    }

    // training-mode backward through the batch statistics
    MatX backward(const Cache& cache, const MatX& dy) {
        const auto n = static_cast<double>(dy.cols());
        ggamma += (dy.array() * cache.xhat.array()).rowwise().sum().matrix();
        gbeta += dy.rowwise().sum();
        MatX dxhat = dy.array().colwise() * gamma.array();
        const VecX mean_dxhat = dxhat.rowwise().mean();
        const VecX mean_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().mean();
        MatX dx = dxhat;
        dx.colwise() -= mean_dxhat;
        dx -= (cache.xhat.array().colwise() * mean_dxhat_xhat.array()).matrix();
        return dx.array().colwise() * cache.inv_std.array();
    }
};

// Two dense layers with a ReLU, optionally batch-normalized before the
// nonlinearity: l1 -> [bn] -> relu -> l2.
struct Mlp2 {
    Linear l1, l2;
    bool use_bn = false;
    BatchNorm bn;

    struct Cache {
        MatX x;
        MatX pre;  // l1 output (pre-bn)
        MatX act;  // relu input (post-bn)
        BatchNorm::Cache bn_cache;
    };

    void init(int in, int hidden, int out, Rng& rng, bool zero_output, bool with_bn = false) {
        l1.init_xavier(hidden, in, rng);
        if (zero_output) {
            l2.init_zero(out, hidden);
        } else {
            l2.init_xavier(out, hidden, rng);
        }
        use_bn = with_bn;
        if (with_bn) bn.init(hidden);
    }

    void zero_grad() {
        l1.zero_grad();
        l2.zero_grad();
        if (use_bn) bn.zero_grad();
    }

    MatX forward(const MatX& x, bool training, bool update_running, Cache* cache) {
        MatX pre = l1.forward(x);
        MatX act = use_bn ? bn.forward(pre, training, update_running, cache ? &cache->bn_cache : nullptr)
                          : pre;
        MatX hidden = act.cwiseMax(0.0);
        MatX out = l2.forward(hidden);
        if (cache) {
            cache->x = x;
            cache->pre = std::move(pre);
            cache->act = std::move(act);
        }
        return out;
    }

    MatX backward(const Cache& cache, const MatX& dy) {
        const MatX hidden = cache.act.cwiseMax(0.0);
        MatX dhidden = l2.backward(hidden, dy);
        dhidden = (cache.act.array() > 0).select(dhidden, 0.0);
        const MatX dpre = use_bn ? bn.backward(cache.bn_cache, dhidden) : dhidden;
        return l1.backward(cache.x, dpre);
    }
};

}  // namespace cosplat
