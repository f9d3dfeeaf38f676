// Copyright Contributors to the cosplat project
// SPDX-License-Identifier: Apache-2.0
//
// Hierarchical feature field over the anchor cloud: per level, three
// axis-aligned feature planes (optionally attention-enhanced at the first
// level) provide global features via bilinear sampling, and a voxel context
// grid provides local features via trilinear aggregation of neighbor-anchor
// descriptors. Per-level features are fused and summed across active levels
// into the per-anchor embedding that the attribute decoders consume.
//
// Queries happen only at anchor positions, which are fixed, so sampling
// weights are cached and gradients flow purely through feature values.

#pragma once

#include "cosplat/nn.hpp"
#include "cosplat/scene.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace cosplat {

struct FeatureFieldConfig {
    int levels = 3;
    int plane_base_res = 32;   // doubled per level
    int plane_channels = 8;    // m
    int grid_base_res = 8;     // cells per axis, doubled per level
    int anchor_feature_dim = 8; // F, dimension of f_p
    int tri_feature_dim = 16;
    int ctx_feature_dim = 16;
    int hde_dim = 32;
    int phi_hidden = 32;
    int decode_hidden = 64;
    int attention_hidden = 6; // channel-attention bottleneck
    int attention_kernel = 7;
    bool attention_enabled = true;
    double plane_init = 1e-4;
    double init_opacity = 0.1;
    double init_scale = 0.05; // world units, bias of the log-scale head
};

// ---------------------------------------------------------------------------
// Tri-plane attention (channel gate, then spatial gate over the three planes
// concatenated along channels)
// ---------------------------------------------------------------------------

struct AttentionCache {
    bool active = false;
    int res = 0;
    MatX x;  // (3m) x res^2 concatenated base planes
    VecX s_avg, s_max;
    std::vector<int> argmax_texel; // per channel
    VecX h_avg, h_max;             // bottleneck pre-activations
    VecX gate_c;
    MatX x1;
    VecX m_avg, m_max;
    std::vector<int> argmax_ch; // per texel
    VecX gate_s;
};

struct TriPlaneAttention {
    Linear ca1, ca2;             // shared bottleneck for avg/max pooled vectors
    MatX kernel_avg, kernel_max; // 7x7 spatial-attention kernel, one per map
    double bias = 0;
    MatX g_kernel_avg, g_kernel_max;
    double g_bias = 0;

    void init(int channels, int hidden, int kernel, Rng& rng) {
        ca1.init_xavier(hidden, channels, rng);
        ca2.init_xavier(channels, hidden, rng);
        const double a = std::sqrt(6.0 / (2.0 * kernel * kernel + 1.0));
        kernel_avg.resize(kernel, kernel);
        kernel_max.resize(kernel, kernel);
        for (int j = 0; j < kernel; ++j)
            for (int i = 0; i < kernel; ++i) {
                kernel_avg(i, j) = rng.uniform(-a, a);
                kernel_max(i, j) = rng.uniform(-a, a);
            }
        bias = 0;
        zero_grad();
    }

    void zero_grad() {
        ca1.zero_grad();
        ca2.zero_grad();
        g_kernel_avg.setZero(kernel_avg.rows(), kernel_avg.cols());
        g_kernel_max.setZero(kernel_max.rows(), kernel_max.cols());
        g_bias = 0;
    }

    static int reflect(int p, int n) {
        while (p < 0 || p >= n) {
            if (p < 0) p = -p;
            if (p >= n) p = 2 * n - 2 - p;
        }
        return p;
    }

    // x: (channels) x (res*res), texel index = y*res + x
    MatX forward(const MatX& x, int res, AttentionCache* cache) const {
        const int ch = static_cast<int>(x.rows());
        const auto texels = static_cast<int>(x.cols());

        // channel attention: global avg+max pool -> shared bottleneck -> gate
        VecX s_avg = x.rowwise().mean();
        VecX s_max(ch);
        std::vector<int> argmax_texel(ch);
        for (int c = 0; c < ch; ++c) {
            int arg = 0;
            double best = x(c, 0);
            for (int t = 1; t < texels; ++t) {
                if (x(c, t) > best) {
                    best = x(c, t);
                    arg = t;
                }
            }
            s_max[c] = best;
            argmax_texel[c] = arg;
        }
        const VecX h_avg = ca1.forward(s_avg);
        const VecX h_max = ca1.forward(s_max);
        const VecX z = ca2.forward(h_avg.cwiseMax(0.0)) + ca2.forward(h_max.cwiseMax(0.0));
        VecX gate_c(ch);
        for (int c = 0; c < ch; ++c) gate_c[c] = sigmoid(z[c]);
        MatX x1 = x.array().colwise() * gate_c.array();

        // spatial attention: channelwise avg+max -> 7x7 conv (reflect) -> gate
        VecX m_avg = x1.colwise().mean();
        VecX m_max(texels);
        std::vector<int> argmax_ch(texels);
        for (int t = 0; t < texels; ++t) {
            int arg = 0;
            double best = x1(0, t);
            for (int c = 1; c < ch; ++c) {
                if (x1(c, t) > best) {
                    best = x1(c, t);
                    arg = c;
                }
            }
            m_max[t] = best;
            argmax_ch[t] = arg;
        }
        const int kk = static_cast<int>(kernel_avg.rows());
        const int half = kk / 2;
        VecX gate_s(texels);
        for (int py = 0; py < res; ++py) {
            for (int px = 0; px < res; ++px) {
                double acc = bias;
                for (int ky = 0; ky < kk; ++ky) {
                    const int sy = reflect(py + ky - half, res);
                    for (int kx = 0; kx < kk; ++kx) {
                        const int sx = reflect(px + kx - half, res);
                        const int t = sy * res + sx;
                        acc += kernel_avg(ky, kx) * m_avg[t] + kernel_max(ky, kx) * m_max[t];
                    }
                }
                gate_s[py * res + px] = sigmoid(acc);
            }
        }
        MatX x2 = x1.array().rowwise() * gate_s.transpose().array();

        if (cache) {
            cache->active = true;
            cache->res = res;
            cache->x = x;
            cache->s_avg = std::move(s_avg);
            cache->s_max = std::move(s_max);
            cache->argmax_texel = std::move(argmax_texel);
            cache->h_avg = h_avg;
            cache->h_max = h_max;
            cache->gate_c = std::move(gate_c);
            cache->x1 = x1;
            cache->m_avg = std::move(m_avg);
            cache->m_max = std::move(m_max);
            cache->argmax_ch = std::move(argmax_ch);
            cache->gate_s = std::move(gate_s);
        }
        return x2;
    }

    // returns dx; accumulates weight gradients
    MatX backward(const AttentionCache& c, const MatX& dx2) {
        const int ch = static_cast<int>(c.x.rows());
        const auto texels = static_cast<int>(c.x.cols());
        const int res = c.res;
        const int kk = static_cast<int>(kernel_avg.rows());
        const int half = kk / 2;

        // through the spatial gate
        VecX dgate_s = (dx2.array() * c.x1.array()).colwise().sum();
        MatX dx1 = dx2.array().rowwise() * c.gate_s.transpose().array();

        // conv backward (gate_s = sigmoid(conv(m_avg, m_max) + bias))
        VecX dconv(texels);
        for (int t = 0; t < texels; ++t) {
            dconv[t] = dgate_s[t] * c.gate_s[t] * (1.0 - c.gate_s[t]);
        }
        VecX dm_avg = VecX::Zero(texels), dm_max = VecX::Zero(texels);
        for (int py = 0; py < res; ++py) {
            for (int px = 0; px < res; ++px) {
                const double d = dconv[py * res + px];
                if (d == 0.0) continue;
                for (int ky = 0; ky < kk; ++ky) {
                    const int sy = reflect(py + ky - half, res);
                    for (int kx = 0; kx < kk; ++kx) {
                        const int sx = reflect(px + kx - half, res);
                        const int t = sy * res + sx;
                        g_kernel_avg(ky, kx) += d * c.m_avg[t];
                        g_kernel_max(ky, kx) += d * c.m_max[t];
                        dm_avg[t] += d * kernel_avg(ky, kx);
                        dm_max[t] += d * kernel_max(ky, kx);
                    }
                }
                g_bias += d;
            }
        }
        for (int t = 0; t < texels; ++t) {
            const double per_ch = dm_avg[t] / ch;
            for (int cidx = 0; cidx < ch; ++cidx) dx1(cidx, t) += per_ch;
            dx1(c.argmax_ch[t], t) += dm_max[t];
        }

        // through the channel gate
        VecX dgate_c = (dx1.array() * c.x.array()).rowwise().sum();
        MatX dx = dx1.array().colwise() * c.gate_c.array();
        VecX dz(ch);
        for (int cidx = 0; cidx < ch; ++cidx) {
            dz[cidx] = dgate_c[cidx] * c.gate_c[cidx] * (1.0 - c.gate_c[cidx]);
        }
        // shared bottleneck, avg and max branches
        const VecX relu_avg = c.h_avg.cwiseMax(0.0);
        const VecX relu_max = c.h_max.cwiseMax(0.0);
        VecX dh_avg = ca2.backward(relu_avg, dz);
        VecX dh_max = ca2.backward(relu_max, dz);
        dh_avg = (c.h_avg.array() > 0).select(dh_avg, 0.0);
        dh_max = (c.h_max.array() > 0).select(dh_max, 0.0);
        const VecX ds_avg = ca1.backward(c.s_avg, dh_avg);
        const VecX ds_max = ca1.backward(c.s_max, dh_max);
        for (int cidx = 0; cidx < ch; ++cidx) {
            const double per_texel = ds_avg[cidx] / texels;
            dx.row(cidx).array() += per_texel;
            dx(cidx, c.argmax_texel[cidx]) += ds_max[cidx];
        }
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Context grid
// ---------------------------------------------------------------------------

struct ContextGrid {
    int res = 0;                    // cells per axis
    std::vector<int> vertex_anchor; // (res+1)^3, -1 when empty

    int vertex_index(int ix, int iy, int iz) const {
        return (iz * (res + 1) + iy) * (res + 1) + ix;
    }

    // Every vertex adopts the nearest anchor within one cell diagonal.
    void build(const SceneBounds& bounds, const Mat3X& anchor_positions) {
        const int verts = (res + 1) * (res + 1) * (res + 1);
        vertex_anchor.assign(verts, -1);
        const Vec3 cell = bounds.extent() / res;
        const double max_dist = cell.norm();
        const int n = static_cast<int>(anchor_positions.cols());
        for (int iz = 0; iz <= res; ++iz) {
            for (int iy = 0; iy <= res; ++iy) {
                for (int ix = 0; ix <= res; ++ix) {
                    const Vec3 vp = bounds.aabb_min +
                                    cell.cwiseProduct(Vec3(ix, iy, iz));
                    double best = max_dist;
                    int arg = -1;
                    for (int a = 0; a < n; ++a) {
                        const double d = (anchor_positions.col(a) - vp).norm();
                        if (d < best) {
                            best = d;
                            arg = a;
                        }
                    }
                    vertex_anchor[vertex_index(ix, iy, iz)] = arg;
                }
            }
        }
    }
};

// Standard trilinear cell weights for a query point; weights sum to 1.
struct TrilinearQuery {
    std::array<int, 3> cell;
    std::array<double, 8> weights;      // corner order: bit0 x, bit1 y, bit2 z
    std::array<int, 8> vertex_indices;  // into ContextGrid::vertex_anchor
};

inline TrilinearQuery trilinear_query(const SceneBounds& bounds, int res, const Vec3& p) {
    TrilinearQuery q;
    const Vec3 n = bounds.normalized(p);
    Vec3 scaled = n * res;
    for (int d = 0; d < 3; ++d) {
        int c = static_cast<int>(std::floor(scaled[d]));
        c = std::clamp(c, 0, res - 1);
        q.cell[d] = c;
    }
    const Vec3 frac(scaled.x() - q.cell[0], scaled.y() - q.cell[1], scaled.z() - q.cell[2]);
    for (int corner = 0; corner < 8; ++corner) {
        const int dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
        const double wx = dx ? frac.x() : 1.0 - frac.x();
        const double wy = dy ? frac.y() : 1.0 - frac.y();
        const double wz = dz ? frac.z() : 1.0 - frac.z();
        q.weights[corner] = wx * wy * wz;
        q.vertex_indices[corner] =
            ((q.cell[2] + dz) * (res + 1) + (q.cell[1] + dy)) * (res + 1) + (q.cell[0] + dx);
    }
    return q;
}

// Bilinear sample footprint on a plane; align-corners mapping of [0,1]^2 onto
// texel centers, exact for affine texel fields.
struct BilinearQuery {
    std::array<int, 4> texel;
    std::array<double, 4> weights;
};

inline BilinearQuery bilinear_query(int res, const Vec2& uv) {
    BilinearQuery q;
    const double fx = uv.x() * (res - 1);
    const double fy = uv.y() * (res - 1);
    int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, res - 2);
    int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, res - 2);
    const double tx = fx - x0, ty = fy - y0;
    q.texel = {y0 * res + x0, y0 * res + x0 + 1, (y0 + 1) * res + x0, (y0 + 1) * res + x0 + 1};
    q.weights = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
    return q;
}

// ---------------------------------------------------------------------------
// Feature field
// ---------------------------------------------------------------------------

// Per-anchor context aggregation footprint (cached; anchors are fixed).
struct ContextFootprint {
    // (anchor, normalized weight) pairs over non-empty cell vertices
    std::array<int, 8> anchor;
    std::array<double, 8> weight;
    int count = 0;
    bool empty = true;
};

struct FieldLevelForward {
    MatX tri_in; // 6m x n: per plane (base, enhanced) bilinear samples
    Mlp2::Cache phi_t_cache;
    MatX ft;
    MatX agg; // (F+9) x n
    Mlp2::Cache phi_c_cache;
    MatX fc;
    MatX fused_in; // (tf+cf) x n
};

struct FieldForward {
    int n = 0;
    bool training = false;
    MatX fh; // D x n
    std::vector<FieldLevelForward> levels;
    AttentionCache attn;
};

struct DecodeForward {
    MatX input; // (6+D) x n
    Mlp2::Cache cache_op, cache_cov, cache_color;
    MatX out_op;    // k x n
    MatX out_cov;   // 7k x n
    MatX out_color; // 12k x n
};

// Maps spawned-gaussian index -> (anchor, offset slot); rebuilt when the
// anchor population changes.
struct SpawnMap {
    std::vector<std::pair<int, int>> slots;
    int size() const { return static_cast<int>(slots.size()); }

    static SpawnMap build(const AnchorSet& anchors) {
        SpawnMap m;
        m.slots.reserve(static_cast<std::size_t>(anchors.size()) * anchors.k);
        for (int a = 0; a < anchors.size(); ++a) {
            for (int i = 0; i < anchors.k; ++i) {
                if (anchors.alive(a, i)) m.slots.emplace_back(a, i);
            }
        }
        return m;
    }
};

class FeatureField {
public:
    FeatureFieldConfig cfg;

    struct PlaneLevel {
        int res = 0;
        std::array<MatX, 3> base;     // parameters, (m) x res^2
        std::array<MatX, 3> grad;     // matching gradients
        std::array<MatX, 3> enhanced; // forward buffer
    };

    std::vector<PlaneLevel> planes;
    std::vector<ContextGrid> grids;
    std::vector<Mlp2> phi_t, phi_c;
    std::vector<Linear> fusion;
    TriPlaneAttention attention;
    Mlp2 head_opacity, head_cov, head_color;
    int active_levels = 1;
    int anchor_k = 5;

    // cached per-level, per-anchor sampling footprints
    std::vector<std::vector<BilinearQuery>> plane_queries[3]; // [plane][level][anchor]
    std::vector<std::vector<ContextFootprint>> context_queries; // [level][anchor]

    void init(const FeatureFieldConfig& config, int k, Rng& rng) {
        cfg = config;
        anchor_k = k;
        planes.resize(cfg.levels);
        grids.resize(cfg.levels);
        phi_t.resize(cfg.levels);
        phi_c.resize(cfg.levels);
        fusion.resize(cfg.levels);
        const int m = cfg.plane_channels;
        for (int l = 0; l < cfg.levels; ++l) {
            auto& pl = planes[l];
            pl.res = cfg.plane_base_res << l;
            for (int p = 0; p < 3; ++p) {
                pl.base[p].resize(m, pl.res * pl.res);
                for (int j = 0; j < pl.base[p].size(); ++j) {
                    pl.base[p].data()[j] = rng.uniform(-cfg.plane_init, cfg.plane_init);
                }
                pl.grad[p].setZero(m, pl.res * pl.res);
                pl.enhanced[p] = pl.base[p];
            }
            grids[l].res = cfg.grid_base_res << l;
            // level 0 decodes normally; later levels are loss-neutral at
            // activation (zero output layers)
            const bool zero_out = l > 0;
            phi_t[l].init(6 * m, cfg.phi_hidden, cfg.tri_feature_dim, rng, zero_out, false);
            phi_c[l].init(cfg.anchor_feature_dim + 9, cfg.phi_hidden, cfg.ctx_feature_dim, rng,
                          zero_out, true);
            if (zero_out) {
                fusion[l].init_zero(cfg.hde_dim, cfg.tri_feature_dim + cfg.ctx_feature_dim);
            } else {
                fusion[l].init_xavier(cfg.hde_dim, cfg.tri_feature_dim + cfg.ctx_feature_dim, rng);
            }
        }
        attention.init(3 * m, cfg.attention_hidden, cfg.attention_kernel, rng);

        const int in = 6 + cfg.hde_dim;
        head_opacity.init(in, cfg.decode_hidden, k, rng, true);
        head_cov.init(in, cfg.decode_hidden, 7 * k, rng, true);
        head_color.init(in, cfg.decode_hidden, 12 * k, rng, true);
        head_opacity.l2.b.setConstant(logit(cfg.init_opacity));
        for (int i = 0; i < k; ++i) {
            head_cov.l2.b[7 * i + 0] = 1.0; // identity quaternion
            head_cov.l2.b.segment(7 * i + 4, 3).setConstant(std::log(cfg.init_scale));
        }
        active_levels = 1;
    }

    // Rebuilds grids and cached sampling footprints for all active levels.
    // Called at init, level activation, and after pruning.
    void rebuild_queries(const SceneBounds& bounds, const AnchorSet& anchors) {
        const int n = anchors.size();
        context_queries.assign(cfg.levels, {});
        for (int p = 0; p < 3; ++p) plane_queries[p].assign(cfg.levels, {});
        for (int l = 0; l < active_levels; ++l) {
            grids[l].build(bounds, anchors.positions);
            context_queries[l].resize(n);
            for (int p = 0; p < 3; ++p) plane_queries[p][l].resize(n);
            for (int a = 0; a < n; ++a) {
                const Vec3 pos = anchors.positions.col(a);
                for (int p = 0; p < 3; ++p) {
                    const Vec2 uv = project_to_plane(pos, static_cast<PlaneAxis>(p), bounds);
                    plane_queries[p][l][a] = bilinear_query(planes[l].res, uv);
                }
                const TrilinearQuery tq = trilinear_query(bounds, grids[l].res, pos);
                ContextFootprint fp;
                double wsum = 0;
                for (int c = 0; c < 8; ++c) {
                    const int adopt = grids[l].vertex_anchor[tq.vertex_indices[c]];
                    if (adopt < 0) continue;
                    fp.anchor[fp.count] = adopt;
                    fp.weight[fp.count] = tq.weights[c];
                    wsum += tq.weights[c];
                    ++fp.count;
                }
                if (fp.count > 0 && wsum > 1e-12) {
                    for (int c = 0; c < fp.count; ++c) fp.weight[c] /= wsum;
                    fp.empty = false;
                }
                context_queries[l][a] = fp;
            }
        }
    }

    void zero_grad() {
        for (auto& pl : planes) {
            for (auto& g : pl.grad) g.setZero();
        }
        attention.zero_grad();
        for (auto& m : phi_t) m.zero_grad();
        for (auto& m : phi_c) m.zero_grad();
        for (auto& f : fusion) f.zero_grad();
        head_opacity.zero_grad();
        head_cov.zero_grad();
        head_color.zero_grad();
    }

    // f_g = [f_p, anchor position (normalized), mean offset, mean offset scale]
    VecX vertex_feature(const AnchorSet& anchors, const SceneBounds& bounds, int a) const {
        const int fdim = cfg.anchor_feature_dim;
        VecX f(fdim + 9);
        f.head(fdim) = anchors.intrinsic.col(a);
        f.segment(fdim, 3) = bounds.normalized(anchors.positions.col(a));
        Vec3 mean_off = Vec3::Zero(), mean_scale = Vec3::Zero();
        int live = 0;
        for (int i = 0; i < anchors.k; ++i) {
            if (!anchors.alive(a, i)) continue;
            mean_off += anchors.offsets.col(a * anchors.k + i);
            mean_scale += anchors.offset_scales.col(a * anchors.k + i);
            ++live;
        }
        if (live > 0) {
            mean_off /= live;
            mean_scale /= live;
        }
        f.segment(fdim + 3, 3) = mean_off;
        f.segment(fdim + 6, 3) = mean_scale;
        return f;
    }

    // Recomputes attention-enhanced planes (level 0 only; other levels and
    // the attention-off path pass base features through unchanged).
    void refresh_enhanced(FieldForward* fwd) {
        const int m = cfg.plane_channels;
        for (int l = 0; l < active_levels; ++l) {
            auto& pl = planes[l];
            if (l == 0 && cfg.attention_enabled) {
                MatX x(3 * m, pl.res * pl.res);
                for (int p = 0; p < 3; ++p) x.middleRows(p * m, m) = pl.base[p];
                const MatX x2 = attention.forward(x, pl.res, fwd ? &fwd->attn : nullptr);
                for (int p = 0; p < 3; ++p) pl.enhanced[p] = x2.middleRows(p * m, m);
            } else {
                for (int p = 0; p < 3; ++p) pl.enhanced[p] = pl.base[p];
            }
        }
    }

    // Batched per-anchor embedding f_h across active levels.
    FieldForward compute_hde(const AnchorSet& anchors, const SceneBounds& bounds, bool training,
                             bool update_bn) {
        const int n = anchors.size();
        const int m = cfg.plane_channels;
        const int fdim = cfg.anchor_feature_dim;
        FieldForward fwd;
        fwd.n = n;
        fwd.training = training;
        fwd.levels.resize(active_levels);
        fwd.fh.setZero(cfg.hde_dim, n);
        refresh_enhanced(&fwd);

        MatX fg(fdim + 9, n);
        for (int a = 0; a < n; ++a) fg.col(a) = vertex_feature(anchors, bounds, a);

        for (int l = 0; l < active_levels; ++l) {
            auto& lvl = fwd.levels[l];
            const auto& pl = planes[l];
            lvl.tri_in.setZero(6 * m, n);
            for (int a = 0; a < n; ++a) {
                for (int p = 0; p < 3; ++p) {
                    const auto& q = plane_queries[p][l][a];
                    for (int c = 0; c < 4; ++c) {
                        lvl.tri_in.col(a).segment(2 * p * m, m) +=
                            q.weights[c] * pl.base[p].col(q.texel[c]);
                        lvl.tri_in.col(a).segment((2 * p + 1) * m, m) +=
                            q.weights[c] * pl.enhanced[p].col(q.texel[c]);
                    }
                }
            }
            lvl.ft = phi_t[l].forward(lvl.tri_in, training, update_bn, &lvl.phi_t_cache);

            lvl.agg.setZero(fdim + 9, n);
            for (int a = 0; a < n; ++a) {
                const auto& fp = context_queries[l][a];
                for (int c = 0; c < fp.count; ++c) {
                    lvl.agg.col(a) += fp.weight[c] * fg.col(fp.anchor[c]);
                }
            }
            lvl.fc = phi_c[l].forward(lvl.agg, training, update_bn, &lvl.phi_c_cache);
            for (int a = 0; a < n; ++a) {
                if (context_queries[l][a].empty) lvl.fc.col(a).setZero();
            }

            lvl.fused_in.resize(cfg.tri_feature_dim + cfg.ctx_feature_dim, n);
            lvl.fused_in.topRows(cfg.tri_feature_dim) = lvl.ft;
            lvl.fused_in.bottomRows(cfg.ctx_feature_dim) = lvl.fc;
            fwd.fh += fusion[l].forward(lvl.fused_in);
        }
        return fwd;
    }

    // Structural backward: from d(loss)/d(f_h) into planes, attention, MLPs
    // and anchor parameters.
    void backward_hde(const FieldForward& fwd, const MatX& dfh, const AnchorSet& anchors,
                      AnchorGrads& anchor_grads) {
        const int n = fwd.n;
        const int m = cfg.plane_channels;
        const int fdim = cfg.anchor_feature_dim;
        MatX dfg = MatX::Zero(fdim + 9, n);

        for (int l = active_levels - 1; l >= 0; --l) {
            const auto& lvl = fwd.levels[l];
            const MatX dfused = fusion[l].backward(lvl.fused_in, dfh);
            const MatX dft = dfused.topRows(cfg.tri_feature_dim);
            MatX dfc = dfused.bottomRows(cfg.ctx_feature_dim);
            for (int a = 0; a < n; ++a) {
                if (context_queries[l][a].empty) dfc.col(a).setZero();
            }

            const MatX dtri_in = phi_t[l].backward(lvl.phi_t_cache, dft);
            auto& pl = planes[l];
            MatX denhanced[3];
            for (int p = 0; p < 3; ++p) denhanced[p].setZero(m, pl.res * pl.res);
            for (int a = 0; a < n; ++a) {
                for (int p = 0; p < 3; ++p) {
                    const auto& q = plane_queries[p][l][a];
                    for (int c = 0; c < 4; ++c) {
                        pl.grad[p].col(q.texel[c]) +=
                            q.weights[c] * dtri_in.col(a).segment(2 * p * m, m);
                        denhanced[p].col(q.texel[c]) +=
                            q.weights[c] * dtri_in.col(a).segment((2 * p + 1) * m, m);
                    }
                }
            }
            if (l == 0 && cfg.attention_enabled) {
                MatX dx2(3 * m, pl.res * pl.res);
                for (int p = 0; p < 3; ++p) dx2.middleRows(p * m, m) = denhanced[p];
                const MatX dx = attention.backward(fwd.attn, dx2);
                for (int p = 0; p < 3; ++p) pl.grad[p] += dx.middleRows(p * m, m);
            } else {
                for (int p = 0; p < 3; ++p) pl.grad[p] += denhanced[p];
            }

            const MatX dagg = phi_c[l].backward(lvl.phi_c_cache, dfc);
            for (int a = 0; a < n; ++a) {
                const auto& fp = context_queries[l][a];
                for (int c = 0; c < fp.count; ++c) {
                    dfg.col(fp.anchor[c]) += fp.weight[c] * dagg.col(a);
                }
            }
        }

        // scatter f_g gradients into anchor parameters
        for (int a = 0; a < n; ++a) {
            anchor_grads.intrinsic.col(a) += dfg.col(a).head(fdim);
            const Vec3 d_off = dfg.col(a).segment(fdim + 3, 3);
            const Vec3 d_scale = dfg.col(a).segment(fdim + 6, 3);
            const int live = anchors.live_offsets(a);
            if (live == 0) continue;
            for (int i = 0; i < anchors.k; ++i) {
                if (!anchors.alive(a, i)) continue;
                anchor_grads.offsets.col(a * anchors.k + i) += d_off / live;
                anchor_grads.offset_scales.col(a * anchors.k + i) += d_scale / live;
            }
        }
    }

    // Per-view attribute decoding: MLPs([x^a, x^p, f_h]).
    DecodeForward decode(const AnchorSet& anchors, const SceneBounds& bounds, const Camera& cam,
                         const MatX& fh, bool training) {
        const int n = anchors.size();
        DecodeForward d;
        d.input.resize(6 + cfg.hde_dim, n);
        const Vec3 cam_center = cam.center();
        for (int a = 0; a < n; ++a) {
            d.input.col(a).head<3>() = bounds.normalized(anchors.positions.col(a));
            const Vec3 u = anchors.positions.col(a) - cam_center;
            const double len = u.norm();
            d.input.col(a).segment<3>(3) = len > 1e-12 ? Vec3(u / len) : Vec3(0, 0, 1);
        }
        d.input.bottomRows(cfg.hde_dim) = fh;
        d.out_op = head_opacity.forward(d.input, training, false, &d.cache_op);
        d.out_cov = head_cov.forward(d.input, training, false, &d.cache_cov);
        d.out_color = head_color.forward(d.input, training, false, &d.cache_color);
        return d;
    }

    // Assembles render-ready raw Gaussian parameters for the spawned set.
    GaussianParams assemble(const AnchorSet& anchors, const SpawnMap& map,
                            const DecodeForward& d) const {
        GaussianParams p(map.size());
        for (int g = 0; g < map.size(); ++g) {
            const auto [a, i] = map.slots[g];
            p.means.col(g) = anchors.spawn_position(a, i);
            p.rotations.col(g) = d.out_cov.col(a).segment<4>(7 * i);
            p.log_scales.col(g) = d.out_cov.col(a).segment<3>(7 * i + 4);
            p.opacity_logits[g] = d.out_op(i, a);
            for (int ch = 0; ch < 3; ++ch) {
                p.base_colors(ch, g) = sigmoid(d.out_color(12 * i + ch, a));
            }
            p.sh1.col(g) = d.out_color.col(a).segment<9>(12 * i + 3);
        }
        return p;
    }

    // Backward through decoding: head weight gradients (view path), f_h
    // gradient accumulation, and the geometric chain from spawned means into
    // offsets and the anchor scale.
    void decode_backward(const AnchorSet& anchors, const SpawnMap& map, DecodeForward& d,
                         const GaussianParams& assembled, const GaussianGrads& g, MatX& dfh,
                         AnchorGrads& view_grads) {
        const int n = anchors.size();
        MatX dop = MatX::Zero(anchor_k, n);
        MatX dcov = MatX::Zero(7 * anchor_k, n);
        MatX dcolor = MatX::Zero(12 * anchor_k, n);
        for (int gi = 0; gi < map.size(); ++gi) {
            const auto [a, i] = map.slots[gi];
            dop(i, a) += g.opacity_logits[gi];
            dcov.col(a).segment<4>(7 * i) += g.rotations.col(gi);
            dcov.col(a).segment<3>(7 * i + 4) += g.log_scales.col(gi);
            for (int ch = 0; ch < 3; ++ch) {
                const double c = assembled.base_colors(ch, gi);
                dcolor(12 * i + ch, a) += g.base_colors(ch, gi) * c * (1.0 - c);
            }
            dcolor.col(a).segment<9>(12 * i + 3) += g.sh1.col(gi);

            // geometric path: mu = x^a + O_i * exp(log l^a)
            const double la = anchors.anchor_scale(a);
            view_grads.offsets.col(a * anchors.k + i) += g.means.col(gi) * la;
            view_grads.log_anchor_scale[a] +=
                g.means.col(gi).dot(anchors.offsets.col(a * anchors.k + i)) * la;
        }
        MatX dinput = head_opacity.backward(d.cache_op, dop);
        dinput += head_cov.backward(d.cache_cov, dcov);
        dinput += head_color.backward(d.cache_color, dcolor);
        dfh += dinput.bottomRows(cfg.hde_dim);
    }

    // --- single-point helpers (used by tests and diagnostics) ---

    VecX sample_plane(int level, int plane, const Vec3& p, const SceneBounds& bounds,
                      bool enhanced) const {
        const auto& pl = planes[level];
        const Vec2 uv = project_to_plane(p, static_cast<PlaneAxis>(plane), bounds);
        const BilinearQuery q = bilinear_query(pl.res, uv);
        VecX out = VecX::Zero(cfg.plane_channels);
        const MatX& map = enhanced ? pl.enhanced[plane] : pl.base[plane];
        for (int c = 0; c < 4; ++c) out += q.weights[c] * map.col(q.texel[c]);
        return out;
    }

    // Concatenated (base, enhanced) samples of the three planes, decoder input order.
    VecX plane_samples(int level, const Vec3& p, const SceneBounds& bounds) const {
        const int m = cfg.plane_channels;
        VecX in(6 * m);
        for (int plane = 0; plane < 3; ++plane) {
            in.segment(2 * plane * m, m) = sample_plane(level, plane, p, bounds, false);
            in.segment((2 * plane + 1) * m, m) = sample_plane(level, plane, p, bounds, true);
        }
        return in;
    }

    VecX query_triplane(int level, const Vec3& p, const SceneBounds& bounds) {
        const MatX in = plane_samples(level, p, bounds);
        return phi_t[level].forward(in, false, false, nullptr);
    }

    // Weighted neighbor-anchor aggregation at an arbitrary point; returns the
    // pre-decoder feature and whether the neighborhood was empty.
    std::pair<VecX, bool> context_aggregate(int level, const Vec3& p, const SceneBounds& bounds,
                                            const AnchorSet& anchors) const {
        const TrilinearQuery tq = trilinear_query(bounds, grids[level].res, p);
        VecX agg = VecX::Zero(cfg.anchor_feature_dim + 9);
        double wsum = 0;
        for (int c = 0; c < 8; ++c) {
            const int adopt = grids[level].vertex_anchor[tq.vertex_indices[c]];
            if (adopt < 0) continue;
            agg += tq.weights[c] * vertex_feature(anchors, bounds, adopt);
            wsum += tq.weights[c];
        }
        if (wsum <= 1e-12) return {VecX::Zero(cfg.anchor_feature_dim + 9), true};
        return {VecX(agg / wsum), false};
    }

    VecX query_context(int level, const Vec3& p, const SceneBounds& bounds,
                       const AnchorSet& anchors) {
        auto [agg, empty] = context_aggregate(level, p, bounds, anchors);
        if (empty) return VecX::Zero(cfg.ctx_feature_dim);
        return phi_c[level].forward(agg, false, false, nullptr);
    }

    // Arbitrary-point embedding over the currently active levels (eval-mode
    // batch norm; planes' enhanced buffers must be current).
    VecX hde_at(const Vec3& p, const SceneBounds& bounds, const AnchorSet& anchors) {
        VecX fh = VecX::Zero(cfg.hde_dim);
        for (int l = 0; l < active_levels; ++l) {
            VecX fused_in(cfg.tri_feature_dim + cfg.ctx_feature_dim);
            fused_in.head(cfg.tri_feature_dim) = query_triplane(l, p, bounds);
            fused_in.tail(cfg.ctx_feature_dim) = query_context(l, p, bounds, anchors);
            fh += fusion[l].forward(fused_in);
        }
        return fh;
    }
};

}  // namespace cosplat
