#include "synth/nn.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "synth/errors.hpp"

namespace synth {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

// ---- Conv2d ----------------------------------------------------------------

void Conv2d::init(const std::string& name, int in_c_, int out_c_, int k_, Rng& rng) {
    in_c = in_c_;
    out_c = out_c_;
    k = k_;
    w.init(name + ".w", size_t(out_c) * in_c * k * k);
    b.init(name + ".b", size_t(out_c));
    const float std_ = std::sqrt(2.f / float(in_c * k * k));
    for (auto& x : w.w) x = rng.normal() * std_;
}

void Conv2d::init_zero(const std::string& name, int in_c_, int out_c_, int k_) {
    in_c = in_c_;
    out_c = out_c_;
    k = k_;
    w.init(name + ".w", size_t(out_c) * in_c * k * k);
    b.init(name + ".b", size_t(out_c));
}

static void im2col(const Tensor& x, int k, FloatVec& cols) {
    const int pad = k / 2, h = x.h, w = x.w;
    const size_t hw = size_t(h) * w;
    cols.assign(size_t(x.c) * k * k * hw, 0.f);
    for (int ic = 0; ic < x.c; ++ic)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                float* dst = cols.data() + ((size_t(ic) * k + ky) * k + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    if (sy < 0 || sy >= h) continue;
                    const int x_lo = std::max(0, pad - kx);
                    const int x_hi = std::min(w, w + pad - kx);
                    const float* src = &x.v[(size_t(ic) * h + sy) * w];
                    for (int xx = x_lo; xx < x_hi; ++xx)
                        dst[size_t(y) * w + xx] = src[xx + kx - pad];
                }
            }
}

Tensor Conv2d::forward(const Tensor& x) const {
    if (x.c != in_c) throw ValidationError("conv channel mismatch: " + w.name);
    const size_t hw = size_t(x.h) * x.w;
    Tensor y(out_c, x.h, x.w);
    if (k == 1) {
        MapConst wm(w.w.data(), out_c, in_c);
        MapConst xm(x.v.data(), in_c, Eigen::Index(hw));
        MapMat ym(y.v.data(), out_c, Eigen::Index(hw));
        ym.noalias() = wm * xm;
    } else {
        FloatVec cols;
        im2col(x, k, cols);
        MapConst wm(w.w.data(), out_c, in_c * k * k);
        MapConst cm(cols.data(), in_c * k * k, Eigen::Index(hw));
        MapMat ym(y.v.data(), out_c, Eigen::Index(hw));
        ym.noalias() = wm * cm;
    }
    for (int oc = 0; oc < out_c; ++oc) {
        const float bias = b.w[size_t(oc)];
        float* row = y.v.data() + size_t(oc) * hw;
        for (size_t i = 0; i < hw; ++i) row[i] += bias;
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& dy) {
    const int pad = k / 2;
    const size_t hw = size_t(x.h) * x.w;
    MapConst dym(dy.v.data(), out_c, Eigen::Index(hw));

    for (int oc = 0; oc < out_c; ++oc)
        b.g[size_t(oc)] += dym.row(oc).sum();

    Tensor dx(in_c, x.h, x.w);
    if (k == 1) {
        MapConst xm(x.v.data(), in_c, Eigen::Index(hw));
        MapMat gwm(w.g.data(), out_c, in_c);
        gwm.noalias() += dym * xm.transpose();
        MapConst wm(w.w.data(), out_c, in_c);
        MapMat dxm(dx.v.data(), in_c, Eigen::Index(hw));
        dxm.noalias() = wm.transpose() * dym;
        return dx;
    }

    FloatVec cols;
    im2col(x, k, cols);
    MapConst cm(cols.data(), in_c * k * k, Eigen::Index(hw));
    MapMat gwm(w.g.data(), out_c, in_c * k * k);
    gwm.noalias() += dym * cm.transpose();

    FloatVec dcols(size_t(in_c) * k * k * hw);
    MapConst wm(w.w.data(), out_c, in_c * k * k);
    MapMat dcm(dcols.data(), in_c * k * k, Eigen::Index(hw));
    dcm.noalias() = wm.transpose() * dym;

    // col2im scatter-add
    for (int ic = 0; ic < in_c; ++ic)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const float* src = dcols.data() + ((size_t(ic) * k + ky) * k + kx) * hw;
                for (int y = 0; y < x.h; ++y) {
                    const int sy = y + ky - pad;
                    if (sy < 0 || sy >= x.h) continue;
                    const int x_lo = std::max(0, pad - kx);
                    const int x_hi = std::min(x.w, x.w + pad - kx);
                    float* dst = &dx.v[(size_t(ic) * x.h + sy) * x.w];
                    for (int xx = x_lo; xx < x_hi; ++xx)
                        dst[xx + kx - pad] += src[size_t(y) * x.w + xx];
                }
            }
    return dx;
}

// ---- Linear ----------------------------------------------------------------

void Linear::init(const std::string& name, int in_d_, int out_d_, Rng& rng) {
    in_d = in_d_;
    out_d = out_d_;
    w.init(name + ".w", size_t(out_d) * in_d);
    b.init(name + ".b", size_t(out_d));
    const float std_ = std::sqrt(1.f / float(in_d));
    for (auto& x : w.w) x = rng.normal() * std_;
}

std::vector<float> Linear::forward(const std::vector<float>& x) const {
    std::vector<float> y(size_t(out_d), 0.f);
    for (int o = 0; o < out_d; ++o) {
        float acc = b.w[size_t(o)];
        const float* row = w.w.data() + size_t(o) * in_d;
        for (int i = 0; i < in_d; ++i) acc += row[i] * x[size_t(i)];
        y[size_t(o)] = acc;
    }
    return y;
}

std::vector<float> Linear::backward(const std::vector<float>& x, const std::vector<float>& dy) {
    std::vector<float> dx(size_t(in_d), 0.f);
    for (int o = 0; o < out_d; ++o) {
        const float d = dy[size_t(o)];
        b.g[size_t(o)] += d;
        float* grow = w.g.data() + size_t(o) * in_d;
        const float* wrow = w.w.data() + size_t(o) * in_d;
        for (int i = 0; i < in_d; ++i) {
            grow[i] += d * x[size_t(i)];
            dx[size_t(i)] += d * wrow[i];
        }
    }
    return dx;
}

// ---- GroupNorm ---------------------------------------------------------------

void GroupNorm::init(const std::string& name, int channels_, int groups_) {
    channels = channels_;
    groups = groups_;
    if (channels % groups != 0) throw ValidationError("groupnorm channels % groups != 0");
    gamma.init(name + ".gamma", size_t(channels));
    beta.init(name + ".beta", size_t(channels));
    std::fill(gamma.w.begin(), gamma.w.end(), 1.f);
}

Tensor GroupNorm::forward(const Tensor& x, Stats& stats) const {
    const int cpg = channels / groups;
    const size_t hw = size_t(x.h) * x.w;
    const float eps = 1e-5f;
    stats.mean.assign(size_t(groups), 0.f);
    stats.inv_std.assign(size_t(groups), 0.f);
    Tensor y(x.c, x.h, x.w);
    for (int g = 0; g < groups; ++g) {
        const size_t base = size_t(g) * cpg * hw;
        const size_t n = size_t(cpg) * hw;
        double sum = 0, sq = 0;
        for (size_t i = 0; i < n; ++i) {
            const double v = x.v[base + i];
            sum += v;
            sq += v * v;
        }
        const float mean = float(sum / double(n));
        const float var = float(sq / double(n)) - mean * mean;
        const float inv_std = 1.f / std::sqrt(var + eps);
        stats.mean[size_t(g)] = mean;
        stats.inv_std[size_t(g)] = inv_std;
        for (int cc = 0; cc < cpg; ++cc) {
            const int ch = g * cpg + cc;
            const float ga = gamma.w[size_t(ch)], be = beta.w[size_t(ch)];
            const float* src = x.v.data() + (size_t(ch)) * hw;
            float* dst = y.v.data() + (size_t(ch)) * hw;
            for (size_t i = 0; i < hw; ++i)
                dst[i] = (src[i] - mean) * inv_std * ga + be;
        }
    }
    return y;
}

Tensor GroupNorm::backward(const Tensor& x, const Stats& stats, const Tensor& dy) {
    const int cpg = channels / groups;
    const size_t hw = size_t(x.h) * x.w;
    Tensor dx(x.c, x.h, x.w);
    for (int g = 0; g < groups; ++g) {
        const float mean = stats.mean[size_t(g)], inv_std = stats.inv_std[size_t(g)];
        const size_t n = size_t(cpg) * hw;
        double m1 = 0, m2 = 0;
        for (int cc = 0; cc < cpg; ++cc) {
            const int ch = g * cpg + cc;
            const float ga = gamma.w[size_t(ch)];
            const float* xs = x.v.data() + size_t(ch) * hw;
            const float* ds = dy.v.data() + size_t(ch) * hw;
            double gg = 0, gb = 0;
            for (size_t i = 0; i < hw; ++i) {
                const float xhat = (xs[i] - mean) * inv_std;
                const float t = ds[i] * ga;
                m1 += t;
                m2 += double(t) * xhat;
                gg += double(ds[i]) * xhat;
                gb += ds[i];
            }
            gamma.g[size_t(ch)] += float(gg);
            beta.g[size_t(ch)] += float(gb);
        }
        m1 /= double(n);
        m2 /= double(n);
        for (int cc = 0; cc < cpg; ++cc) {
            const int ch = g * cpg + cc;
            const float ga = gamma.w[size_t(ch)];
            const float* xs = x.v.data() + size_t(ch) * hw;
            const float* ds = dy.v.data() + size_t(ch) * hw;
            float* dd = dx.v.data() + size_t(ch) * hw;
            for (size_t i = 0; i < hw; ++i) {
                const float xhat = (xs[i] - mean) * inv_std;
                const float t = ds[i] * ga;
                dd[i] = inv_std * (t - float(m1) - xhat * float(m2));
            }
        }
    }
    return dx;
}

// ---- Embedding ---------------------------------------------------------------

void Embedding::init(const std::string& name, int rows_, int dim_, Rng& rng) {
    rows = rows_;
    dim = dim_;
    table.init(name + ".table", size_t(rows) * dim);
    for (auto& x : table.w) x = rng.normal() * 0.02f;
}

std::vector<float> Embedding::forward(int row) const {
    if (row < 0 || row >= rows) throw LookupError("embedding row out of range");
    return std::vector<float>(table.w.begin() + size_t(row) * dim,
                              table.w.begin() + size_t(row + 1) * dim);
}

void Embedding::backward(int row, const std::vector<float>& dy) {
    for (int i = 0; i < dim; ++i) table.g[size_t(row) * dim + i] += dy[size_t(i)];
}

// ---- functional ops ----------------------------------------------------------

Tensor silu(const Tensor& x) {
    Tensor y = x;
    for (auto& v : y.v) {
        const float s = 1.f / (1.f + std::exp(-v));
        v = v * s;
    }
    return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& dy) {
    Tensor dx(x.c, x.h, x.w);
    for (size_t i = 0; i < x.v.size(); ++i) {
        const float s = 1.f / (1.f + std::exp(-x.v[i]));
        dx.v[i] = dy.v[i] * s * (1.f + x.v[i] * (1.f - s));
    }
    return dx;
}

void silu_vec(std::vector<float>& x) {
    for (auto& v : x) {
        const float s = 1.f / (1.f + std::exp(-v));
        v = v * s;
    }
}

std::vector<float> silu_vec_backward(const std::vector<float>& x, const std::vector<float>& dy) {
    std::vector<float> dx(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const float s = 1.f / (1.f + std::exp(-x[i]));
        dx[i] = dy[i] * s * (1.f + x[i] * (1.f - s));
    }
    return dx;
}

Tensor avgpool2(const Tensor& x) {
    Tensor y(x.c, x.h / 2, x.w / 2);
    for (int c = 0; c < x.c; ++c)
        for (int yy = 0; yy < y.h; ++yy)
            for (int xx = 0; xx < y.w; ++xx)
                y.at(c, yy, xx) = 0.25f * (x.at(c, 2 * yy, 2 * xx) + x.at(c, 2 * yy, 2 * xx + 1) +
                                           x.at(c, 2 * yy + 1, 2 * xx) + x.at(c, 2 * yy + 1, 2 * xx + 1));
    return y;
}

Tensor avgpool2_backward(const Tensor& x_like, const Tensor& dy) {
    Tensor dx(x_like.c, x_like.h, x_like.w);
    for (int c = 0; c < dx.c; ++c)
        for (int yy = 0; yy < dy.h; ++yy)
            for (int xx = 0; xx < dy.w; ++xx) {
                const float v = 0.25f * dy.at(c, yy, xx);
                dx.at(c, 2 * yy, 2 * xx) += v;
                dx.at(c, 2 * yy, 2 * xx + 1) += v;
                dx.at(c, 2 * yy + 1, 2 * xx) += v;
                dx.at(c, 2 * yy + 1, 2 * xx + 1) += v;
            }
    return dx;
}

Tensor upsample2(const Tensor& x) {
    Tensor y(x.c, x.h * 2, x.w * 2);
    for (int c = 0; c < x.c; ++c)
        for (int yy = 0; yy < y.h; ++yy)
            for (int xx = 0; xx < y.w; ++xx)
                y.at(c, yy, xx) = x.at(c, yy / 2, xx / 2);
    return y;
}

Tensor upsample2_backward(const Tensor& x_like, const Tensor& dy) {
    Tensor dx(x_like.c, x_like.h, x_like.w);
    for (int c = 0; c < dx.c; ++c)
        for (int yy = 0; yy < dy.h; ++yy)
            for (int xx = 0; xx < dy.w; ++xx)
                dx.at(c, yy / 2, xx / 2) += dy.at(c, yy, xx);
    return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    Tensor y(a.c + b.c, a.h, a.w);
    std::copy(a.v.begin(), a.v.end(), y.v.begin());
    std::copy(b.v.begin(), b.v.end(), y.v.begin() + ptrdiff_t(a.v.size()));
    return y;
}

void split_channels(const Tensor& d, int c_first, Tensor& da, Tensor& db) {
    da = Tensor(c_first, d.h, d.w);
    db = Tensor(d.c - c_first, d.h, d.w);
    std::copy(d.v.begin(), d.v.begin() + ptrdiff_t(da.v.size()), da.v.begin());
    std::copy(d.v.begin() + ptrdiff_t(da.v.size()), d.v.end(), db.v.begin());
}

Tensor pool_to(const Tensor& x, int res) {
    Tensor y = x;
    while (y.h > res) y = avgpool2(y);
    return y;
}

std::vector<float> sinusoidal_embedding(int t, int dim) {
    std::vector<float> e(size_t(dim), 0.f);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const float freq = std::exp(-std::log(10000.f) * float(i) / float(half));
        e[size_t(i)] = std::sin(float(t) * freq);
        e[size_t(half + i)] = std::cos(float(t) * freq);
    }
    return e;
}

// ---- Adam ---------------------------------------------------------------------

void Adam::step(const ParamRefs& params) {
    ++t;
    const float bc1 = 1.f - std::pow(beta1, float(t));
    const float bc2 = 1.f - std::pow(beta2, float(t));
    for (Param* p : params) {
        for (size_t i = 0; i < p->w.size(); ++i) {
            const float g = p->g[i];
            p->m[i] = beta1 * p->m[i] + (1.f - beta1) * g;
            p->v[i] = beta2 * p->v[i] + (1.f - beta2) * g * g;
            const float mhat = p->m[i] / bc1;
            const float vhat = p->v[i] / bc2;
            p->w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

void zero_grads(const ParamRefs& params) {
    for (Param* p : params) p->zero_grad();
}

}  // namespace synth
