#include "synth/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "synth/checkpoint.hpp"
#include "synth/errors.hpp"

namespace synth {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

static Mat to_eigen(const Features& f) {
    Mat m(f.n, f.d);
    for (int i = 0; i < f.n; ++i)
        for (int j = 0; j < f.d; ++j) m(i, j) = double(f.at(i, j));
    return m;
}

double frechet_distance(const Features& a, const Features& b) {
    if (a.d != b.d) throw ValidationError("frechet_distance: feature dimension mismatch");
    if (a.n < 2 || b.n < 2)
        throw InsufficientSamplesError("frechet_distance needs at least 2 samples per set");

    const Mat ma = to_eigen(a), mb = to_eigen(b);
    const Vec mu_a = ma.colwise().mean(), mu_b = mb.colwise().mean();
    const Mat ca = (ma.rowwise() - mu_a.transpose()).transpose() *
                   (ma.rowwise() - mu_a.transpose()) / double(a.n - 1);
    const Mat cb = (mb.rowwise() - mu_b.transpose()).transpose() *
                   (mb.rowwise() - mu_b.transpose()) / double(b.n - 1);

    // symmetrized root: Tr((Sa Sb)^{1/2}) = sum sqrt(eig(sqrt(Sa) Sb sqrt(Sa)))
    Eigen::SelfAdjointEigenSolver<Mat> es_a(ca);
    Vec ev_a = es_a.eigenvalues();
    for (int i = 0; i < ev_a.size(); ++i) ev_a(i) = std::sqrt(std::max(0.0, ev_a(i)));
    const Mat sqrt_a = es_a.eigenvectors() * ev_a.asDiagonal() * es_a.eigenvectors().transpose();
    const Mat m = sqrt_a * cb * sqrt_a;
    Eigen::SelfAdjointEigenSolver<Mat> es_m((m + m.transpose()) / 2.0);
    double tr_sqrt = 0;
    const double scale = std::max(1.0, std::abs(es_m.eigenvalues().maxCoeff()));
    for (int i = 0; i < es_m.eigenvalues().size(); ++i) {
        double lam = es_m.eigenvalues()(i);
        if (lam < -1e-6 * scale)
            throw ValidationError("frechet_distance: covariance product has a large negative eigenvalue");
        tr_sqrt += std::sqrt(std::max(0.0, lam));
    }
    const double mean_term = (mu_a - mu_b).squaredNorm();
    return mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
}

static double poly3_kernel(const float* x, const float* y, int d) {
    double dot = 0;
    for (int i = 0; i < d; ++i) dot += double(x[i]) * double(y[i]);
    const double v = dot / double(d) + 1.0;
    return v * v * v;
}

// U-statistic estimator over equal-size subsets; exactly zero on identical sets
static double unbiased_mmd2_poly(const Features& x, const std::vector<int>& ix,
                                 const Features& y, const std::vector<int>& iy) {
    const int m = int(ix.size());
    double kxx = 0, kyy = 0, kxy = 0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) {
            if (i == j) continue;
            kxx += poly3_kernel(&x.data[size_t(ix[size_t(i)]) * x.d],
                                &x.data[size_t(ix[size_t(j)]) * x.d], x.d);
            kyy += poly3_kernel(&y.data[size_t(iy[size_t(i)]) * y.d],
                                &y.data[size_t(iy[size_t(j)]) * y.d], y.d);
            kxy += poly3_kernel(&x.data[size_t(ix[size_t(i)]) * x.d],
                                &y.data[size_t(iy[size_t(j)]) * y.d], x.d);
        }
    const double denom = double(m) * double(m - 1);
    return (kxx + kyy - 2.0 * kxy) / denom;
}

static std::vector<int> sample_subset(int n, int k, Rng& rng) {
    std::vector<int> idx(size_t(n), 0);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k; ++i) {
        const int j = i + int(rng.uniform_index(uint64_t(n - i)));
        std::swap(idx[size_t(i)], idx[size_t(j)]);
    }
    idx.resize(size_t(k));
    return idx;
}

KidResult kid(const Features& a, const Features& b, int subset_size, int n_subsets,
              uint64_t seed) {
    if (a.d != b.d) throw ValidationError("kid: feature dimension mismatch");
    if (subset_size < 2) throw ValidationError("kid: subset_size must be >= 2");
    if (a.n < subset_size || b.n < subset_size)
        throw InsufficientSamplesError("kid: sets smaller than subset_size");
    if (n_subsets < 1) throw ValidationError("kid: n_subsets must be >= 1");

    std::vector<double> vals(size_t(n_subsets), 0.0);
    for (int s = 0; s < n_subsets; ++s) {
        // identical per-side index draws, so comparing a set against itself
        // pairs the same rows and the U-statistic collapses to exactly zero
        Rng rng_a(derive_seed(seed, "kid_subset", uint64_t(s)));
        Rng rng_b(derive_seed(seed, "kid_subset", uint64_t(s)));
        const auto ix = sample_subset(a.n, subset_size, rng_a);
        const auto iy = sample_subset(b.n, subset_size, rng_b);
        vals[size_t(s)] = unbiased_mmd2_poly(a, ix, b, iy);
    }
    KidResult r;
    r.subset_size = subset_size;
    r.n_subsets = n_subsets;
    for (double v : vals) r.mean += v;
    r.mean /= double(n_subsets);
    if (n_subsets > 1) {
        double ss = 0;
        for (double v : vals) ss += (v - r.mean) * (v - r.mean);
        r.std = std::sqrt(ss / double(n_subsets - 1));
    }
    return r;
}

static bool features_lex_less(const Features& a, const Features& b) {
    if (a.n != b.n) return a.n < b.n;
    for (size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return a.data[i] < b.data[i];
    return false;
}

double gaussian_mmd(const Features& a, const Features& b, double bandwidth) {
    if (a.d != b.d) throw ValidationError("gaussian_mmd: feature dimension mismatch");
    if (a.n < 1 || b.n < 1) throw InsufficientSamplesError("gaussian_mmd: empty feature set");
    if (bandwidth <= 0) throw ValidationError("gaussian_mmd: bandwidth must be positive");
    const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
    auto kernel_mean = [inv](const Features& u, const Features& v) {
        double acc = 0;
        for (int i = 0; i < u.n; ++i)
            for (int j = 0; j < v.n; ++j) {
                double d2 = 0;
                for (int k = 0; k < u.d; ++k) {
                    const double d = double(u.at(i, k)) - double(v.at(j, k));
                    d2 += d * d;
                }
                acc += std::exp(-d2 * inv);
            }
        return acc / (double(u.n) * double(v.n));
    };
    // canonical argument order keeps the summation order, and therefore the
    // result, identical under argument swap
    const bool a_first = !features_lex_less(b, a);
    const Features& u = a_first ? a : b;
    const Features& v = a_first ? b : a;
    return kernel_mean(u, u) + kernel_mean(v, v) - 2.0 * kernel_mean(u, v);
}

double median_pairwise_distance(const Features& a, const Features& b) {
    std::vector<double> dists;
    auto add_pairs = [&](const Features& u, const Features& v, bool same) {
        for (int i = 0; i < u.n; ++i)
            for (int j = same ? i + 1 : 0; j < v.n; ++j) {
                double d2 = 0;
                for (int k = 0; k < u.d; ++k) {
                    const double d = double(u.at(i, k)) - double(v.at(j, k));
                    d2 += d * d;
                }
                dists.push_back(std::sqrt(d2));
            }
    };
    add_pairs(a, a, true);
    add_pairs(b, b, true);
    add_pairs(a, b, false);
    if (dists.empty()) return 1.0;
    std::sort(dists.begin(), dists.end());
    const double med = dists[dists.size() / 2];
    return med > 0 ? med : 1.0;
}

// ---- segmentation metrics ------------------------------------------------------

std::vector<std::pair<int, int>> boundary_pixels(const LabelMap& map, int class_id) {
    std::vector<std::pair<int, int>> out;
    auto inside = [&](int y, int x) {
        if (y < 0 || y >= map.h || x < 0 || x >= map.w) return false;
        return map.at(y, x) == class_id;
    };
    for (int y = 0; y < map.h; ++y)
        for (int x = 0; x < map.w; ++x) {
            if (!inside(y, x)) continue;
            if (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1))
                out.emplace_back(y, x);
        }
    return out;
}

static double directed_hausdorff(const std::vector<std::pair<int, int>>& from,
                                 const std::vector<std::pair<int, int>>& to) {
    double worst = 0;
    for (const auto& [fy, fx] : from) {
        double best = std::numeric_limits<double>::max();
        for (const auto& [ty, tx] : to) {
            const double dy = fy - ty, dx = fx - tx;
            best = std::min(best, dy * dy + dx * dx);
        }
        worst = std::max(worst, best);
    }
    return std::sqrt(worst);
}

SegMetricReport seg_metrics(const LabelMap& pred, const LabelMap& gt, const ClassMap& class_map) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw ValidationError("seg_metrics: resolution mismatch");
    for (uint8_t v : pred.px)
        if (!class_map.is_valid_label(v))
            throw ValidationError("seg_metrics: invalid label in prediction");
    for (uint8_t v : gt.px)
        if (!class_map.is_valid_label(v))
            throw ValidationError("seg_metrics: invalid label in ground truth");

    SegMetricReport rep;
    double dice_sum = 0, iou_sum = 0, hd_sum = 0;
    int n_scored = 0, n_hd = 0;

    for (const auto& entry : class_map.entries) {
        const int c = entry.class_id;
        long np = 0, ng = 0, ninter = 0;
        for (size_t i = 0; i < pred.px.size(); ++i) {
            const bool p = pred.px[i] == c, g = gt.px[i] == c;
            np += p;
            ng += g;
            ninter += p && g;
        }
        if (np == 0 && ng == 0) {
            rep.excluded.push_back({c, "all", "absent"});
            continue;
        }
        ClassSegScore score;
        score.dice = 2.0 * double(ninter) / double(np + ng);
        const long nunion = np + ng - ninter;
        score.iou = nunion > 0 ? double(ninter) / double(nunion) : 0.0;
        if (np == 0 || ng == 0) {
            rep.excluded.push_back({c, "hausdorff", "one-sided-empty"});
        } else {
            const auto bp = boundary_pixels(pred, c);
            const auto bg = boundary_pixels(gt, c);
            score.hausdorff =
                std::max(directed_hausdorff(bp, bg), directed_hausdorff(bg, bp));
            hd_sum += *score.hausdorff;
            ++n_hd;
        }
        dice_sum += score.dice;
        iou_sum += score.iou;
        ++n_scored;
        rep.per_class[c] = score;
    }
    if (n_scored > 0) {
        rep.macro.dice = dice_sum / n_scored;
        rep.macro.iou = iou_sum / n_scored;
    }
    if (n_hd > 0) rep.macro.hausdorff = hd_sum / n_hd;
    return rep;
}

// ---- toy feature extractor -------------------------------------------------------

void ToyFeatureExtractor::init_net(int image_size, uint64_t seed) {
    image_size_ = image_size;
    seed_ = seed;
    Rng rng(derive_seed(seed, "feat_init"));
    const int q = image_size / 4;
    enc1_.init("enc1", 3, 8, 3, rng);
    enc2_.init("enc2", 8, 16, 3, rng);
    enc_fc_.init("enc_fc", 16 * q * q, kDim, rng);
    dec_fc_.init("dec_fc", kDim, 16 * q * q, rng);
    dec1_.init("dec1", 16, 8, 3, rng);
    dec2_.init("dec2", 8, 3, 3, rng);
    descriptor_ = "toy_conv_ae_d64_s" + std::to_string(image_size);
}

ParamRefs ToyFeatureExtractor::params() {
    ParamRefs out;
    enc1_.collect(out);
    enc2_.collect(out);
    enc_fc_.collect(out);
    dec_fc_.collect(out);
    dec1_.collect(out);
    dec2_.collect(out);
    return out;
}

Tensor ToyFeatureExtractor::encode_mid(const Tensor& x, Tensor* mid1, Tensor* mid2) const {
    const Tensor h1 = silu(enc1_.forward(x));
    if (mid1) *mid1 = h1;
    const Tensor p1 = avgpool2(h1);
    const Tensor h2 = silu(enc2_.forward(p1));
    if (mid2) *mid2 = h2;
    return avgpool2(h2);
}

std::vector<float> ToyFeatureExtractor::encode(const Tensor& x) const {
    const Tensor p2 = encode_mid(x);
    std::vector<float> flat(p2.v.begin(), p2.v.end());
    return enc_fc_.forward(flat);
}

std::vector<float> ToyFeatureExtractor::features(const ImageU8& img) const {
    if (img.h != image_size_ || img.w != image_size_)
        throw ValidationError("feature extractor resolution mismatch");
    return encode(to_model(img));
}

Features ToyFeatureExtractor::features(const std::vector<ImageU8>& imgs) const {
    Features f(int(imgs.size()), kDim);
    for (size_t i = 0; i < imgs.size(); ++i) {
        const auto v = features(imgs[i]);
        std::copy(v.begin(), v.end(), f.data.begin() + ptrdiff_t(i) * kDim);
    }
    return f;
}

double ToyFeatureExtractor::perceptual_distance(const ImageU8& a, const ImageU8& b) const {
    Tensor a1, a2, b1, b2;
    encode_mid(to_model(a), &a1, &a2);
    encode_mid(to_model(b), &b1, &b2);
    auto layer_dist = [](const Tensor& u, const Tensor& v) {
        double nu = 0, nv = 0;
        for (float x : u.v) nu += double(x) * x;
        for (float x : v.v) nv += double(x) * x;
        nu = std::sqrt(nu) + 1e-8;
        nv = std::sqrt(nv) + 1e-8;
        double acc = 0;
        for (size_t i = 0; i < u.v.size(); ++i) {
            const double d = double(u.v[i]) / nu - double(v.v[i]) / nv;
            acc += d * d;
        }
        return acc / double(u.v.size());
    };
    return 0.5 * (layer_dist(a1, b1) + layer_dist(a2, b2));
}

ToyFeatureExtractor ToyFeatureExtractor::train(const std::vector<ImageU8>& images, uint64_t seed,
                                               int steps, float lr, int batch) {
    if (images.size() < 100)
        throw InsufficientSamplesError("toy_feature_extractor needs at least 100 images");
    ToyFeatureExtractor fe;
    fe.init_net(images.front().h, seed);
    const int q = fe.image_size_ / 4;

    std::vector<Tensor> xs;
    xs.reserve(images.size());
    for (const auto& img : images) xs.push_back(to_model(img));

    Adam opt;
    opt.lr = lr;
    ParamRefs ps = fe.params();

    for (int step = 0; step < steps; ++step) {
        zero_grads(ps);
        Rng pick(derive_seed(seed, "feat_batch", uint64_t(step)));
        double loss_acc = 0;
        for (int b = 0; b < batch; ++b) {
            const Tensor& x = xs[pick.uniform_index(xs.size())];
            // forward with caches
            const Tensor c1 = fe.enc1_.forward(x);
            const Tensor s1 = silu(c1);
            const Tensor p1 = avgpool2(s1);
            const Tensor c2 = fe.enc2_.forward(p1);
            const Tensor s2 = silu(c2);
            const Tensor p2 = avgpool2(s2);
            std::vector<float> flat(p2.v.begin(), p2.v.end());
            const std::vector<float> code = fe.enc_fc_.forward(flat);
            std::vector<float> dec_in = fe.dec_fc_.forward(code);
            std::vector<float> dec_in_s = dec_in;
            silu_vec(dec_in_s);
            Tensor d0(16, q, q);
            std::copy(dec_in_s.begin(), dec_in_s.end(), d0.v.begin());
            const Tensor u1 = upsample2(d0);
            const Tensor c3 = fe.dec1_.forward(u1);
            const Tensor s3 = silu(c3);
            const Tensor u2 = upsample2(s3);
            const Tensor recon = fe.dec2_.forward(u2);

            double se = 0;
            Tensor drecon(recon.c, recon.h, recon.w);
            for (size_t i = 0; i < recon.v.size(); ++i) {
                const float d = recon.v[i] - x.v[i];
                se += double(d) * d;
                drecon.v[i] = 2.f * d / (float(recon.v.size()) * float(batch));
            }
            loss_acc += se / double(recon.v.size());

            // backward
            const Tensor du2 = fe.dec2_.backward(u2, drecon);
            const Tensor ds3 = upsample2_backward(s3, du2);
            const Tensor dc3 = silu_backward(c3, ds3);
            const Tensor du1 = fe.dec1_.backward(u1, dc3);
            const Tensor dd0 = upsample2_backward(d0, du1);
            std::vector<float> ddec_in_s(dd0.v.begin(), dd0.v.end());
            const std::vector<float> ddec_in = silu_vec_backward(dec_in, ddec_in_s);
            const std::vector<float> dcode = fe.dec_fc_.backward(code, ddec_in);
            const std::vector<float> dflat = fe.enc_fc_.backward(flat, dcode);
            Tensor dp2(16, q, q);
            std::copy(dflat.begin(), dflat.end(), dp2.v.begin());
            const Tensor ds2 = avgpool2_backward(s2, dp2);
            const Tensor dc2 = silu_backward(c2, ds2);
            const Tensor dp1 = fe.enc2_.backward(p1, dc2);
            const Tensor ds1 = avgpool2_backward(s1, dp1);
            const Tensor dc1 = silu_backward(c1, ds1);
            fe.enc1_.backward(x, dc1);
        }
        opt.step(ps);
        const double loss = loss_acc / double(batch);
        if (step == 0) fe.init_loss_ = loss;
        fe.final_loss_ = loss;
    }
    return fe;
}

void ToyFeatureExtractor::save(const std::filesystem::path& path) {
    CheckpointHeader h;
    h.kind = "feature_extractor";
    h.arch_descriptor = descriptor_;
    h.extra = {{"image_size", image_size_},
               {"seed", seed_},
               {"init_loss", init_loss_},
               {"final_loss", final_loss_}};
    save_checkpoint(path, h, params());
}

ToyFeatureExtractor ToyFeatureExtractor::load(const std::filesystem::path& path) {
    const CheckpointHeader probe = read_checkpoint_header(path);
    if (probe.kind != "feature_extractor")
        throw ValidationError("checkpoint is not a feature extractor: " + path.string());
    ToyFeatureExtractor fe;
    fe.init_net(probe.extra.at("image_size"), probe.extra.value("seed", uint64_t(0)));
    const CheckpointHeader h = load_checkpoint(path, fe.params());
    fe.init_loss_ = h.extra.value("init_loss", 0.0);
    fe.final_loss_ = h.extra.value("final_loss", 0.0);
    return fe;
}

}  // namespace synth
