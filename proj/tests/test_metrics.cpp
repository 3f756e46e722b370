#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>

#include <cmath>

#include "synth/errors.hpp"
#include "synth/metrics.hpp"
#include "test_helpers.hpp"

using namespace synth;
using namespace synth::testing;

namespace {

Features gaussian_features(int n, int d, const std::vector<double>& mean, uint64_t seed) {
    Features f(n, d);
    Rng rng(seed);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            f.at(i, j) = rng.normal() + float(j < int(mean.size()) ? mean[size_t(j)] : 0.0);
    return f;
}

double poly3(const std::vector<float>& x, const std::vector<float>& y) {
    double dot = 0;
    for (size_t i = 0; i < x.size(); ++i) dot += double(x[i]) * y[i];
    const double v = dot / double(x.size()) + 1.0;
    return v * v * v;
}

// brute-force oracles for the segmentation metrics
struct BruteScores {
    double dice, iou;
    double hausdorff = -1;  // -1 when not defined
};

BruteScores brute_force_scores(const LabelMap& pred, const LabelMap& gt, int cid) {
    long np = 0, ng = 0, ni = 0;
    for (size_t i = 0; i < pred.px.size(); ++i) {
        const bool p = pred.px[i] == cid, g = gt.px[i] == cid;
        np += p;
        ng += g;
        ni += p && g;
    }
    BruteScores s{};
    s.dice = np + ng > 0 ? 2.0 * double(ni) / double(np + ng) : 0.0;
    const long nu = np + ng - ni;
    s.iou = nu > 0 ? double(ni) / double(nu) : 0.0;
    if (np > 0 && ng > 0) {
        auto boundary = [cid](const LabelMap& m) {
            std::vector<std::pair<int, int>> out;
            for (int y = 0; y < m.h; ++y)
                for (int x = 0; x < m.w; ++x) {
                    if (m.at(y, x) != cid) continue;
                    bool edge = y == 0 || y == m.h - 1 || x == 0 || x == m.w - 1;
                    if (!edge)
                        edge = m.at(y - 1, x) != cid || m.at(y + 1, x) != cid ||
                               m.at(y, x - 1) != cid || m.at(y, x + 1) != cid;
                    if (edge) out.emplace_back(y, x);
                }
            return out;
        };
        const auto bp = boundary(pred), bg = boundary(gt);
        double worst = 0;
        for (const auto& [ay, ax] : bp) {
            double best = 1e18;
            for (const auto& [by, bx] : bg)
                best = std::min(best, double((ay - by) * (ay - by) + (ax - bx) * (ax - bx)));
            worst = std::max(worst, best);
        }
        for (const auto& [ay, ax] : bg) {
            double best = 1e18;
            for (const auto& [by, bx] : bp)
                best = std::min(best, double((ay - by) * (ay - by) + (ax - bx) * (ax - bx)));
            worst = std::max(worst, best);
        }
        s.hausdorff = std::sqrt(worst);
    }
    return s;
}

ClassMap map_for(int n) {
    ClassMap cm;
    cm.background_id = 0;
    cm.dataset_name = "t";
    for (int i = 1; i <= n; ++i) {
        ClassEntry e;
        e.class_id = i;
        e.name = "c" + std::to_string(i);
        e.prompt_noun = e.name;
        e.z_order = i;
        cm.entries.push_back(e);
    }
    return cm;
}

}  // namespace

TEST_CASE("frechet_distance: self-distance, symmetry, analytic value") {
    const Features a = gaussian_features(500, 4, {}, 1);
    CHECK(frechet_distance(a, a) == doctest::Approx(0.0).epsilon(1e-6));

    const Features b = gaussian_features(400, 4, {1.0}, 2);
    const double ab = frechet_distance(a, b);
    const double ba = frechet_distance(b, a);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-9));
    CHECK(ab > 0);

    SUBCASE("N(0,I4) vs N((3,0,0,0),I4) at 1e4 samples gives 9 within 0.3") {
        const Features x = gaussian_features(10000, 4, {}, 3);
        const Features y = gaussian_features(10000, 4, {3.0}, 4);
        CHECK(frechet_distance(x, y) == doctest::Approx(9.0).epsilon(0.3 / 9.0));
    }

    SUBCASE("insufficient samples rejected") {
        const Features one = gaussian_features(1, 4, {}, 5);
        CHECK_THROWS_AS(frechet_distance(one, a), InsufficientSamplesError);
        CHECK_THROWS_AS(frechet_distance(a, one), InsufficientSamplesError);
    }

    SUBCASE("dimension mismatch rejected") {
        const Features d3 = gaussian_features(10, 3, {}, 6);
        CHECK_THROWS_AS(frechet_distance(a, d3), ValidationError);
    }
}

TEST_CASE("kid: identical sets, unbiasedness, hand expansion") {
    const Features a = gaussian_features(120, 6, {}, 7);

    SUBCASE("a vs a is zero within 1e-6") {
        const KidResult r = kid(a, a, 50, 5, 1);
        CHECK(std::abs(r.mean) < 1e-6);
    }

    SUBCASE("same-distribution mean within 3 std of zero") {
        const Features b = gaussian_features(120, 6, {}, 8);
        const KidResult r = kid(a, b, 40, 20, 2);
        REQUIRE(r.std > 0);
        CHECK(std::abs(r.mean) <= 3.0 * r.std);
    }

    SUBCASE("two-sample closed form matches within 1e-9") {
        Features x(2, 3), y(2, 3);
        const std::vector<std::vector<float>> xs = {{1, 0, 2}, {0, 1, -1}};
        const std::vector<std::vector<float>> ys = {{2, 2, 0}, {-1, 0, 1}};
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 3; ++j) {
                x.at(i, j) = xs[size_t(i)][size_t(j)];
                y.at(i, j) = ys[size_t(i)][size_t(j)];
            }
        // MMD^2_u = k(x1,x2) + k(y1,y2) - k(x1,y2) - k(x2,y1)
        const double expect = poly3(xs[0], xs[1]) + poly3(ys[0], ys[1]) -
                              poly3(xs[0], ys[1]) - poly3(xs[1], ys[0]);
        const KidResult r = kid(x, y, 2, 1, 3);
        CHECK(r.mean == doctest::Approx(expect).epsilon(1e-9));
    }

    SUBCASE("insufficient samples rejected") {
        const Features tiny = gaussian_features(5, 6, {}, 9);
        CHECK_THROWS_AS(kid(tiny, a, 10, 3, 1), InsufficientSamplesError);
        CHECK_THROWS_AS(kid(a, a, 1, 3, 1), ValidationError);
    }
}

TEST_CASE("gaussian_mmd: self, closed form, symmetry, validation") {
    const Features a = gaussian_features(60, 5, {}, 10);
    CHECK(std::abs(gaussian_mmd(a, a, 1.5)) < 1e-9);

    SUBCASE("two point masses at distance r") {
        Features x(1, 2), y(1, 2);
        x.at(0, 0) = 0.f;
        x.at(0, 1) = 0.f;
        y.at(0, 0) = 3.f;
        y.at(0, 1) = 4.f;  // r = 5
        const double sigma = 2.0;
        const double expect = 2.0 - 2.0 * std::exp(-25.0 / (2.0 * sigma * sigma));
        CHECK(gaussian_mmd(x, y, sigma) == doctest::Approx(expect).epsilon(1e-9));
    }

    SUBCASE("symmetry is exact") {
        const Features b = gaussian_features(40, 5, {0.7}, 11);
        CHECK(gaussian_mmd(a, b, 2.0) == gaussian_mmd(b, a, 2.0));
    }

    SUBCASE("bandwidth must be positive") {
        CHECK_THROWS_AS(gaussian_mmd(a, a, 0.0), ValidationError);
        CHECK_THROWS_AS(gaussian_mmd(a, a, -1.0), ValidationError);
    }

    SUBCASE("median bandwidth heuristic is positive and finite") {
        const Features b = gaussian_features(40, 5, {0.7}, 12);
        const double bw = median_pairwise_distance(a, b);
        CHECK(bw > 0);
        CHECK(std::isfinite(bw));
    }
}

TEST_CASE("seg_metrics: identity, disjoint, hand-computed case") {
    const ClassMap cm = map_for(2);
    LabelMap gt(8, 8);
    for (int y = 2; y < 6; ++y)
        for (int x = 2; x < 6; ++x) gt.at(y, x) = 1;

    SUBCASE("pred == gt") {
        const SegMetricReport rep = seg_metrics(gt, gt, cm);
        CHECK(rep.per_class.at(1).dice == doctest::Approx(1.0));
        CHECK(rep.per_class.at(1).iou == doctest::Approx(1.0));
        REQUIRE(rep.per_class.at(1).hausdorff.has_value());
        CHECK(*rep.per_class.at(1).hausdorff == doctest::Approx(0.0));
        // class 2 absent in both: excluded with reason
        CHECK(rep.per_class.count(2) == 0);
        REQUIRE(rep.excluded.size() == 1);
        CHECK(rep.excluded[0].class_id == 2);
        CHECK(rep.excluded[0].reason == "absent");
    }

    SUBCASE("disjoint pred and gt") {
        LabelMap pred(8, 8);
        pred.at(0, 0) = 1;
        const SegMetricReport rep = seg_metrics(pred, gt, cm);
        CHECK(rep.per_class.at(1).dice == doctest::Approx(0.0));
        CHECK(rep.per_class.at(1).iou == doctest::Approx(0.0));
        CHECK(rep.per_class.at(1).hausdorff.has_value());  // both nonempty
    }

    SUBCASE("|P|=|G|=4 with |P inter G|=2") {
        LabelMap pred(8, 8), g(8, 8);
        // G: (2,2),(2,3),(3,2),(3,3)  P: (3,2),(3,3),(4,2),(4,3)
        g.at(2, 2) = g.at(2, 3) = g.at(3, 2) = g.at(3, 3) = 1;
        pred.at(3, 2) = pred.at(3, 3) = pred.at(4, 2) = pred.at(4, 3) = 1;
        const SegMetricReport rep = seg_metrics(pred, g, cm);
        CHECK(rep.per_class.at(1).dice == doctest::Approx(0.5));
        CHECK(rep.per_class.at(1).iou == doctest::Approx(1.0 / 3.0));
        const BruteScores oracle = brute_force_scores(pred, g, 1);
        REQUIRE(rep.per_class.at(1).hausdorff.has_value());
        CHECK(*rep.per_class.at(1).hausdorff == doctest::Approx(oracle.hausdorff));
    }

    SUBCASE("one-sided empty excludes hausdorff with a reason") {
        LabelMap pred(8, 8);  // class 1 absent in pred
        const SegMetricReport rep = seg_metrics(pred, gt, cm);
        CHECK(rep.per_class.at(1).dice == doctest::Approx(0.0));
        CHECK(!rep.per_class.at(1).hausdorff.has_value());
        bool found = false;
        for (const auto& e : rep.excluded)
            found |= e.class_id == 1 && e.metric == "hausdorff" && e.reason == "one-sided-empty";
        CHECK(found);
    }

    SUBCASE("resolution mismatch rejected") {
        CHECK_THROWS_AS(seg_metrics(LabelMap(4, 4), gt, cm), ValidationError);
    }
}

TEST_CASE("seg_metrics: 200 random mask pairs match brute-force oracles exactly") {
    const ClassMap cm = map_for(2);
    Rng rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        LabelMap pred(16, 16), gt(16, 16);
        const double pp = rng.uniform(0.05, 0.5), pg = rng.uniform(0.05, 0.5);
        for (auto& v : pred.px) v = rng.uniform() < pp ? 1 : 0;
        for (auto& v : gt.px) v = rng.uniform() < pg ? 1 : 0;
        const SegMetricReport rep = seg_metrics(pred, gt, cm);
        const BruteScores oracle = brute_force_scores(pred, gt, 1);
        if (rep.per_class.count(1) == 0) {
            long n = 0;
            for (auto v : pred.px) n += v == 1;
            for (auto v : gt.px) n += v == 1;
            CHECK(n == 0);
            continue;
        }
        const auto& got = rep.per_class.at(1);
        CHECK(got.dice == doctest::Approx(oracle.dice).epsilon(1e-12));
        CHECK(got.iou == doctest::Approx(oracle.iou).epsilon(1e-12));
        // algebraic identity between the two overlap scores
        CHECK(got.dice == doctest::Approx(2 * got.iou / (1 + got.iou)).epsilon(1e-9));
        if (oracle.hausdorff >= 0) {
            REQUIRE(got.hausdorff.has_value());
            CHECK(*got.hausdorff == doctest::Approx(oracle.hausdorff).epsilon(1e-12));
        } else {
            CHECK(!got.hausdorff.has_value());
        }
    }
}

TEST_CASE("toy_feature_extractor: determinism, learning, linear separability") {
    ToyConfig tc;
    tc.n_samples = 220;
    tc.image_size = 32;
    tc.n_classes = 2;
    const ToyDataset ds = generate_toy_dataset(tc, 19);
    std::vector<ImageU8> images;
    for (const auto& r : ds.records) images.push_back(r.image);

    const ToyFeatureExtractor fe = ToyFeatureExtractor::train(images, 5, 400, 2e-3f, 8);
    CHECK(fe.final_loss() < fe.init_loss());

    SUBCASE("deterministic in seed") {
        const ToyFeatureExtractor fe2 = ToyFeatureExtractor::train(images, 5, 400, 2e-3f, 8);
        CHECK(fe.features(images[0]) == fe2.features(images[0]));
        const ToyFeatureExtractor fe3 = ToyFeatureExtractor::train(images, 6, 400, 2e-3f, 8);
        CHECK(fe.features(images[0]) != fe3.features(images[0]));
    }

    SUBCASE("checkpoint round trip") {
        const auto dir = fresh_dir("feat");
        ToyFeatureExtractor fe_copy = fe;
        fe_copy.save(dir / "fe.ckpt");
        const ToyFeatureExtractor loaded = ToyFeatureExtractor::load(dir / "fe.ckpt");
        CHECK(loaded.features(images[1]) == fe.features(images[1]));
        CHECK(loaded.descriptor() == fe.descriptor());
    }

    SUBCASE("too few images rejected") {
        std::vector<ImageU8> few(images.begin(), images.begin() + 50);
        CHECK_THROWS_AS(ToyFeatureExtractor::train(few, 1, 10, 1e-3f, 4),
                        InsufficientSamplesError);
    }

    SUBCASE("class-dominant images are linearly separable in feature space") {
        // dominant class = clearly larger blob area; least-squares probe on
        // half the data, evaluated on the held-out half
        ToyConfig probe_cfg = tc;
        probe_cfg.n_samples = 500;
        const ToyDataset probe_ds = generate_toy_dataset(probe_cfg, 20);
        std::vector<std::pair<std::vector<float>, int>> data;
        for (const auto& r : probe_ds.records) {
            long a1 = 0, a2 = 0;
            for (auto v : r.label_map.px) {
                a1 += v == 1;
                a2 += v == 2;
            }
            if (2 * a1 < 3 * a2 && 2 * a2 < 3 * a1) continue;
            data.push_back({fe.features(r.image), a1 >= a2 ? 1 : -1});
        }
        REQUIRE(data.size() > 150);
        const size_t half = data.size() / 2;
        const int d = fe.dim();
        Eigen::MatrixXd X(half, d + 1);
        Eigen::VectorXd y(half);
        for (size_t i = 0; i < half; ++i) {
            for (int j = 0; j < d; ++j) X(Eigen::Index(i), j) = data[i].first[size_t(j)];
            X(Eigen::Index(i), d) = 1.0;
            y(Eigen::Index(i)) = data[i].second;
        }
        const Eigen::VectorXd w =
            (X.transpose() * X + 1e-1 * Eigen::MatrixXd::Identity(d + 1, d + 1))
                .ldlt()
                .solve(X.transpose() * y);
        int correct = 0, total = 0;
        for (size_t i = half; i < data.size(); ++i) {
            double score = w(d);
            for (int j = 0; j < d; ++j) score += w(j) * data[i].first[size_t(j)];
            correct += (score >= 0 ? 1 : -1) == data[i].second;
            ++total;
        }
        CHECK(double(correct) / total >= 0.8);
    }
}

TEST_CASE("perceptual distance slot behaves like a distance") {
    ToyConfig tc;
    tc.n_samples = 110;
    tc.image_size = 32;
    tc.n_classes = 2;
    const ToyDataset ds = generate_toy_dataset(tc, 23);
    std::vector<ImageU8> images;
    for (const auto& r : ds.records) images.push_back(r.image);
    const ToyFeatureExtractor fe = ToyFeatureExtractor::train(images, 2, 60, 2e-3f, 8);

    CHECK(fe.perceptual_distance(images[0], images[0]) == doctest::Approx(0.0));
    CHECK(fe.perceptual_distance(images[0], images[1]) > 0.0);
    CHECK(fe.perceptual_distance(images[0], images[1]) ==
          doctest::Approx(fe.perceptual_distance(images[1], images[0])));
}
