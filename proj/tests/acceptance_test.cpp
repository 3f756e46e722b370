// Acceptance suite: one test case per criterion, one PASS/FAIL line each.
// Pre-registered thresholds live in the AcceptanceFixture constants below and
// are never loosened after the pilot run that fixed them.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cstdio>

#include "synth/compose.hpp"
#include "synth/control.hpp"
#include "synth/errors.hpp"
#include "synth/inpaint.hpp"
#include "synth/metrics.hpp"
#include "synth/pipeline.hpp"
#include "synth/refine.hpp"
#include "synth/segmenter.hpp"
#include "test_helpers.hpp"

using namespace synth;
using namespace synth::testing;

namespace {

void report(int n, const char* name, bool ok) {
    std::printf("[criterion %2d] %s  %s\n", n, ok ? "PASS" : "FAIL", name);
    std::fflush(stdout);
}

// ---- pre-registered experiment constants (criteria 8 and 10) ---------------
// Fixed after the pilot run; tightening is allowed, loosening is not.
struct Pre {
    // criterion 8
    static constexpr int kSsiSteps = 2000;
    static constexpr int kScenes = 500;
    static constexpr int kSegSteps = 800;
    static constexpr int kSeeds = 3;
    static constexpr double kSynRealSlack = 0.02;  // dice(syn+real) >= dice(real) - slack
    static constexpr double kSynOnlyFactor = 0.6;  // dice(syn) >= factor * dice(real)
    // criterion 10 (protocol settings fixed after the pilot)
    static constexpr int kAdapterSteps = 2000;
    static constexpr int kFreeGens = 50;
    static constexpr float kEdgeSigma = 2.f;
    static constexpr float kEvalScale = 1.f;     // inference conditioning scale
    static constexpr double kIouUplift = 0.15;   // the acceptance threshold
    // floors recorded from the definitive 50-generation protocol run
    // (conditioned 0.261, unconditioned 0.073); they guard degenerate passes
    static constexpr double kCondIouFloor = 0.20;
    static constexpr double kUncIouCeil = 0.15;
};

UNetConfig toy_arch32() {
    UNetConfig a;
    a.image_size = 32;
    a.width0 = 16;
    a.width1 = 32;
    a.width2 = 32;
    a.emb_dim = 64;
    return a;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

TEST_CASE("criterion 1: inpainting preserves out-of-mask pixels bit-exactly") {
    // the preservation contract is mechanical, so an untrained model suffices
    ToyConfig tc;
    tc.n_samples = 100;
    tc.image_size = 32;
    tc.n_classes = 3;
    const ToyDataset ds = generate_toy_dataset(tc, 81);

    DenoiserModel model;
    model.cfg = toy_arch32();
    model.cfg.in_channels = 7;
    model.class_id = 1;
    model.schedule_spec = ScheduleSpec{};
    model.net.init(model.cfg, 4);
    model.register_prompt("an image of abdominal wall in toyset");

    SamplerConfig sc;
    sc.n_steps = 30;

    std::vector<int> bad(100, 0);
#pragma omp parallel for schedule(dynamic) num_threads(2)
    for (int trial = 0; trial < 100; ++trial) {
        const SampleRecord& rec = ds.records[size_t(trial)];
        Rng rng(derive_seed(55, "c1_mask", uint64_t(trial)));
        BinaryMask bm;
        bm.class_id = 1;
        bm.mask = LabelMap(32, 32);
        // random blob plus random scatter, so the mask shape is arbitrary
        const int cy = int(rng.uniform_index(32)), cx = int(rng.uniform_index(32));
        const int rr = 3 + int(rng.uniform_index(9));
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const bool blob = (y - cy) * (y - cy) + (x - cx) * (x - cx) <= rr * rr;
                bm.mask.at(y, x) = blob || rng.uniform() < 0.05 ? 1 : 0;
            }
        const ImageU8 out = sample_inpaint_with_model(model, rec.image, bm, sc,
                                                      derive_seed(55, "c1_seed", uint64_t(trial)));
        int mism = 0;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                if (bm.mask.at(y, x) == 0)
                    for (int c = 0; c < 3; ++c)
                        mism += out.at(y, x, c) != rec.image.at(y, x, c);
        bad[size_t(trial)] = mism;
    }
    long total = 0;
    for (int b : bad) total += b;
    const bool ok = total == 0;
    report(1, "inpainting out-of-mask preservation (tolerance 0)", ok);
    CHECK(ok);
}

TEST_CASE("criterion 2: freshly initialized adapter is transparent end to end") {
    const ToyDataset ds = tiny_toy(24, 16, 2, 91);
    auto model = train_ssi(1, ds.records, ds.class_map, tiny_ssi_config(5, 92));
    const NoiseSchedule schedule = model->schedule_spec.build();
    const ControlAdapter zero_adapter = model->net.make_adapter(0.5f);

    float worst = 0.f;
    for (int seed = 0; seed < 20; ++seed) {
        const SampleRecord& rec = ds.records[size_t(seed % ds.records.size())];
        const BinaryMask bm = class_mask(rec, 1);
        if (bm.area() == 0) continue;
        const Tensor x0 = to_model(rec.image);
        const Tensor m = mask_to_tensor(bm);
        const Tensor extra = make_inpaint_extra_channels(m, x0);
        const EdgeImage edge = extract_soft_edges(bm, 1.f);
        const EdgePyramid pyr = make_edge_pyramid(edge_to_tensor(edge), 16);

        Rng init(derive_seed(uint64_t(seed), "inpaint_init"));
        const Tensor x_T = masked_blend(normal_tensor(3, 16, 16, init), x0, m);
        const StepHook hook = [&](Tensor& state, int t) {
            if (t >= 0) {
                const Tensor zt =
                    normal_like(state, derive_seed(uint64_t(seed), "blend_noise", uint64_t(t)));
                state = masked_blend(state, forward_diffuse(x0, t, zt, schedule), m);
            } else {
                state = masked_blend(state, x0, m);
            }
        };
        SamplerConfig sc;
        sc.n_steps = 30;

        Condition cond_base;
        cond_base.prompt_id = 1;
        cond_base.extra_channels = &extra;
        const Denoiser base = make_inpaint_denoiser(*model, nullptr);
        const Tensor out_base = ddim_sample(base, x_T, cond_base, schedule, sc, hook);

        Condition cond_ctrl = cond_base;
        cond_ctrl.control = &pyr;
        const Denoiser with = make_inpaint_denoiser(*model, &zero_adapter);
        const Tensor out_ctrl = ddim_sample(with, x_T, cond_ctrl, schedule, sc, hook);

        for (size_t i = 0; i < out_base.v.size(); ++i)
            worst = std::max(worst, std::abs(out_base.v[i] - out_ctrl.v[i]));
    }
    const bool ok = worst <= 1e-6f;
    std::printf("    zero-init transparency: max |delta| = %.3g\n", double(worst));
    report(2, "zero-init control transparency (<= 1e-6 pre-quantization)", ok);
    CHECK(ok);
}

TEST_CASE("criterion 3: forward-process Monte Carlo moments") {
    const NoiseSchedule s = build_schedule(ScheduleKind::linear, 1000, 1e-4f, 0.02f);
    Tensor x0(1, 2, 2);
    x0.fill(0.6f);
    bool ok = true;
    Rng rng(331);
    for (int t : {50, 250, 500, 750, 999}) {
        const int n = 10000;
        double sum = 0, sumsq = 0;
        for (int i = 0; i < n; ++i) {
            const Tensor z = normal_tensor(1, 2, 2, rng);
            const Tensor xt = forward_diffuse(x0, t, z, s);
            for (float v : xt.v) {
                sum += v;
                sumsq += double(v) * v;
            }
        }
        const double cnt = 4.0 * n;
        const double mean = sum / cnt, var = sumsq / cnt - mean * mean;
        const double em = std::sqrt(s.alpha_bars[size_t(t)]) * 0.6;
        const double ev = 1.0 - s.alpha_bars[size_t(t)];
        const bool mean_ok = std::abs(mean - em) < 4.0 * std::sqrt(ev / cnt);
        const bool var_ok = std::abs(var - ev) / ev < 0.05;
        std::printf("    t=%3d mean %.4f (expect %.4f) var %.4f (expect %.4f)\n", t, mean, em,
                    var, ev);
        ok = ok && mean_ok && var_ok;
    }
    report(3, "forward-process statistics (4 sigma / 5%)", ok);
    CHECK(ok);
}

TEST_CASE("criterion 4: epsilon/v round trip on 1000 random tensors") {
    const NoiseSchedule s = build_schedule(ScheduleKind::linear, 1000, 1e-4f, 0.02f);
    Rng rng(44);
    float worst = 0.f;
    for (int trial = 0; trial < 1000; ++trial) {
        const int t = int(rng.uniform_index(1000));
        const Tensor x0 = normal_tensor(1, 4, 4, rng);
        const Tensor z = normal_tensor(1, 4, 4, rng);
        const Tensor xt = forward_diffuse(x0, t, z, s);
        const Tensor v = v_from_eps(x0, z, t, s);
        Tensor eps_rec, x0_rec;
        eps_x0_from_v(xt, v, t, s, eps_rec, x0_rec);
        for (size_t i = 0; i < x0.v.size(); ++i) {
            worst = std::max(worst, std::abs(eps_rec.v[i] - z.v[i]));
            worst = std::max(worst, std::abs(x0_rec.v[i] - x0.v[i]));
        }
    }
    const bool ok = worst <= 1e-6f;
    std::printf("    round-trip worst error: %.3g\n", double(worst));
    report(4, "epsilon<->v inversion (<= 1e-6, 1000 tensors)", ok);
    CHECK(ok);
}

TEST_CASE("criterion 5: metric oracle equivalence") {
    bool ok = true;

    // Dice/IoU/Hausdorff against brute force on 200 random 16x16 pairs
    ClassMap cm;
    cm.background_id = 0;
    cm.dataset_name = "t";
    ClassEntry e;
    e.class_id = 1;
    e.name = "c1";
    e.prompt_noun = "c1";
    e.z_order = 1;
    cm.entries.push_back(e);

    Rng rng(51);
    int exact = 0, scored = 0;
    for (int trial = 0; trial < 200; ++trial) {
        LabelMap pred(16, 16), gt(16, 16);
        const double pp = rng.uniform(0.05, 0.5), pg = rng.uniform(0.05, 0.5);
        for (auto& v : pred.px) v = rng.uniform() < pp ? 1 : 0;
        for (auto& v : gt.px) v = rng.uniform() < pg ? 1 : 0;
        const SegMetricReport rep = seg_metrics(pred, gt, cm);
        if (!rep.per_class.count(1)) continue;
        ++scored;

        long np = 0, ng = 0, ni = 0;
        for (size_t i = 0; i < pred.px.size(); ++i) {
            np += pred.px[i] == 1;
            ng += gt.px[i] == 1;
            ni += pred.px[i] == 1 && gt.px[i] == 1;
        }
        const double dice = 2.0 * ni / double(np + ng);
        const double iou = np + ng - ni > 0 ? double(ni) / double(np + ng - ni) : 0.0;
        bool match = rep.per_class.at(1).dice == dice && rep.per_class.at(1).iou == iou;
        if (np > 0 && ng > 0) {
            // O(n^2) brute-force symmetric Hausdorff over boundary pixels
            const auto bp = boundary_pixels(pred, 1), bg = boundary_pixels(gt, 1);
            double worst = 0;
            for (const auto& [ay, ax] : bp) {
                double best = 1e18;
                for (const auto& [by, bx] : bg)
                    best = std::min(best,
                                    double((ay - by) * (ay - by) + (ax - bx) * (ax - bx)));
                worst = std::max(worst, best);
            }
            for (const auto& [ay, ax] : bg) {
                double best = 1e18;
                for (const auto& [by, bx] : bp)
                    best = std::min(best,
                                    double((ay - by) * (ay - by) + (ax - bx) * (ax - bx)));
                worst = std::max(worst, best);
            }
            match = match && rep.per_class.at(1).hausdorff.has_value() &&
                    *rep.per_class.at(1).hausdorff == std::sqrt(worst);
        }
        exact += match;
    }
    std::printf("    seg metrics exact on %d/%d scored pairs\n", exact, scored);
    ok = ok && exact == scored && scored > 150;

    // Frechet analytic case: N(0, I4) vs N((3,0,0,0), I4) -> 9 +/- 0.3
    Features fa(10000, 4), fb(10000, 4);
    Rng grng(52);
    for (int i = 0; i < 10000; ++i)
        for (int j = 0; j < 4; ++j) {
            fa.at(i, j) = grng.normal();
            fb.at(i, j) = grng.normal() + (j == 0 ? 3.f : 0.f);
        }
    const double fd = frechet_distance(fa, fb);
    std::printf("    frechet analytic: %.3f (expect 9.0 +/- 0.3)\n", fd);
    ok = ok && std::abs(fd - 9.0) <= 0.3;

    // KID unbiasedness on same-distribution sets
    Features ka(150, 6), kb(150, 6);
    for (int i = 0; i < 150; ++i)
        for (int j = 0; j < 6; ++j) {
            ka.at(i, j) = grng.normal();
            kb.at(i, j) = grng.normal();
        }
    const KidResult kr = kid(ka, kb, 50, 20, 53);
    std::printf("    kid same-distribution: mean %.4g std %.4g\n", kr.mean, kr.std);
    ok = ok && kr.std > 0 && std::abs(kr.mean) <= 3.0 * kr.std;

    report(5, "metric oracle equivalence (seg exact, frechet 9 +/- 0.3, kid 3 std)", ok);
    CHECK(ok);
}

TEST_CASE("criterion 6: composition matches the z-order oracle bit-exactly") {
    ClassMap cm;
    cm.background_id = 0;
    cm.dataset_name = "t";
    for (int i = 1; i <= 4; ++i) {
        ClassEntry e;
        e.class_id = i;
        e.name = "c" + std::to_string(i);
        e.prompt_noun = e.name;
        e.z_order = 5 - i;  // reversed so id order != z order
        cm.entries.push_back(e);
    }

    Rng rng(61);
    bool ok = true;
    for (int trial = 0; trial < 100 && ok; ++trial) {
        ImageU8 bg(24, 24);
        for (auto& px : bg.px) px = uint8_t(rng.uniform_index(256));
        std::vector<OrganRender> renders;
        for (int cid = 1; cid <= 4; ++cid) {
            if (rng.uniform() < 0.3) continue;
            OrganRender r;
            r.class_id = cid;
            r.image = ImageU8(24, 24);
            for (auto& px : r.image.px) px = uint8_t(rng.uniform_index(256));
            r.mask.class_id = cid;
            r.mask.mask = LabelMap(24, 24);
            for (auto& px : r.mask.mask.px) px = rng.uniform() < 0.35 ? 1 : 0;
            renders.push_back(std::move(r));
        }
        if (renders.empty()) continue;
        const CompositeScene scene = compose(renders, bg, cm);

        for (int y = 0; y < 24 && ok; ++y)
            for (int x = 0; x < 24 && ok; ++x) {
                const OrganRender* winner = nullptr;
                int best_z = -1000;
                for (const auto& r : renders)
                    if (r.mask.mask.at(y, x) && cm.entry(r.class_id).z_order > best_z) {
                        best_z = cm.entry(r.class_id).z_order;
                        winner = &r;
                    }
                const int expect_label = winner ? winner->class_id : 0;
                if (int(scene.label_map.at(y, x)) != expect_label) ok = false;
                for (int c = 0; c < 3; ++c) {
                    const uint8_t expect = winner ? winner->image.at(y, x, c) : bg.at(y, x, c);
                    if (scene.image.at(y, x, c) != expect) ok = false;
                }
            }
    }
    report(6, "composition exactness on 100 random scenes", ok);
    CHECK(ok);
}

TEST_CASE("criterion 7: SDEdit limits and monotone change") {
    // a lightly trained scene model over 32x32 toy data
    ToyConfig tc;
    tc.n_samples = 200;
    tc.image_size = 32;
    tc.n_classes = 3;
    const ToyDataset ds = generate_toy_dataset(tc, 71);

    SsiTrainConfig cfg;
    cfg.steps = 500;
    cfg.lr = 2e-3f;
    cfg.batch = 8;
    cfg.seed = 72;
    cfg.arch = toy_arch32();
    auto scene_model = train_scene_model(ds.records, ds.class_map, cfg);
    const NoiseSchedule schedule = scene_model->schedule_spec.build();
    const std::string prompt = "an image in toyset";

    CompositeScene scene;
    scene.image = ds.records[0].image;
    scene.label_map = ds.records[0].label_map;

    // strength 0: exact identity
    RefineConfig r0;
    r0.strength = 0.f;
    r0.seed = 1;
    const RefineResult id = refine(scene, *scene_model, r0, prompt);
    const bool identity_ok = id.image.px == scene.image.px && id.label_map.px == scene.label_map.px;

    // strength 1: start tensor independent of the input, checked pre-denoising
    RefineConfig r1;
    r1.strength = 1.f;
    r1.seed = 2;
    const Tensor sa = refine_start(to_model(ds.records[0].image), r1, schedule);
    const Tensor sb = refine_start(to_model(ds.records[1].image), r1, schedule);
    const bool noise_ok = sa.v == sb.v;

    // monotone mean absolute difference over the strength grid, 20 seeds
    const float grid[5] = {0.f, 0.25f, 0.5f, 0.75f, 1.f};
    double mad[5] = {};
    for (int gi = 0; gi < 5; ++gi) {
        double acc = 0;
        for (int seed = 0; seed < 20; ++seed) {
            RefineConfig rc;
            rc.strength = grid[gi];
            rc.n_steps = 10;
            rc.seed = uint64_t(1000 + seed);
            const RefineResult res = refine(scene, *scene_model, rc, prompt);
            double s = 0;
            for (size_t i = 0; i < res.image.px.size(); ++i)
                s += std::abs(double(res.image.px[i]) - double(scene.image.px[i]));
            acc += s / double(res.image.px.size());
        }
        mad[gi] = acc / 20.0;
        std::printf("    strength %.2f -> mean abs diff %.3f\n", double(grid[gi]), mad[gi]);
    }
    bool monotone_ok = true;
    for (int gi = 1; gi < 5; ++gi)
        if (mad[gi] + 1e-3 < mad[gi - 1]) monotone_ok = false;  // recorded tolerance 1e-3

    const bool ok = identity_ok && noise_ok && monotone_ok;
    report(7, "SDEdit limits (identity, pure-noise start, monotone MAD)", ok);
    CHECK(identity_ok);
    CHECK(noise_ok);
    CHECK(monotone_ok);
}

TEST_CASE("criterion 8: scaled-down dataset-utility ordering") {
    const auto t0 = std::chrono::steady_clock::now();
    ToyConfig tc;
    tc.n_samples = 710;
    tc.n_train = 500;
    tc.n_test = 200;
    tc.n_val = 10;
    tc.image_size = 32;
    tc.n_classes = 3;
    const ToyDataset ds = generate_toy_dataset(tc, 2024);
    std::vector<SampleRecord> train, test;
    for (const auto& r : ds.records)
        (r.split == Split::train ? train : test).push_back(r);
    test.resize(200);

    ModelRegistry reg;
    for (const auto& e : ds.class_map.entries) {
        SsiTrainConfig cfg;
        cfg.steps = Pre::kSsiSteps;
        cfg.lr = 2e-3f;
        cfg.batch = 8;
        cfg.seed = 77;
        cfg.masked_loss_only = true;  // the objective variant from the design notes
        cfg.arch = toy_arch32();
        reg.register_class_model(train_ssi(e.class_id, train, ds.class_map, cfg));
    }
    std::printf("    stage-1 done at %.0f s\n", elapsed_s(t0));

    std::vector<SampleRecord> syn(size_t(Pre::kScenes));
#pragma omp parallel for schedule(dynamic) num_threads(2)
    for (int i = 0; i < Pre::kScenes; ++i) {
        const SampleRecord& src = train[size_t(i) % train.size()];
        const auto masks = split_label_map(src.label_map, ds.class_map);
        std::vector<OrganRender> renders;
        for (const auto& bm : masks) {
            SamplerConfig sc;
            sc.n_steps = 30;
            sc.guidance_scale = 1.0f;
            OrganRender r;
            r.class_id = bm.class_id;
            r.image = sample_inpaint(reg, bm.class_id, src.image, bm, sc,
                                     derive_seed(9, "gen", uint64_t(i) * 1000 + bm.class_id));
            r.mask = bm;
            renders.push_back(std::move(r));
        }
        const CompositeScene scene = compose(renders, src.image, ds.class_map);
        SampleRecord rec;
        rec.image = scene.image;
        rec.label_map = scene.label_map;
        rec.split = Split::train;
        rec.id = "syn_" + std::to_string(i);
        syn[size_t(i)] = std::move(rec);
    }
    std::printf("    %d syn scenes composed at %.0f s\n", Pre::kScenes, elapsed_s(t0));

    // generated organ colors stay close to the class textures (train_ssi contract)
    {
        long n_px[4] = {};
        double sums[4][3] = {};
        for (const auto& rec : syn)
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    const int c = rec.label_map.at(y, x);
                    for (int ch = 0; ch < 3; ++ch) sums[c][ch] += rec.image.at(y, x, ch);
                    ++n_px[c];
                }
        double err_mean = 0;
        for (int c = 1; c <= 3; ++c) {
            const auto base = toy_class_base_color(c);
            double err = 0;
            for (int ch = 0; ch < 3; ++ch)
                err = std::max(err, std::abs(sums[c][ch] / n_px[c] - double(base[ch])));
            err_mean += err / 3.0;
        }
        std::printf("    generated class mean-color error: %.1f/255 (mean over classes)\n",
                    err_mean);
        CHECK(err_mean <= 10.0);
    }

    double dice_real = 0, dice_syn = 0, dice_both = 0;
    for (int seed = 0; seed < Pre::kSeeds; ++seed) {
        const SchemeKind kinds[3] = {SchemeKind::real_noaug, SchemeKind::syn_only,
                                     SchemeKind::syn_plus_real};
        double* sinks[3] = {&dice_real, &dice_syn, &dice_both};
        for (int k = 0; k < 3; ++k) {
            TrainingScheme scheme;
            scheme.kind = kinds[k];
            scheme.cfg.steps = Pre::kSegSteps;
            scheme.cfg.lr = 2e-3f;
            scheme.cfg.batch = 8;
            scheme.cfg.width = 16;
            scheme.cfg.seed = uint64_t(100 + seed);
            const SegModel m = train_segmenter(scheme, ds.class_map, ds.records, syn);
            const SegMetricReport rep = evaluate_segmenter(m, test, ds.class_map);
            *sinks[k] += rep.macro.dice / Pre::kSeeds;
            std::printf("    seed %d %-13s dice %.3f\n", seed, scheme_name(kinds[k]).c_str(),
                        rep.macro.dice);
        }
    }
    std::printf("    mean dice: real %.3f syn %.3f syn+real %.3f (total %.0f s)\n", dice_real,
                dice_syn, dice_both, elapsed_s(t0));

    const bool combo_ok = dice_both >= dice_real - Pre::kSynRealSlack;
    const bool syn_ok = dice_syn >= Pre::kSynOnlyFactor * dice_real;
    report(8, "dataset-utility ordering (syn+real and syn-only thresholds)", combo_ok && syn_ok);
    CHECK(combo_ok);
    CHECK(syn_ok);
}

TEST_CASE("criterion 9: end-to-end pipeline reproducibility") {
    const auto root = fresh_dir("acceptance_e2e");
    const auto cfg_path = root / "config.json";
    {
        std::ofstream out(cfg_path);
        out << R"({
  "dataset": {"n_samples": 160, "image_size": 32, "n_classes": 3,
               "n_train": 130, "n_test": 20, "n_val": 10, "sim_masks": 6},
  "schedule": {"T": 1000},
  "model": {"width0": 16, "width1": 32, "width2": 32, "emb_dim": 64},
  "ssi": {"steps": 200, "lr": 0.002, "batch": 8, "masked_loss_only": true},
  "scene": {"steps": 150, "lr": 0.002, "batch": 8},
  "adapter": {"steps": 100, "lr": 0.001, "batch": 8},
  "sampler": {"n_steps": 30,
               "guidance_overrides": {"1": 1.0, "2": 1.0, "3": 1.0}},
  "generate": {"n_scenes": 8, "mask_source": "real", "use_control": true},
  "refine": {"enabled": true, "strength": 0.3, "n_steps": 10},
  "seg": {"steps": 150, "lr": 0.002, "batch": 8, "width": 16,
           "schemes": ["real_noaug", "syn_only", "syn_plus_real"], "n_seeds": 1},
  "metrics": {"extractor_steps": 200, "kid_subset": 8, "kid_subsets": 5}
})";
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto run1 = run_all(cfg_path, 4242, "rep_a", root);
    const auto run2 = run_all(cfg_path, 4242, "rep_b", root);
    std::printf("    two full pipeline runs took %.0f s\n", elapsed_s(t0));

    REQUIRE(run1.size() == run2.size());
    size_t compared = 0;
    bool ok = true;
    for (size_t i = 0; i < run1.size(); ++i) {
        REQUIRE(run1[i].outputs.size() == run2[i].outputs.size());
        for (size_t k = 0; k < run1[i].outputs.size(); ++k) {
            if (run1[i].outputs[k].is_volatile) continue;  // timing report
            ok = ok && run1[i].outputs[k].path == run2[i].outputs[k].path &&
                 run1[i].outputs[k].hash == run2[i].outputs[k].hash;
            ++compared;
        }
    }
    std::printf("    %zu artifact hashes compared\n", compared);
    report(9, "end-to-end reproducibility (identical artifact hashes)", ok && compared > 100);
    CHECK(ok);
    CHECK(compared > 100);
}

TEST_CASE("criterion 10: edge conditioning lifts foreground/mask IoU") {
    // Protocol fixed after the pilot runs (see the decisions notes): the
    // adapter attaches to the scene-level model and is conditioned on the
    // union of organ boundaries (sigma 2 soft edges); generation is free
    // (pure-noise start), the inference conditioning scale is 1.0, and the
    // foreground detector assigns each pixel to the nearest toy texture.
    // Protocol run at 50 generations: IoU 0.26 conditioned vs 0.07 unconditioned.
    const auto t0 = std::chrono::steady_clock::now();
    ToyConfig tc;
    tc.n_samples = 300;
    tc.image_size = 32;
    tc.n_classes = 2;
    const ToyDataset ds = generate_toy_dataset(tc, 101);
    std::vector<SampleRecord> train(ds.records.begin(), ds.records.begin() + 250);
    std::vector<SampleRecord> held(ds.records.begin() + 250, ds.records.end());

    const auto union_mask = [](const LabelMap& lm) {
        BinaryMask bm;
        bm.class_id = 0;
        bm.mask = LabelMap(lm.h, lm.w);
        for (size_t i = 0; i < lm.px.size(); ++i) bm.mask.px[i] = lm.px[i] != 0 ? 1 : 0;
        return bm;
    };

    SsiTrainConfig scfg;
    scfg.steps = 2400;
    scfg.lr = 2e-3f;
    scfg.batch = 8;
    scfg.seed = 103;
    scfg.arch = toy_arch32();
    auto base = train_scene_model(train, ds.class_map, scfg);
    std::printf("    scene base trained at %.0f s\n", elapsed_s(t0));

    std::vector<AdapterTrainExample> examples;
    for (const auto& rec : train) {
        AdapterTrainExample ex;
        ex.image = rec.image;
        ex.mask = union_mask(rec.label_map);
        ex.edges = extract_soft_edges(ex.mask, Pre::kEdgeSigma);
        ex.prompt = make_prompt(0, ds.class_map, PromptKind::scene);
        examples.push_back(std::move(ex));
    }
    AdapterTrainConfig acfg;
    acfg.steps = Pre::kAdapterSteps;
    acfg.lr = 2e-3f;
    acfg.batch = 8;
    acfg.seed = 104;
    acfg.conditioning_scale = 0.5f;  // published training default
    ControlHandle handle = train_adapter(*base, examples, acfg, Pre::kEdgeSigma);
    handle.adapter->scale = Pre::kEvalScale;
    std::printf("    adapter trained at %.0f s\n", elapsed_s(t0));

    // foreground detector: pixel closer to any organ texture than background
    const auto bg_base = toy_background_color();
    const auto foreground = [&](const ImageU8& img) {
        LabelMap fg(32, 32);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                double d_bg = 0;
                for (int c = 0; c < 3; ++c)
                    d_bg += (img.at(y, x, c) - bg_base[size_t(c)]) *
                            (img.at(y, x, c) - bg_base[size_t(c)]);
                double best_org = 1e18;
                for (int k = 1; k <= 2; ++k) {
                    const auto ob = toy_class_base_color(k);
                    double d = 0;
                    for (int c = 0; c < 3; ++c)
                        d += (img.at(y, x, c) - ob[size_t(c)]) * (img.at(y, x, c) - ob[size_t(c)]);
                    best_org = std::min(best_org, d);
                }
                fg.at(y, x) = best_org < d_bg ? 1 : 0;
            }
        return fg;
    };
    const auto iou_vs_mask = [](const LabelMap& fg, const BinaryMask& bm) {
        long inter = 0, uni = 0;
        for (size_t i = 0; i < fg.px.size(); ++i) {
            const bool a = fg.px[i] == 1, b = bm.mask.px[i] == 1;
            inter += a && b;
            uni += a || b;
        }
        return uni > 0 ? double(inter) / double(uni) : 0.0;
    };

    std::vector<double> cond_v(size_t(Pre::kFreeGens), -1), unc_v(size_t(Pre::kFreeGens), -1);
#pragma omp parallel for schedule(dynamic) num_threads(2)
    for (int g = 0; g < Pre::kFreeGens; ++g) {
        const SampleRecord& rec = held[size_t(g) % held.size()];
        const BinaryMask um = union_mask(rec.label_map);
        if (um.area() < 32) continue;
        const EdgeImage edges = extract_soft_edges(um, Pre::kEdgeSigma);
        SamplerConfig sc;
        sc.n_steps = 30;
        sc.guidance_scale = 1.0f;
        const ImageU8 with =
            sample_free_generation(*base, sc, derive_seed(105, "free", uint64_t(g)), &handle,
                                   &edges);
        const ImageU8 without =
            sample_free_generation(*base, sc, derive_seed(105, "free", uint64_t(g)));
        cond_v[size_t(g)] = iou_vs_mask(foreground(with), um);
        unc_v[size_t(g)] = iou_vs_mask(foreground(without), um);
    }
    double iou_cond = 0, iou_unc = 0;
    int n_eval = 0;
    for (size_t g = 0; g < cond_v.size(); ++g) {
        if (cond_v[g] < 0) continue;
        iou_cond += cond_v[g];
        iou_unc += unc_v[g];
        ++n_eval;
    }
    iou_cond /= std::max(1, n_eval);
    iou_unc /= std::max(1, n_eval);
    std::printf("    IoU conditioned %.3f vs unconditioned %.3f over %d generations (%.0f s)\n",
                iou_cond, iou_unc, n_eval, elapsed_s(t0));

    const bool ok = n_eval >= 40 && iou_cond - iou_unc >= Pre::kIouUplift &&
                    iou_cond >= Pre::kCondIouFloor && iou_unc <= Pre::kUncIouCeil;
    report(10, "edge-conditioning efficacy (IoU uplift >= 0.15)", ok);
    CHECK(n_eval >= 40);
    CHECK(iou_cond - iou_unc >= Pre::kIouUplift);
    CHECK(iou_cond >= Pre::kCondIouFloor);
    CHECK(iou_unc <= Pre::kUncIouCeil);
}
