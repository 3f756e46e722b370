#include "synth/segmenter.hpp"

#include <cmath>
#include <cstring>
#include <set>

#include "synth/checkpoint.hpp"
#include "synth/errors.hpp"

namespace synth {

std::string scheme_name(SchemeKind k) {
    switch (k) {
        case SchemeKind::real_noaug: return "real_noaug";
        case SchemeKind::real_coloraug: return "real_coloraug";
        case SchemeKind::real_fullaug: return "real_fullaug";
        case SchemeKind::syn_only: return "syn_only";
        case SchemeKind::syn_plus_real: return "syn_plus_real";
        case SchemeKind::syn_pretrain_finetune_real: return "syn_pretrain_finetune_real";
    }
    return "?";
}

SchemeKind parse_scheme(const std::string& s) {
    for (SchemeKind k : {SchemeKind::real_noaug, SchemeKind::real_coloraug,
                         SchemeKind::real_fullaug, SchemeKind::syn_only,
                         SchemeKind::syn_plus_real, SchemeKind::syn_pretrain_finetune_real})
        if (scheme_name(k) == s) return k;
    throw ValidationError("unknown training scheme: " + s);
}

// ---- model -----------------------------------------------------------------

void SegModel::init(int n_classes_with_bg, int image_size, int width, uint64_t seed) {
    n_classes_ = n_classes_with_bg;
    image_size_ = image_size;
    width_ = width;
    seed_ = seed;
    Rng rng(derive_seed(seed, "seg_init"));
    const int w = width, w2 = 2 * width;
    c1_.init("c1", 3, w, 3, rng);
    c2_.init("c2", w, w, 3, rng);
    c3_.init("c3", w, w2, 3, rng);
    c4_.init("c4", w2, w2, 3, rng);
    c5_.init("c5", w2 + w2, w2, 3, rng);
    c6_.init("c6", w2 + w, w, 3, rng);
    head_.init("head", w, n_classes_, 1, rng);
}

ParamRefs SegModel::params() {
    ParamRefs out;
    for (Conv2d* c : {&c1_, &c2_, &c3_, &c4_, &c5_, &c6_, &head_}) c->collect(out);
    return out;
}

uint64_t SegModel::weight_checksum() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const FloatVec& v) {
        for (float f : v) {
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            h ^= bits;
            h *= 0x100000001b3ull;
        }
    };
    for (const Conv2d* c : {&c1_, &c2_, &c3_, &c4_, &c5_, &c6_, &head_}) {
        mix(c->w.w);
        mix(c->b.w);
    }
    return h;
}

Tensor SegModel::logits(const Tensor& x) const {
    const Tensor s1 = silu(c1_.forward(x));
    const Tensor s2 = silu(c2_.forward(s1));
    const Tensor p1 = avgpool2(s2);
    const Tensor s3 = silu(c3_.forward(p1));
    const Tensor p2 = avgpool2(s3);
    const Tensor s4 = silu(c4_.forward(p2));
    const Tensor u1 = upsample2(s4);
    const Tensor s5 = silu(c5_.forward(concat_channels(u1, s3)));
    const Tensor u0 = upsample2(s5);
    const Tensor s6 = silu(c6_.forward(concat_channels(u0, s2)));
    return head_.forward(s6);
}

LabelMap SegModel::predict(const ImageU8& img) const {
    const Tensor lg = logits(to_model(img));
    LabelMap out(lg.h, lg.w);
    for (int y = 0; y < lg.h; ++y)
        for (int x = 0; x < lg.w; ++x) {
            int best = 0;
            float bv = lg.at(0, y, x);
            for (int c = 1; c < lg.c; ++c)
                if (lg.at(c, y, x) > bv) {
                    bv = lg.at(c, y, x);
                    best = c;
                }
            out.at(y, x) = uint8_t(best);
        }
    return out;
}

double SegModel::train_one(const SampleRecord& rec_ref, size_t batch_size) {
    const SampleRecord* rec = &rec_ref;
    {
        const Tensor x = to_model(rec->image);
        // forward with caches
        const Tensor a1 = c1_.forward(x), s1 = silu(a1);
        const Tensor a2 = c2_.forward(s1), s2 = silu(a2);
        const Tensor p1 = avgpool2(s2);
        const Tensor a3 = c3_.forward(p1), s3 = silu(a3);
        const Tensor p2 = avgpool2(s3);
        const Tensor a4 = c4_.forward(p2), s4 = silu(a4);
        const Tensor u1 = upsample2(s4);
        const Tensor cat1 = concat_channels(u1, s3);
        const Tensor a5 = c5_.forward(cat1), s5 = silu(a5);
        const Tensor u0 = upsample2(s5);
        const Tensor cat0 = concat_channels(u0, s2);
        const Tensor a6 = c6_.forward(cat0), s6 = silu(a6);
        const Tensor lg = head_.forward(s6);

        // per-pixel softmax cross-entropy
        const size_t hw = size_t(lg.h) * lg.w;
        Tensor dlg(lg.c, lg.h, lg.w);
        double loss = 0;
        for (size_t i = 0; i < hw; ++i) {
            float mx = lg.v[i];
            for (int c = 1; c < lg.c; ++c) mx = std::max(mx, lg.v[size_t(c) * hw + i]);
            double denom = 0;
            for (int c = 0; c < lg.c; ++c) denom += std::exp(double(lg.v[size_t(c) * hw + i] - mx));
            const int label = rec->label_map.px[i];
            const double logp =
                double(lg.v[size_t(label) * hw + i] - mx) - std::log(denom);
            loss -= logp;
            for (int c = 0; c < lg.c; ++c) {
                const double p = std::exp(double(lg.v[size_t(c) * hw + i] - mx)) / denom;
                dlg.v[size_t(c) * hw + i] =
                    float((p - (c == label ? 1.0 : 0.0)) / (double(hw) * double(batch_size)));
            }
        }
        const double item_loss = loss / double(hw);

        // backward
        const Tensor ds6 = head_.backward(s6, dlg);
        const Tensor da6 = silu_backward(a6, ds6);
        const Tensor dcat0 = c6_.backward(cat0, da6);
        Tensor du0, ds2b;
        split_channels(dcat0, u0.c, du0, ds2b);
        const Tensor ds5 = upsample2_backward(s5, du0);
        const Tensor da5 = silu_backward(a5, ds5);
        const Tensor dcat1 = c5_.backward(cat1, da5);
        Tensor du1, ds3b;
        split_channels(dcat1, u1.c, du1, ds3b);
        const Tensor ds4 = upsample2_backward(s4, du1);
        const Tensor da4 = silu_backward(a4, ds4);
        const Tensor dp2 = c4_.backward(p2, da4);
        Tensor ds3 = avgpool2_backward(s3, dp2);
        ds3 += ds3b;
        const Tensor da3 = silu_backward(a3, ds3);
        const Tensor dp1 = c3_.backward(p1, da3);
        Tensor ds2 = avgpool2_backward(s2, dp1);
        ds2 += ds2b;
        const Tensor da2 = silu_backward(a2, ds2);
        const Tensor ds1 = c2_.backward(s1, da2);
        const Tensor da1 = silu_backward(a1, ds1);
        c1_.backward(x, da1);
        return item_loss;
    }
}

double SegModel::train_batch(const std::vector<const SampleRecord*>& batch, Adam& opt) {
    ParamRefs ps = params();
    zero_grads(ps);

    // fixed two-slice split with a fixed merge order; thread count does not
    // change the arithmetic
    SegModel worker = *this;
    ParamRefs wps = worker.params();
    zero_grads(wps);
    const int n = int(batch.size());
    const int split = n / 2;
    std::vector<double> losses(size_t(n), 0.0);

#pragma omp parallel for schedule(static) num_threads(2)
    for (int w = 0; w < 2; ++w) {
        const int lo = w == 0 ? 0 : split;
        const int hi = w == 0 ? split : n;
        SegModel* m = w == 0 ? &worker : this;
        for (int b = lo; b < hi; ++b)
            losses[size_t(b)] = m->train_one(*batch[size_t(b)], batch.size());
    }
    if (split > 0)
        for (size_t i = 0; i < ps.size(); ++i)
            for (size_t k = 0; k < ps[i]->g.size(); ++k) ps[i]->g[k] += wps[i]->g[k];

    opt.step(ps);
    double loss_acc = 0;
    for (double l : losses) loss_acc += l;
    return loss_acc / double(batch.size());
}

void SegModel::save(const std::filesystem::path& path) {
    CheckpointHeader h;
    h.kind = "segmenter";
    h.arch_descriptor = "segnet_v1";
    h.extra = {{"n_classes", n_classes_},
               {"image_size", image_size_},
               {"width", width_},
               {"seed", seed_}};
    save_checkpoint(path, h, params());
}

SegModel SegModel::load(const std::filesystem::path& path) {
    const CheckpointHeader probe = read_checkpoint_header(path);
    if (probe.kind != "segmenter")
        throw ValidationError("checkpoint is not a segmenter: " + path.string());
    SegModel m;
    m.init(probe.extra.at("n_classes"), probe.extra.at("image_size"), probe.extra.at("width"),
           probe.extra.value("seed", uint64_t(0)));
    load_checkpoint(path, m.params());
    return m;
}

// ---- training --------------------------------------------------------------------

static std::set<int> present_classes(const std::vector<SampleRecord>& data) {
    std::set<int> out;
    for (const auto& rec : data)
        for (uint8_t v : rec.label_map.px)
            if (v != 0) out.insert(v);
    return out;
}

static void validate_labels(const std::vector<SampleRecord>& data, const ClassMap& cm,
                            const char* which) {
    for (const auto& rec : data)
        for (uint8_t v : rec.label_map.px)
            if (!cm.is_valid_label(v))
                throw ValidationError(std::string(which) + " dataset record " + rec.id +
                                      " carries label " + std::to_string(int(v)) +
                                      " outside the class map");
}

SegModel train_segmenter(const TrainingScheme& scheme, const ClassMap& class_map,
                         const std::vector<SampleRecord>& real,
                         const std::vector<SampleRecord>& syn) {
    const SchemeKind k = scheme.kind;
    const bool uses_real = k != SchemeKind::syn_only;
    const bool uses_syn = k == SchemeKind::syn_only || k == SchemeKind::syn_plus_real ||
                          k == SchemeKind::syn_pretrain_finetune_real;

    if (uses_real && real.empty()) throw ValidationError("scheme requires a real dataset");
    if (uses_syn && syn.empty()) throw ValidationError("scheme requires a synthetic dataset");
    if (uses_real) validate_labels(real, class_map, "real");
    if (uses_syn) validate_labels(syn, class_map, "synthetic");
    if (uses_syn && !real.empty()) {
        const auto cr = present_classes(real), cs = present_classes(syn);
        if (cr != cs) {
            std::string msg = "class-set mismatch between real {";
            for (int c : cr) msg += std::to_string(c) + " ";
            msg += "} and synthetic {";
            for (int c : cs) msg += std::to_string(c) + " ";
            msg += "}";
            throw ValidationError(msg);
        }
    }

    int max_id = 0;
    for (const auto& e : class_map.entries) max_id = std::max(max_id, e.class_id);
    const int image_size = uses_real ? real.front().image.h : syn.front().image.h;

    SegModel model;
    model.init(max_id + 1, image_size, scheme.cfg.width, scheme.cfg.seed);
    Adam opt;
    opt.lr = scheme.cfg.lr;

    const AugmentKind aug_kind =
        k == SchemeKind::real_fullaug ? AugmentKind::color_spatial : AugmentKind::color;
    const bool augmented = k == SchemeKind::real_coloraug || k == SchemeKind::real_fullaug;

    auto run_phase = [&](const std::vector<const SampleRecord*>& pool, int steps,
                         const char* tag) {
        if (pool.empty()) throw ValidationError("empty training pool");
        for (int step = 0; step < steps; ++step) {
            Rng pick(derive_seed(scheme.cfg.seed, tag, uint64_t(step)));
            std::vector<SampleRecord> storage;
            std::vector<const SampleRecord*> batch;
            storage.reserve(size_t(scheme.cfg.batch));
            for (int b = 0; b < scheme.cfg.batch; ++b) {
                const SampleRecord* rec = pool[pick.uniform_index(pool.size())];
                if (augmented) {
                    storage.push_back(
                        augment(*rec, aug_kind,
                                derive_seed(scheme.cfg.seed, "aug", uint64_t(step) * 1000 + b)));
                    batch.push_back(&storage.back());
                } else {
                    batch.push_back(rec);
                }
            }
            model.train_batch(batch, opt);
        }
    };

    std::vector<const SampleRecord*> real_train, syn_train, combined;
    for (const auto& r : real)
        if (r.split == Split::train) real_train.push_back(&r);
    if (uses_real && real_train.empty())
        for (const auto& r : real) real_train.push_back(&r);  // pool given pre-filtered
    for (const auto& r : syn) syn_train.push_back(&r);

    switch (k) {
        case SchemeKind::real_noaug:
        case SchemeKind::real_coloraug:
        case SchemeKind::real_fullaug:
            run_phase(real_train, scheme.cfg.steps, "seg_step");
            break;
        case SchemeKind::syn_only:
            run_phase(syn_train, scheme.cfg.steps, "seg_step");
            break;
        case SchemeKind::syn_plus_real:
            combined = real_train;
            combined.insert(combined.end(), syn_train.begin(), syn_train.end());
            run_phase(combined, scheme.cfg.steps, "seg_step");
            break;
        case SchemeKind::syn_pretrain_finetune_real:
            run_phase(syn_train, scheme.cfg.steps, "seg_pretrain");
            run_phase(real_train, scheme.cfg.finetune_steps, "seg_finetune");
            break;
    }
    return model;
}

SegMetricReport evaluate_segmenter(const SegModel& model,
                                   const std::vector<SampleRecord>& test_dataset,
                                   const ClassMap& class_map) {
    std::vector<SegMetricReport> reports;
    for (const auto& rec : test_dataset)
        reports.push_back(seg_metrics(model.predict(rec.image), rec.label_map, class_map));
    return aggregate_reports(reports);
}

SegMetricReport aggregate_reports(const std::vector<SegMetricReport>& reports) {
    SegMetricReport agg;
    std::map<int, std::pair<ClassSegScore, std::pair<int, int>>> acc;  // sums, (n_score, n_hd)
    for (const auto& rep : reports)
        for (const auto& [cid, score] : rep.per_class) {
            auto& slot = acc[cid];
            slot.first.dice += score.dice;
            slot.first.iou += score.iou;
            slot.second.first += 1;
            if (score.hausdorff) {
                slot.first.hausdorff = slot.first.hausdorff.value_or(0.0) + *score.hausdorff;
                slot.second.second += 1;
            }
        }
    double dsum = 0, isum = 0, hsum = 0;
    int n = 0, nh = 0;
    for (auto& [cid, slot] : acc) {
        ClassSegScore s;
        s.dice = slot.first.dice / slot.second.first;
        s.iou = slot.first.iou / slot.second.first;
        if (slot.second.second > 0) s.hausdorff = *slot.first.hausdorff / slot.second.second;
        agg.per_class[cid] = s;
        dsum += s.dice;
        isum += s.iou;
        ++n;
        if (s.hausdorff) {
            hsum += *s.hausdorff;
            ++nh;
        }
    }
    if (n > 0) {
        agg.macro.dice = dsum / n;
        agg.macro.iou = isum / n;
    }
    if (nh > 0) agg.macro.hausdorff = hsum / nh;
    return agg;
}

// ---- augmentation -------------------------------------------------------------------

SampleRecord apply_color(const SampleRecord& sample, const ColorParams& params) {
    SampleRecord out = sample;
    if (params.identity()) return out;
    const float c = std::cos(params.hue), s = std::sin(params.hue);
    // YIQ hue rotation; reduces to the identity matrix at hue = 0
    const float m[3][3] = {
        {0.299f + 0.701f * c + 0.168f * s, 0.587f - 0.587f * c + 0.330f * s,
         0.114f - 0.114f * c - 0.497f * s},
        {0.299f - 0.299f * c - 0.328f * s, 0.587f + 0.413f * c + 0.035f * s,
         0.114f - 0.114f * c + 0.292f * s},
        {0.299f - 0.300f * c + 1.25f * s, 0.587f - 0.588f * c - 1.05f * s,
         0.114f + 0.886f * c - 0.203f * s}};
    for (int y = 0; y < sample.image.h; ++y)
        for (int x = 0; x < sample.image.w; ++x) {
            float rgb[3];
            for (int ch = 0; ch < 3; ++ch)
                rgb[ch] = (float(sample.image.at(y, x, ch)) - 128.f) * params.contrast + 128.f +
                          params.brightness;
            for (int ch = 0; ch < 3; ++ch) {
                const float v = m[ch][0] * rgb[0] + m[ch][1] * rgb[1] + m[ch][2] * rgb[2];
                out.image.at(y, x, ch) = uint8_t(std::min(255.f, std::max(0.f, std::round(v))));
            }
        }
    return out;
}

namespace {

std::pair<int, int> map_coord(SpatialOp op, int y, int x, int h, int w) {
    switch (op) {
        case SpatialOp::flip_h: return {y, w - 1 - x};
        case SpatialOp::flip_v: return {h - 1 - y, x};
        case SpatialOp::rot90: return {w - 1 - x, y};       // source coord for output (y,x)
        case SpatialOp::rot180: return {h - 1 - y, w - 1 - x};
        case SpatialOp::rot270: return {x, h - 1 - y};
        default: return {y, x};
    }
}

}  // namespace

SampleRecord apply_spatial(const SampleRecord& sample, const SpatialParams& params) {
    SampleRecord out = sample;
    const int h = sample.image.h, w = sample.image.w;
    if (params.op == SpatialOp::none) return out;

    if (params.op != SpatialOp::elastic) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const auto [sy, sx] = map_coord(params.op, y, x, h, w);
                for (int ch = 0; ch < 3; ++ch)
                    out.image.at(y, x, ch) = sample.image.at(sy, sx, ch);
                out.label_map.at(y, x) = sample.label_map.at(sy, sx);
            }
        return out;
    }

    // elastic: shared smoothed displacement field, bilinear image / NN labels
    Rng rng(params.elastic_seed);
    std::vector<float> dx(size_t(h) * w), dy(size_t(h) * w);
    for (auto& v : dx) v = rng.normal();
    for (auto& v : dy) v = rng.normal();
    const int r = std::max(1, int(params.elastic_sigma * 2));
    std::vector<float> kern(size_t(r) * 2 + 1);
    for (int i = -r; i <= r; ++i)
        kern[size_t(i + r)] =
            std::exp(-0.5f * float(i) * float(i) / (params.elastic_sigma * params.elastic_sigma));
    auto smooth = [&](std::vector<float>& f) {
        std::vector<float> tmp(f.size(), 0.f);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float acc = 0, wsum = 0;
                for (int i = -r; i <= r; ++i) {
                    const int xx = x + i;
                    if (xx < 0 || xx >= w) continue;
                    acc += kern[size_t(i + r)] * f[size_t(y) * w + xx];
                    wsum += kern[size_t(i + r)];
                }
                tmp[size_t(y) * w + x] = acc / wsum;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                float acc = 0, wsum = 0;
                for (int i = -r; i <= r; ++i) {
                    const int yy = y + i;
                    if (yy < 0 || yy >= h) continue;
                    acc += kern[size_t(i + r)] * tmp[size_t(yy) * w + x];
                    wsum += kern[size_t(i + r)];
                }
                f[size_t(y) * w + x] = acc / wsum;
            }
    };
    smooth(dx);
    smooth(dy);
    float mx = 1e-6f;
    for (size_t i = 0; i < dx.size(); ++i)
        mx = std::max({mx, std::abs(dx[i]), std::abs(dy[i])});
    const float scale = params.elastic_amp / mx;

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float sy = std::min(float(h - 1),
                                      std::max(0.f, float(y) + dy[size_t(y) * w + x] * scale));
            const float sx = std::min(float(w - 1),
                                      std::max(0.f, float(x) + dx[size_t(y) * w + x] * scale));
            const int y0 = int(sy), x0 = int(sx);
            const int y1 = std::min(h - 1, y0 + 1), x1 = std::min(w - 1, x0 + 1);
            const float fy = sy - float(y0), fx = sx - float(x0);
            for (int ch = 0; ch < 3; ++ch) {
                const float v = (1 - fy) * ((1 - fx) * sample.image.at(y0, x0, ch) +
                                            fx * sample.image.at(y0, x1, ch)) +
                                fy * ((1 - fx) * sample.image.at(y1, x0, ch) +
                                      fx * sample.image.at(y1, x1, ch));
                out.image.at(y, x, ch) = uint8_t(std::min(255.f, std::max(0.f, std::round(v))));
            }
            out.label_map.at(y, x) =
                sample.label_map.at(int(std::lround(sy)), int(std::lround(sx)));
        }
    return out;
}

SampleRecord augment(const SampleRecord& sample, AugmentKind kind, uint64_t seed) {
    Rng rng(derive_seed(seed, "augment"));
    ColorParams cp;
    cp.brightness = float(rng.uniform(-25.0, 25.0));
    cp.contrast = float(rng.uniform(0.8, 1.2));
    cp.hue = float(rng.uniform(-0.25, 0.25));
    SampleRecord out = apply_color(sample, cp);
    if (kind == AugmentKind::color_spatial) {
        SpatialParams sp;
        const SpatialOp ops[6] = {SpatialOp::flip_h, SpatialOp::flip_v, SpatialOp::rot90,
                                  SpatialOp::rot180, SpatialOp::rot270, SpatialOp::elastic};
        sp.op = ops[rng.uniform_index(6)];
        sp.elastic_seed = derive_seed(seed, "elastic");
        out = apply_spatial(out, sp);
    }
    return out;
}

}  // namespace synth
