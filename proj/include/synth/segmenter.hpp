#pragma once

#include "synth/metrics.hpp"
#include "synth/nn.hpp"

namespace synth {

struct SegTrainConfig {
    int steps = 1200;
    float lr = 2e-3f;
    int batch = 8;
    uint64_t seed = 0;
    int width = 16;
    int finetune_steps = 400;  // second phase of syn_pretrain_finetune_real
};

enum class SchemeKind {
    real_noaug,
    real_coloraug,
    real_fullaug,
    syn_only,
    syn_plus_real,
    syn_pretrain_finetune_real
};

std::string scheme_name(SchemeKind k);
SchemeKind parse_scheme(const std::string& s);

struct TrainingScheme {
    SchemeKind kind = SchemeKind::real_noaug;
    SegTrainConfig cfg;
};

// Small encoder-decoder pixel classifier (cross-entropy over class ids).
class SegModel {
public:
    void init(int n_classes_with_bg, int image_size, int width, uint64_t seed);
    Tensor logits(const Tensor& x) const;
    LabelMap predict(const ImageU8& img) const;
    ParamRefs params();
    uint64_t weight_checksum() const;
    int n_classes() const { return n_classes_; }
    int image_size() const { return image_size_; }

    void save(const std::filesystem::path& path);
    static SegModel load(const std::filesystem::path& path);

    // one training step worth of gradient work; used by train_segmenter
    double train_batch(const std::vector<const SampleRecord*>& batch, Adam& opt);

private:
    double train_one(const SampleRecord& rec, size_t batch_size);

public:

private:
    friend SegModel train_segmenter(const TrainingScheme&, const ClassMap&,
                                    const std::vector<SampleRecord>&,
                                    const std::vector<SampleRecord>&);
    int n_classes_ = 0, image_size_ = 0, width_ = 0;
    uint64_t seed_ = 0;
    Conv2d c1_, c2_, c3_, c4_, c5_, c6_, head_;
};

// Trains a pixel classifier under the given scheme. `real` and `syn` are the
// training pools; schemes that do not use a pool ignore it.
SegModel train_segmenter(const TrainingScheme& scheme, const ClassMap& class_map,
                         const std::vector<SampleRecord>& real,
                         const std::vector<SampleRecord>& syn = {});

SegMetricReport evaluate_segmenter(const SegModel& model,
                                   const std::vector<SampleRecord>& test_dataset,
                                   const ClassMap& class_map);

// mean of per-image reports; classes aggregate over images where they scored
SegMetricReport aggregate_reports(const std::vector<SegMetricReport>& reports);

// ---- augmentation -----------------------------------------------------------

struct ColorParams {
    float brightness = 0.f;  // additive, in [0,255] units
    float contrast = 1.f;
    float hue = 0.f;  // radians of hue rotation
    bool identity() const { return brightness == 0.f && contrast == 1.f && hue == 0.f; }
};

enum class SpatialOp { none, flip_h, flip_v, rot90, rot180, rot270, elastic };

struct SpatialParams {
    SpatialOp op = SpatialOp::none;
    uint64_t elastic_seed = 0;
    float elastic_amp = 2.f;
    float elastic_sigma = 4.f;
};

enum class AugmentKind { color, color_spatial };

SampleRecord apply_color(const SampleRecord& sample, const ColorParams& params);
// identical geometry for image and label map (nearest-neighbor labels)
SampleRecord apply_spatial(const SampleRecord& sample, const SpatialParams& params);

SampleRecord augment(const SampleRecord& sample, AugmentKind kind, uint64_t seed);

}  // namespace synth
