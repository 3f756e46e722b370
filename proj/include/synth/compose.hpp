#pragma once

#include <map>

#include "synth/dataset.hpp"
#include "synth/diffusion.hpp"

namespace synth {

struct OrganProvenance {
    std::string checkpoint_id;
    uint64_t seed = 0;
    int sampler_steps = 0;
    float guidance_scale = 0.f;
};

struct OrganRender {
    int class_id = 0;
    ImageU8 image;
    BinaryMask mask;
    OrganProvenance provenance;
};

enum class BackgroundSource { source_image, background_render };

struct CompositeScene {
    ImageU8 image;
    LabelMap label_map;
    std::vector<std::pair<int, OrganProvenance>> provenance;
    BackgroundSource background_source = BackgroundSource::source_image;
};

// Per-pixel z-order fusion: the highest z_order class whose mask covers a
// pixel supplies both the color and the label; uncovered pixels come from
// the background. Pixels are exact copies, no blending.
CompositeScene compose(const std::vector<OrganRender>& renders, const ImageU8& background,
                       const ClassMap& class_map,
                       BackgroundSource bg_source = BackgroundSource::source_image);

struct SceneMaskReport {
    double coverage_fraction = 0;
    long overlap_pixel_count = 0;
    std::map<int, long> per_class_area;
};

SceneMaskReport validate_scene_masks(const std::vector<BinaryMask>& masks, int h, int w);

}  // namespace synth
