#pragma once

#include "synth/checkpoint.hpp"
#include "synth/compose.hpp"

namespace synth {

struct RefineConfig {
    float strength = 0.3f;  // fraction of the schedule to re-noise
    int n_steps = 10;
    uint64_t seed = 0;
    float guidance_scale = 1.f;
    SchedulerKind scheduler_kind = SchedulerKind::ddim;
};

// Starting state of refinement: the input noised to round(strength * T), or
// pure seeded noise at strength 1. Also reports the restricted timesteps.
Tensor refine_start(const Tensor& x0, const RefineConfig& config, const NoiseSchedule& schedule,
                    std::vector<int>* timesteps_out = nullptr);

struct RefineResult {
    ImageU8 image;
    LabelMap label_map;  // byte-identical to the input scene's labels
};

// Partial noising + few-step denoising with the scene-level model; smooths
// composition seams, never relabels.
RefineResult refine(const CompositeScene& scene, const DenoiserModel& scene_model,
                    const RefineConfig& config, const std::string& scene_prompt);

}  // namespace synth
