#include "synth/refine.hpp"

#include <cmath>

#include "synth/errors.hpp"

namespace synth {

Tensor refine_start(const Tensor& x0, const RefineConfig& config, const NoiseSchedule& schedule,
                    std::vector<int>* timesteps_out) {
    if (config.strength < 0.f || config.strength > 1.f)
        throw ValidationError("refine strength must be in [0, 1]");
    const int t_start = int(std::lround(double(config.strength) * schedule.T));
    std::vector<int> ts = strided_timesteps(t_start, config.n_steps);
    if (timesteps_out) *timesteps_out = ts;
    if (ts.empty()) return x0;

    Rng rng(derive_seed(config.seed, "refine_noise"));
    const Tensor z = normal_tensor(x0.c, x0.h, x0.w, rng);
    if (t_start >= schedule.T) return z;  // full strength: pure noise, input-independent
    return forward_diffuse(x0, ts.front(), z, schedule);
}

RefineResult refine(const CompositeScene& scene, const DenoiserModel& scene_model,
                    const RefineConfig& config, const std::string& scene_prompt) {
    if (scene_model.class_id != -1)
        throw ValidationError("refine requires the scene-level model");
    if (scene.image.h != scene_model.cfg.image_size || scene.image.w != scene_model.cfg.image_size)
        throw ValidationError("scene resolution does not match the scene model");

    RefineResult result;
    result.label_map = scene.label_map;

    const NoiseSchedule schedule = scene_model.schedule_spec.build();
    const Tensor x0 = to_model(scene.image);
    std::vector<int> ts;
    const Tensor start = refine_start(x0, config, schedule, &ts);
    if (ts.empty()) {
        result.image = scene.image;  // strength 0: identity
        return result;
    }

    const Denoiser denoiser = make_plain_denoiser(scene_model);
    Condition cond;
    cond.prompt_id = scene_model.prompt_id(scene_prompt);
    const Tensor out = ddim_denoise(denoiser, start, cond, schedule, ts, config.guidance_scale,
                                    config.scheduler_kind, /*clamp_x0=*/true);
    result.image = to_u8(out);
    return result;
}

}  // namespace synth
