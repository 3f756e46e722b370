#pragma once

#include <functional>
#include <vector>

#include "synth/tensor.hpp"

namespace synth {

struct EdgePyramid;

// beta/alpha/alpha_bar tables defining the forward process
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas, alphas, alpha_bars;

    float sqrt_ab(int t) const;
    float sqrt_1mab(int t) const;
    void validate() const;
};

enum class ScheduleKind { linear, cosine };

NoiseSchedule build_schedule(ScheduleKind kind, int T, float beta_start = 1e-4f,
                             float beta_end = 0.02f);

enum class PredictionType { epsilon, v };

std::string prediction_type_name(PredictionType t);
PredictionType parse_prediction_type(const std::string& s);

// Conditioning for one denoiser call. prompt_id 0 means unconditional; the
// spatial channels and control signal stay in place under guidance dropout.
struct Condition {
    int prompt_id = 0;
    const Tensor* extra_channels = nullptr;  // inpainting mask + masked image
    const EdgePyramid* control = nullptr;
};

using DenoiseFn = std::function<Tensor(const Tensor& x_t, int t, const Condition& cond)>;

struct Denoiser {
    PredictionType prediction_type = PredictionType::epsilon;
    DenoiseFn fn;
};

enum class SchedulerKind { ddim, fast_multistep };

struct SamplerConfig {
    int n_steps = 30;
    float guidance_scale = 1.f;
    SchedulerKind scheduler_kind = SchedulerKind::ddim;
    float eta = 0.f;
    bool clamp_x0 = true;  // clamp the per-step clean estimate to the data range
};

// x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) z
Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& z, const NoiseSchedule& schedule);

// v = sqrt(ab_t) z - sqrt(1-ab_t) x0
Tensor v_from_eps(const Tensor& x0, const Tensor& z, int t, const NoiseSchedule& schedule);
// inverse given x_t
void eps_x0_from_v(const Tensor& x_t, const Tensor& v, int t, const NoiseSchedule& schedule,
                   Tensor& eps_out, Tensor& x0_out);
Tensor eps_from_model_output(const Tensor& x_t, const Tensor& pred, PredictionType type, int t,
                             const NoiseSchedule& schedule);

struct TrainExample {
    Tensor x0;
    Condition cond;
};

// Mean squared error against the schedule target with classifier-free
// guidance dropout; value-level contract shared with the trainers.
double training_loss(const Denoiser& denoiser, const std::vector<TrainExample>& batch,
                     const NoiseSchedule& schedule, uint64_t rng_seed,
                     float p_uncond = 0.1f);

// eps_hat = eps_uncond + s (eps_cond - eps_uncond), in epsilon space
Tensor cfg_predict(const Denoiser& denoiser, const Tensor& x_t, int t, const Condition& cond,
                   float guidance_scale, const NoiseSchedule& schedule);

// hook runs after each update; t is the timestep of the new state, -1 for the
// final clean estimate
using StepHook = std::function<void(Tensor& state, int t)>;

// evenly strided descending timesteps over [0, t_max)
std::vector<int> strided_timesteps(int t_max, int n_steps);

// deterministic denoising loop over an explicit timestep subsequence
Tensor ddim_denoise(const Denoiser& denoiser, Tensor x, const Condition& cond,
                    const NoiseSchedule& schedule, const std::vector<int>& timesteps,
                    float guidance_scale, SchedulerKind scheduler_kind, bool clamp_x0,
                    const StepHook& hook = nullptr);

Tensor ddim_sample(const Denoiser& denoiser, const Tensor& x_T, const Condition& cond,
                   const NoiseSchedule& schedule, const SamplerConfig& config,
                   const StepHook& hook = nullptr);

}  // namespace synth
