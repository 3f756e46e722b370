#include "synth/diffusion.hpp"

#include <cmath>

#include "synth/errors.hpp"

namespace synth {

float NoiseSchedule::sqrt_ab(int t) const { return float(std::sqrt(alpha_bars[size_t(t)])); }
float NoiseSchedule::sqrt_1mab(int t) const {
    return float(std::sqrt(1.0 - alpha_bars[size_t(t)]));
}

void NoiseSchedule::validate() const {
    if (T < 2 || int(betas.size()) != T || int(alpha_bars.size()) != T)
        throw ValidationError("noise schedule requires T >= 2 with full tables");
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double b = betas[size_t(t)];
        if (!(b > 0.0 && b < 1.0)) throw ValidationError("beta out of (0,1)");
        const double ab = alpha_bars[size_t(t)];
        if (!(ab > 0.0 && ab <= 1.0)) throw ValidationError("alpha_bar out of (0,1]");
        if (t > 0 && ab >= alpha_bars[size_t(t - 1)])
            throw ValidationError("alpha_bars must be strictly decreasing");
        prod *= 1.0 - b;
        if (std::abs(prod - ab) > 1e-10)
            throw ValidationError("alpha_bar inconsistent with cumulative product");
    }
}

NoiseSchedule build_schedule(ScheduleKind kind, int T, float beta_start, float beta_end) {
    if (T < 2) throw ValidationError("schedule T must be >= 2");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(size_t(T));
    if (kind == ScheduleKind::linear) {
        if (!(beta_start > 0.f && beta_start <= beta_end && beta_end < 1.f))
            throw ValidationError("linear schedule requires 0 < beta_start <= beta_end < 1");
        for (int t = 0; t < T; ++t)
            s.betas[size_t(t)] =
                double(beta_start) + double(beta_end - beta_start) * double(t) / double(T - 1);
    } else {
        // cosine schedule (squared-cosine alpha_bar), betas derived and clipped
        const auto f = [T](int t) {
            const double a = (double(t) / T + 0.008) / 1.008 * 1.5707963267948966;
            const double c = std::cos(a);
            return c * c;
        };
        for (int t = 0; t < T; ++t) {
            double beta = 1.0 - f(t + 1) / f(t);
            s.betas[size_t(t)] = std::min(0.999, std::max(1e-8, beta));
        }
    }
    s.alphas.resize(size_t(T));
    s.alpha_bars.resize(size_t(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        s.alphas[size_t(t)] = 1.0 - s.betas[size_t(t)];
        prod *= s.alphas[size_t(t)];
        s.alpha_bars[size_t(t)] = prod;
    }
    s.validate();
    return s;
}

std::string prediction_type_name(PredictionType t) {
    return t == PredictionType::epsilon ? "epsilon" : "v";
}

PredictionType parse_prediction_type(const std::string& s) {
    if (s == "epsilon") return PredictionType::epsilon;
    if (s == "v") return PredictionType::v;
    throw ValidationError("unknown prediction type: " + s);
}

static void check_t(int t, const NoiseSchedule& s) {
    if (t < 0 || t >= s.T) throw ValidationError("timestep out of range");
}

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& z, const NoiseSchedule& schedule) {
    check_t(t, schedule);
    if (!x0.same_shape(z)) throw ValidationError("forward_diffuse shape mismatch");
    const float a = schedule.sqrt_ab(t), b = schedule.sqrt_1mab(t);
    Tensor out(x0.c, x0.h, x0.w);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * x0.v[i] + b * z.v[i];
    return out;
}

Tensor v_from_eps(const Tensor& x0, const Tensor& z, int t, const NoiseSchedule& schedule) {
    check_t(t, schedule);
    if (!x0.same_shape(z)) throw ValidationError("v_from_eps shape mismatch");
    const float a = schedule.sqrt_ab(t), b = schedule.sqrt_1mab(t);
    Tensor v(x0.c, x0.h, x0.w);
    for (size_t i = 0; i < v.v.size(); ++i) v.v[i] = a * z.v[i] - b * x0.v[i];
    return v;
}

void eps_x0_from_v(const Tensor& x_t, const Tensor& v, int t, const NoiseSchedule& schedule,
                   Tensor& eps_out, Tensor& x0_out) {
    check_t(t, schedule);
    if (!x_t.same_shape(v)) throw ValidationError("eps_x0_from_v shape mismatch");
    const float a = schedule.sqrt_ab(t), b = schedule.sqrt_1mab(t);
    eps_out = Tensor(x_t.c, x_t.h, x_t.w);
    x0_out = Tensor(x_t.c, x_t.h, x_t.w);
    for (size_t i = 0; i < v.v.size(); ++i) {
        eps_out.v[i] = b * x_t.v[i] + a * v.v[i];
        x0_out.v[i] = a * x_t.v[i] - b * v.v[i];
    }
}

Tensor eps_from_model_output(const Tensor& x_t, const Tensor& pred, PredictionType type, int t,
                             const NoiseSchedule& schedule) {
    if (type == PredictionType::epsilon) return pred;
    Tensor eps, x0;
    eps_x0_from_v(x_t, pred, t, schedule, eps, x0);
    return eps;
}

double training_loss(const Denoiser& denoiser, const std::vector<TrainExample>& batch,
                     const NoiseSchedule& schedule, uint64_t rng_seed, float p_uncond) {
    if (batch.empty()) throw ValidationError("training_loss: empty batch");
    double total = 0;
    for (size_t i = 0; i < batch.size(); ++i) {
        Rng rng(derive_seed(rng_seed, "train_example", uint64_t(i)));
        const int t = int(rng.uniform_index(uint64_t(schedule.T)));
        Tensor z = normal_tensor(batch[i].x0.c, batch[i].x0.h, batch[i].x0.w, rng);
        const Tensor x_t = forward_diffuse(batch[i].x0, t, z, schedule);

        Condition cond = batch[i].cond;
        if (rng.uniform() < double(p_uncond)) cond.prompt_id = 0;

        const Tensor target = denoiser.prediction_type == PredictionType::epsilon
                                  ? z
                                  : v_from_eps(batch[i].x0, z, t, schedule);
        const Tensor pred = denoiser.fn(x_t, t, cond);
        if (!pred.same_shape(target)) throw ValidationError("denoiser output shape mismatch");
        double se = 0;
        for (size_t k = 0; k < pred.v.size(); ++k) {
            const double d = double(pred.v[k]) - double(target.v[k]);
            se += d * d;
        }
        total += se / double(pred.v.size());
    }
    return total / double(batch.size());
}

Tensor cfg_predict(const Denoiser& denoiser, const Tensor& x_t, int t, const Condition& cond,
                   float guidance_scale, const NoiseSchedule& schedule) {
    const Tensor pred_c = denoiser.fn(x_t, t, cond);
    const Tensor eps_c = eps_from_model_output(x_t, pred_c, denoiser.prediction_type, t, schedule);
    if (guidance_scale == 1.f) return eps_c;

    Condition uncond = cond;
    uncond.prompt_id = 0;
    const Tensor pred_u = denoiser.fn(x_t, t, uncond);
    const Tensor eps_u = eps_from_model_output(x_t, pred_u, denoiser.prediction_type, t, schedule);

    Tensor out(eps_c.c, eps_c.h, eps_c.w);
    for (size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = eps_u.v[i] + guidance_scale * (eps_c.v[i] - eps_u.v[i]);
    return out;
}

std::vector<int> strided_timesteps(int t_max, int n_steps) {
    if (t_max <= 0) return {};
    n_steps = std::min(n_steps, t_max);
    if (n_steps < 1) throw ValidationError("sampler requires n_steps >= 1");
    std::vector<int> ts(size_t(n_steps), 0);
    for (int i = 0; i < n_steps; ++i)
        ts[size_t(i)] = int(std::lround(double(t_max) * double(n_steps - i) / n_steps)) - 1;
    return ts;
}

Tensor ddim_denoise(const Denoiser& denoiser, Tensor x, const Condition& cond,
                    const NoiseSchedule& schedule, const std::vector<int>& timesteps,
                    float guidance_scale, SchedulerKind scheduler_kind, bool clamp_x0,
                    const StepHook& hook) {
    Tensor eps_prev;
    bool have_prev = false;
    for (size_t i = 0; i < timesteps.size(); ++i) {
        const int t = timesteps[i];
        const int t_prev = i + 1 < timesteps.size() ? timesteps[i + 1] : -1;
        Tensor eps = cfg_predict(denoiser, x, t, cond, guidance_scale, schedule);

        if (scheduler_kind == SchedulerKind::fast_multistep && have_prev) {
            // 2nd-order Adams-Bashforth on the noise prediction
            Tensor blend(eps.c, eps.h, eps.w);
            for (size_t k = 0; k < eps.v.size(); ++k)
                blend.v[k] = 1.5f * eps.v[k] - 0.5f * eps_prev.v[k];
            eps_prev = eps;
            eps = blend;
        } else if (scheduler_kind == SchedulerKind::fast_multistep) {
            eps_prev = eps;
            have_prev = true;
        }

        const float a_t = schedule.sqrt_ab(t), b_t = schedule.sqrt_1mab(t);
        const float a_p = t_prev >= 0 ? schedule.sqrt_ab(t_prev) : 1.f;
        const float b_p = t_prev >= 0 ? schedule.sqrt_1mab(t_prev) : 0.f;
        Tensor next(x.c, x.h, x.w);
        for (size_t k = 0; k < x.v.size(); ++k) {
            float x0_hat = (x.v[k] - b_t * eps.v[k]) / a_t;
            if (clamp_x0) x0_hat = std::min(1.f, std::max(-1.f, x0_hat));
            // keep the state consistent with the (possibly clamped) estimate
            const float eps_k = clamp_x0 && b_t > 0.f ? (x.v[k] - a_t * x0_hat) / b_t : eps.v[k];
            next.v[k] = a_p * x0_hat + b_p * eps_k;
        }
        x = std::move(next);
        if (hook) hook(x, t_prev);
    }
    for (auto& v : x.v) v = std::min(1.f, std::max(-1.f, v));
    return x;
}

Tensor ddim_sample(const Denoiser& denoiser, const Tensor& x_T, const Condition& cond,
                   const NoiseSchedule& schedule, const SamplerConfig& config,
                   const StepHook& hook) {
    if (config.n_steps < 1 || config.n_steps > schedule.T)
        throw ValidationError("sampler n_steps out of range");
    const std::vector<int> ts = strided_timesteps(schedule.T, config.n_steps);
    return ddim_denoise(denoiser, x_T, cond, schedule, ts, config.guidance_scale,
                        config.scheduler_kind, config.clamp_x0, hook);
}

}  // namespace synth
