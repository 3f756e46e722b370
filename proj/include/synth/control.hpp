#pragma once

#include <memory>

#include "synth/inpaint.hpp"

namespace synth {

// Trained adapter plus the edge-extraction setting used at sampling time.
struct ControlHandle {
    std::shared_ptr<ControlAdapter> adapter;
    float edge_sigma = 1.f;
};

// One injection site of the combined model:
//   y = B(s_f; theta_L) + scale * Zout(B(s_f + Zin(c_f); theta_c))
Tensor adapter_forward(const ResBlock& base_block, const AdapterSite& site, float scale,
                       const Tensor& s_f, const Tensor& c_f, const std::vector<float>& emb);

struct AdapterTrainExample {
    ImageU8 image;
    BinaryMask mask;
    EdgeImage edges;
    std::string prompt;
};

struct AdapterTrainConfig {
    int steps = 800;
    float lr = 1e-3f;
    int batch = 8;
    uint64_t seed = 0;
    float p_uncond = 0.1f;
    float conditioning_scale = 0.5f;
};

// Optimizes the adapter copy and its zero projections with the base frozen.
// The denoiser context uses a full-frame mask so the edge image is the only
// spatial signal about organ placement.
ControlHandle train_adapter(DenoiserModel& base, const std::vector<AdapterTrainExample>& dataset,
                            const AdapterTrainConfig& config, float edge_sigma = 1.f);

// SSI-CN sampling context
struct SsiCnContext {
    const DenoiserModel* model = nullptr;
    ControlHandle handle;

    ImageU8 sample(const ImageU8& source, const BinaryMask& mask, const SamplerConfig& cfg,
                   uint64_t seed) const {
        return sample_inpaint_with_model(*model, source, mask, cfg, seed, &handle);
    }
};

SsiCnContext attach(const ModelRegistry& registry, int class_id, const ControlHandle& handle);

// Free generation used to probe edge conditioning: full-frame mask over a
// flat background so the layout must come from the adapter.
ImageU8 sample_free_generation(const DenoiserModel& model, const SamplerConfig& sampler_config,
                               uint64_t seed, const ControlHandle* control = nullptr,
                               const EdgeImage* edges = nullptr);

}  // namespace synth
