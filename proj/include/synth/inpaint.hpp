#pragma once

#include <map>
#include <memory>

#include "synth/checkpoint.hpp"
#include "synth/dataset.hpp"
#include "synth/diffusion.hpp"

namespace synth {

// x_tilde = x_t * m + x0 * (1 - m); mask is 1xHxW and broadcast over channels
Tensor masked_blend(const Tensor& x_t, const Tensor& x0, const Tensor& mask);

Tensor mask_to_tensor(const BinaryMask& mask);
BinaryMask resample_mask_nn(const BinaryMask& mask, int res);
Tensor edge_to_tensor(const EdgeImage& edge);

// Per-class checkpoint store plus one scene-level model.
class ModelRegistry {
public:
    void register_class_model(std::shared_ptr<DenoiserModel> model);
    void register_scene_model(std::shared_ptr<DenoiserModel> model);
    const DenoiserModel& class_model(int class_id) const;
    const DenoiserModel* scene_model() const { return scene_.get(); }
    bool has_class(int class_id) const { return models_.count(class_id) > 0; }
    std::vector<int> class_ids() const;

    void save(const std::filesystem::path& dir) const;
    static ModelRegistry load(const std::filesystem::path& dir);

private:
    std::map<int, std::shared_ptr<DenoiserModel>> models_;
    std::shared_ptr<DenoiserModel> scene_;
};

struct SsiTrainConfig {
    int steps = 1500;        // fine-tune step default
    float lr = 1e-5f;        // default learning rate; toy runs override
    int batch = 8;
    uint64_t seed = 0;
    float p_uncond = 0.1f;
    bool masked_loss_only = false;  // objective restricted to the mask region
    // resolved per class when left unset
    std::optional<PredictionType> prediction_type;
    UNetConfig arch;          // in/out channels are set by the trainer
    ScheduleSpec schedule;
};

// per-organ defaults: abdominal wall trains with v-prediction, others epsilon
PredictionType default_prediction_type(const std::string& class_name);
float default_guidance_scale(const std::string& class_name);

// Trains the class-specific inpainting model; the denoiser input is
// [blended image, mask, masked source] and the loss covers the full tensor.
std::shared_ptr<DenoiserModel> train_ssi(int class_id,
                                         const std::vector<SampleRecord>& dataset,
                                         const ClassMap& class_map,
                                         const SsiTrainConfig& config);

// Scene-level model over plain images (no mask channels), used by the refiner.
std::shared_ptr<DenoiserModel> train_scene_model(const std::vector<SampleRecord>& dataset,
                                                 const ClassMap& class_map,
                                                 const SsiTrainConfig& config);

// denoiser view over an inpainting model bound to one (mask, source) pair
Denoiser make_inpaint_denoiser(const DenoiserModel& model, const ControlAdapter* adapter);
Tensor make_inpaint_extra_channels(const Tensor& mask, const Tensor& x0);

struct ControlHandle;  // control.hpp

// Masked sampling: starts from eps*m + x0*(1-m), keeps the out-of-mask
// region pinned to the noised source each step, returns the source bit-exact
// outside the mask.
ImageU8 sample_inpaint(const ModelRegistry& registry, int class_id, const ImageU8& source_image,
                       const BinaryMask& mask, const SamplerConfig& sampler_config,
                       uint64_t seed, const ControlHandle* control = nullptr);

ImageU8 sample_inpaint_with_model(const DenoiserModel& model, const ImageU8& source_image,
                                  const BinaryMask& mask, const SamplerConfig& sampler_config,
                                  uint64_t seed, const ControlHandle* control = nullptr);

// shared Adam training loop over the diffusion objective; also used for the
// adapter (frozen base) and the scene model
struct DiffusionTrainItem {
    Tensor x0;
    Tensor extra;           // may be empty (no extra channels)
    int prompt_id = 1;
    EdgePyramid edges;      // used when train_adapter attaches control
    bool has_edges = false;
};

struct DiffusionTrainResult {
    double first_loss = 0, last_loss = 0;
};

DiffusionTrainResult run_diffusion_training(DenoiserModel& model,
                                            const std::vector<DiffusionTrainItem>& items,
                                            const NoiseSchedule& schedule, int steps, float lr,
                                            int batch, uint64_t seed, float p_uncond,
                                            bool masked_loss_only,
                                            ControlAdapter* adapter = nullptr);

}  // namespace synth
