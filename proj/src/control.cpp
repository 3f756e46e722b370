#include "synth/control.hpp"

#include "synth/errors.hpp"

namespace synth {

Tensor adapter_forward(const ResBlock& base_block, const AdapterSite& site, float scale,
                       const Tensor& s_f, const Tensor& c_f, const std::vector<float>& emb) {
    if (s_f.c != base_block.c_in) throw ValidationError("adapter_forward: feature map channels");
    if (c_f.c != 1 || c_f.h != s_f.h || c_f.w != s_f.w)
        throw ValidationError("adapter_forward: edge features must be 1xHxW matching s_f");

    ResBlock::Trace base_tr, adapt_tr;
    Tensor y = base_block.forward(s_f, emb, base_tr);

    Tensor a_in = s_f;
    a_in += site.zin.forward(c_f);
    const Tensor a_out = site.block.forward(a_in, emb, adapt_tr);
    Tensor inj = site.zout.forward(a_out);
    inj *= scale;
    y += inj;
    return y;
}

ControlHandle train_adapter(DenoiserModel& base, const std::vector<AdapterTrainExample>& dataset,
                            const AdapterTrainConfig& config, float edge_sigma) {
    if (dataset.empty()) throw ValidationError("adapter training requires a nonempty dataset");
    const int res = base.cfg.image_size;
    const bool inpaint_base = base.cfg.in_channels > base.cfg.out_channels;

    // Full-frame mask context for inpainting bases: the edge image must be
    // the only spatial signal about organ placement. Plain bases (the scene
    // model) take the raw image channels.
    Tensor ones(1, res, res);
    ones.fill(1.f);

    std::vector<DiffusionTrainItem> items;
    for (const auto& ex : dataset) {
        if (ex.image.h != res || ex.image.w != res)
            throw ValidationError("adapter example resolution does not match the base model");
        DiffusionTrainItem item;
        item.x0 = to_model(ex.image);
        if (inpaint_base) item.extra = make_inpaint_extra_channels(ones, item.x0);
        item.prompt_id = base.prompt_id(ex.prompt);
        item.edges = make_edge_pyramid(edge_to_tensor(ex.edges), res);
        item.has_edges = true;
        items.push_back(std::move(item));
    }

    ControlAdapter adapter = base.net.make_adapter(config.conditioning_scale);
    const NoiseSchedule schedule = base.schedule_spec.build();
    run_diffusion_training(base, items, schedule, config.steps, config.lr, config.batch,
                           derive_seed(config.seed, "adapter_train"), config.p_uncond,
                           /*masked_loss_only=*/false, &adapter);

    ControlHandle handle;
    handle.adapter = std::make_shared<ControlAdapter>(std::move(adapter));
    handle.edge_sigma = edge_sigma;
    return handle;
}

SsiCnContext attach(const ModelRegistry& registry, int class_id, const ControlHandle& handle) {
    const DenoiserModel& model = registry.class_model(class_id);
    if (!handle.adapter) throw ValidationError("attach: handle carries no adapter");
    if (handle.adapter->base_descriptor != model.cfg.descriptor())
        throw CompatibilityError("adapter descriptor " + handle.adapter->base_descriptor +
                                 " does not match model descriptor " + model.cfg.descriptor());
    SsiCnContext ctx;
    ctx.model = &model;
    ctx.handle = handle;
    return ctx;
}

ImageU8 sample_free_generation(const DenoiserModel& model, const SamplerConfig& sampler_config,
                               uint64_t seed, const ControlHandle* control,
                               const EdgeImage* edges) {
    const int res = model.cfg.image_size;
    const bool inpaint_base = model.cfg.in_channels > model.cfg.out_channels;
    Tensor ones(1, res, res);
    ones.fill(1.f);
    Tensor zeros3(3, res, res);
    const Tensor extra = make_inpaint_extra_channels(ones, zeros3);

    EdgePyramid pyramid;
    const EdgePyramid* pp = nullptr;
    const ControlAdapter* adapter = nullptr;
    if (control && control->adapter) {
        if (!edges) throw ValidationError("free generation with control requires an edge image");
        if (control->adapter->base_descriptor != model.cfg.descriptor())
            throw CompatibilityError("adapter descriptor " + control->adapter->base_descriptor +
                                     " does not match model descriptor " + model.cfg.descriptor());
        pyramid = make_edge_pyramid(edge_to_tensor(*edges), res);
        pp = &pyramid;
        adapter = control->adapter.get();
    }

    const Denoiser denoiser = inpaint_base ? make_inpaint_denoiser(model, adapter)
                                           : make_plain_denoiser(model, adapter);
    Condition cond;
    cond.prompt_id = model.prompt_vocab.empty() ? 0 : 1;
    if (inpaint_base) cond.extra_channels = &extra;
    cond.control = pp;

    Rng rng(derive_seed(seed, "free_gen"));
    const Tensor x_T = normal_tensor(3, res, res, rng);
    const NoiseSchedule schedule = model.schedule_spec.build();
    const Tensor out = ddim_sample(denoiser, x_T, cond, schedule, sampler_config);
    return to_u8(out);
}

}  // namespace synth
