#include "synth/inpaint.hpp"

#include <cmath>
#include <cstdlib>

#include "json.hpp"
#include "synth/control.hpp"
#include "synth/errors.hpp"

#include <fstream>

namespace synth {

Tensor masked_blend(const Tensor& x_t, const Tensor& x0, const Tensor& mask) {
    if (!x_t.same_shape(x0)) throw ValidationError("masked_blend shape mismatch");
    if (mask.c != 1 || mask.h != x_t.h || mask.w != x_t.w)
        throw ValidationError("masked_blend mask must be 1xHxW matching the images");
    for (float v : mask.v)
        if (v != 0.f && v != 1.f) throw ValidationError("masked_blend mask must be binary");
    Tensor out(x_t.c, x_t.h, x_t.w);
    const size_t hw = size_t(x_t.h) * x_t.w;
    for (int c = 0; c < x_t.c; ++c)
        for (size_t i = 0; i < hw; ++i) {
            const float m = mask.v[i];
            out.v[size_t(c) * hw + i] =
                x_t.v[size_t(c) * hw + i] * m + x0.v[size_t(c) * hw + i] * (1.f - m);
        }
    return out;
}

Tensor mask_to_tensor(const BinaryMask& mask) {
    Tensor t(1, mask.mask.h, mask.mask.w);
    for (size_t i = 0; i < mask.mask.px.size(); ++i) t.v[i] = float(mask.mask.px[i]);
    return t;
}

BinaryMask resample_mask_nn(const BinaryMask& mask, int res) {
    if (mask.mask.h == res && mask.mask.w == res) return mask;
    BinaryMask out;
    out.class_id = mask.class_id;
    out.mask = LabelMap(res, res);
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            const int sy = std::min(mask.mask.h - 1, y * mask.mask.h / res);
            const int sx = std::min(mask.mask.w - 1, x * mask.mask.w / res);
            out.mask.at(y, x) = mask.mask.at(sy, sx);
        }
    return out;
}

Tensor edge_to_tensor(const EdgeImage& edge) {
    Tensor t(1, edge.h, edge.w);
    std::copy(edge.edges.begin(), edge.edges.end(), t.v.begin());
    return t;
}

// ---- registry ----------------------------------------------------------------

void ModelRegistry::register_class_model(std::shared_ptr<DenoiserModel> model) {
    if (model->class_id <= 0)
        throw ValidationError("class model must carry a positive class_id");
    if (models_.count(model->class_id))
        throw ValidationError("class " + std::to_string(model->class_id) + " already registered");
    models_[model->class_id] = std::move(model);
}

void ModelRegistry::register_scene_model(std::shared_ptr<DenoiserModel> model) {
    if (model->class_id != -1)
        throw ValidationError("scene model must have class_id -1");
    scene_ = std::move(model);
}

const DenoiserModel& ModelRegistry::class_model(int class_id) const {
    auto it = models_.find(class_id);
    if (it == models_.end())
        throw LookupError("no model registered for class " + std::to_string(class_id));
    return *it->second;
}

std::vector<int> ModelRegistry::class_ids() const {
    std::vector<int> ids;
    for (const auto& [k, _] : models_) ids.push_back(k);
    return ids;
}

void ModelRegistry::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json index;
    index["classes"] = nlohmann::json::object();
    for (const auto& [id, model] : models_) {
        const std::string fname = "ssi_class_" + std::to_string(id) + ".ckpt";
        save_denoiser(dir / fname, *model);
        index["classes"][std::to_string(id)] = fname;
    }
    if (scene_) {
        save_denoiser(dir / "scene.ckpt", *scene_);
        index["scene"] = "scene.ckpt";
    }
    std::ofstream out(dir / "index.json");
    if (!out) throw IoError("cannot write registry index in " + dir.string());
    out << index.dump(2) << "\n";
}

ModelRegistry ModelRegistry::load(const std::filesystem::path& dir) {
    std::ifstream in(dir / "index.json");
    if (!in) throw IoError("cannot open registry index in " + dir.string());
    nlohmann::json index;
    in >> index;
    ModelRegistry reg;
    for (const auto& [key, fname] : index.at("classes").items()) {
        auto model = load_denoiser(dir / fname.get<std::string>());
        if (model->class_id != std::stoi(key))
            throw ValidationError("registry key " + key + " does not match checkpoint class_id " +
                                  std::to_string(model->class_id));
        reg.register_class_model(std::move(model));
    }
    if (index.contains("scene"))
        reg.register_scene_model(load_denoiser(dir / index.at("scene").get<std::string>()));
    return reg;
}

// ---- defaults ------------------------------------------------------------------

PredictionType default_prediction_type(const std::string& class_name) {
    return class_name == "abdominal wall" ? PredictionType::v : PredictionType::epsilon;
}

float default_guidance_scale(const std::string& class_name) {
    if (class_name == "abdominal wall") return 0.6f;
    if (class_name == "fat") return 5.0f;
    if (class_name == "liver") return 6.0f;
    if (class_name == "gall bladder") return 5.5f;
    if (class_name == "ligament") return 5.0f;
    return 5.5f;
}

// ---- trainer --------------------------------------------------------------------

Tensor make_inpaint_extra_channels(const Tensor& mask, const Tensor& x0) {
    Tensor extra(1 + x0.c, x0.h, x0.w);
    const size_t hw = size_t(x0.h) * x0.w;
    std::copy(mask.v.begin(), mask.v.end(), extra.v.begin());
    for (int c = 0; c < x0.c; ++c)
        for (size_t i = 0; i < hw; ++i)
            extra.v[size_t(c + 1) * hw + i] = x0.v[size_t(c) * hw + i] * (1.f - mask.v[i]);
    return extra;
}

// input channels: [x_t*m + x0*(1-m), m, x0*(1-m)]
static Tensor assemble_inpaint_input(const Tensor& x_t, const Tensor& extra) {
    const size_t hw = size_t(x_t.h) * x_t.w;
    Tensor input(x_t.c + extra.c, x_t.h, x_t.w);
    for (int c = 0; c < x_t.c; ++c)
        for (size_t i = 0; i < hw; ++i) {
            const float m = extra.v[i];
            input.v[size_t(c) * hw + i] =
                x_t.v[size_t(c) * hw + i] * m + extra.v[size_t(c + 1) * hw + i];
        }
    std::copy(extra.v.begin(), extra.v.end(), input.v.begin() + ptrdiff_t(x_t.v.size()));
    return input;
}

Denoiser make_inpaint_denoiser(const DenoiserModel& model, const ControlAdapter* adapter) {
    Denoiser d;
    d.prediction_type = model.prediction_type;
    const DenoiserModel* m = &model;
    d.fn = [m, adapter](const Tensor& x_t, int t, const Condition& cond) {
        if (!cond.extra_channels)
            throw ValidationError("inpaint denoiser requires mask channels in the condition");
        const Tensor input = assemble_inpaint_input(x_t, *cond.extra_channels);
        UNetTrace tr;
        const ControlAdapter* a = cond.control ? adapter : nullptr;
        return m->net.forward(input, t, cond.prompt_id, tr, a, cond.control);
    };
    return d;
}

namespace {

// one worker's share of a training step: contiguous batch slice, grads
// accumulated into the worker's own model/adapter copy
struct TrainWorker {
    UNet* net = nullptr;
    ControlAdapter* adapter = nullptr;
};

double train_example(const DenoiserModel& meta, TrainWorker& worker,
                     const DiffusionTrainItem& item, const NoiseSchedule& schedule,
                     uint64_t step_seed, int b, int batch, float p_uncond,
                     bool masked_loss_only) {
    Rng ex(derive_seed(step_seed, "train_example", uint64_t(b)));
    const int t = int(ex.uniform_index(uint64_t(schedule.T)));
    Tensor z = normal_tensor(item.x0.c, item.x0.h, item.x0.w, ex);
    const Tensor x_t = forward_diffuse(item.x0, t, z, schedule);
    int prompt = item.prompt_id;
    if (ex.uniform() < double(p_uncond)) prompt = 0;

    const Tensor target = meta.prediction_type == PredictionType::epsilon
                              ? z
                              : v_from_eps(item.x0, z, t, schedule);

    const bool inpaint = item.extra.c > 0;
    const Tensor input = inpaint ? assemble_inpaint_input(x_t, item.extra) : x_t;
    const EdgePyramid* edges = item.has_edges ? &item.edges : nullptr;
    const ControlAdapter* fwd_adapter = edges ? worker.adapter : nullptr;

    UNetTrace tr;
    const Tensor pred = worker.net->forward(input, t, prompt, tr, fwd_adapter, edges);

    Tensor err(pred.c, pred.h, pred.w);
    double se = 0;
    size_t n_eff = pred.v.size();
    const size_t hw = size_t(pred.h) * pred.w;
    if (masked_loss_only && inpaint) {
        n_eff = 0;
        for (int c = 0; c < pred.c; ++c)
            for (size_t i = 0; i < hw; ++i) {
                const float m = item.extra.v[i];
                const float d = (pred.v[size_t(c) * hw + i] - target.v[size_t(c) * hw + i]) * m;
                err.v[size_t(c) * hw + i] = d;
                se += double(d) * d;
                n_eff += size_t(m);
            }
        if (n_eff == 0) n_eff = 1;
    } else {
        for (size_t i = 0; i < pred.v.size(); ++i) {
            const float d = pred.v[i] - target.v[i];
            err.v[i] = d;
            se += double(d) * d;
        }
    }

    Tensor dpred = err;
    dpred *= 2.f / (float(n_eff) * float(batch));
    worker.net->backward(tr, dpred, fwd_adapter ? worker.adapter : nullptr);
    return se / double(n_eff);
}

}  // namespace

DiffusionTrainResult run_diffusion_training(DenoiserModel& model,
                                            const std::vector<DiffusionTrainItem>& items,
                                            const NoiseSchedule& schedule, int steps, float lr,
                                            int batch, uint64_t seed, float p_uncond,
                                            bool masked_loss_only, ControlAdapter* adapter) {
    if (items.empty()) throw ValidationError("diffusion training requires at least one item");
    if (batch < 1) throw ValidationError("batch must be >= 1");

    const bool log = std::getenv("SYNTH_TRAIN_LOG") != nullptr;
    ParamRefs group = adapter ? adapter->params() : model.net.params();
    Adam opt;
    opt.lr = lr;
    DiffusionTrainResult result;

    // The batch always splits into two fixed slices with a fixed gradient
    // merge order, so results do not depend on how many threads actually run.
    const int split = batch / 2;
    UNet net_copy = model.net;
    ControlAdapter adapter_copy = adapter ? *adapter : ControlAdapter{};
    TrainWorker workers[2] = {{&model.net, adapter}, {&net_copy, adapter ? &adapter_copy : nullptr}};
    ParamRefs master_all = model.net.params();
    ParamRefs copy_all = net_copy.params();
    ParamRefs master_adapter = adapter ? adapter->params() : ParamRefs{};
    ParamRefs copy_adapter = adapter ? adapter_copy.params() : ParamRefs{};

    std::vector<double> losses(size_t(batch), 0.0);
    std::vector<const DiffusionTrainItem*> chosen(size_t(batch), nullptr);

    for (int step = 0; step < steps; ++step) {
        zero_grads(master_all);
        zero_grads(copy_all);
        if (adapter) {
            zero_grads(master_adapter);
            zero_grads(copy_adapter);
        }
        // sync the worker copy's weights with the master
        if (split > 0) {
            for (size_t i = 0; i < master_all.size(); ++i) copy_all[i]->w = master_all[i]->w;
            for (size_t i = 0; i < master_adapter.size(); ++i)
                copy_adapter[i]->w = master_adapter[i]->w;
        }

        Rng pick(derive_seed(seed, "batch_select", uint64_t(step)));
        const uint64_t step_seed = derive_seed(seed, "train_step", uint64_t(step));
        for (int b = 0; b < batch; ++b) chosen[size_t(b)] = &items[pick.uniform_index(items.size())];

#pragma omp parallel for schedule(static) num_threads(2)
        for (int w = 0; w < 2; ++w) {
            const int lo = w == 0 ? 0 : split;
            const int hi = w == 0 ? split : batch;
            for (int b = lo; b < hi; ++b)
                losses[size_t(b)] = train_example(model, workers[w == 0 ? 1 : 0], *chosen[size_t(b)],
                                                  schedule, step_seed, b, batch, p_uncond,
                                                  masked_loss_only);
        }
        // merge the copy's gradients into the master in fixed order
        if (split > 0) {
            for (size_t i = 0; i < master_all.size(); ++i)
                for (size_t k = 0; k < master_all[i]->g.size(); ++k)
                    master_all[i]->g[k] += copy_all[i]->g[k];
            for (size_t i = 0; i < master_adapter.size(); ++i)
                for (size_t k = 0; k < master_adapter[i]->g.size(); ++k)
                    master_adapter[i]->g[k] += copy_adapter[i]->g[k];
        }

        opt.step(group);
        double loss_acc = 0;
        for (int b = 0; b < batch; ++b) loss_acc += losses[size_t(b)];
        const double loss = loss_acc / double(batch);
        if (step == 0) result.first_loss = loss;
        result.last_loss = loss;
        if (log && (step % 100 == 0 || step == steps - 1))
            std::fprintf(stderr, "[train] step %d/%d loss %.4f\n", step, steps, loss);
    }
    return result;
}

// ---- SSI training -----------------------------------------------------------------

std::shared_ptr<DenoiserModel> train_ssi(int class_id, const std::vector<SampleRecord>& dataset,
                                         const ClassMap& class_map, const SsiTrainConfig& config) {
    const ClassEntry& entry = class_map.entry(class_id);

    std::vector<DiffusionTrainItem> items;
    int res = 0;
    for (const auto& rec : dataset) {
        bool present = false;
        for (uint8_t v : rec.label_map.px)
            if (v == class_id) {
                present = true;
                break;
            }
        if (!present) continue;  // samples lacking the class are skipped
        DiffusionTrainItem item;
        item.x0 = to_model(rec.image);
        BinaryMask bm;
        bm.class_id = class_id;
        bm.mask = LabelMap(rec.label_map.h, rec.label_map.w);
        for (size_t i = 0; i < rec.label_map.px.size(); ++i)
            bm.mask.px[i] = rec.label_map.px[i] == class_id ? 1 : 0;
        item.extra = make_inpaint_extra_channels(mask_to_tensor(bm), item.x0);
        item.prompt_id = 1;
        res = rec.image.h;
        items.push_back(std::move(item));
    }
    if (items.empty())
        throw ValidationError("no sample contains class " + std::to_string(class_id) + " (" +
                              entry.name + ")");

    auto model = std::make_shared<DenoiserModel>();
    model->cfg = config.arch;
    model->cfg.in_channels = 7;
    model->cfg.out_channels = 3;
    model->cfg.image_size = res;
    model->class_id = class_id;
    model->prediction_type =
        config.prediction_type.value_or(default_prediction_type(entry.name));
    model->schedule_spec = config.schedule;
    model->seed = config.seed;
    model->train_meta = {config.steps, config.lr, config.batch};
    model->net.init(model->cfg, derive_seed(config.seed, "ssi_init", uint64_t(class_id)));
    model->register_prompt(make_prompt(class_id, class_map, PromptKind::organ));

    const NoiseSchedule schedule = config.schedule.build();
    run_diffusion_training(*model, items, schedule, config.steps, config.lr, config.batch,
                           derive_seed(config.seed, "ssi_train", uint64_t(class_id)),
                           config.p_uncond, config.masked_loss_only);
    return model;
}

std::shared_ptr<DenoiserModel> train_scene_model(const std::vector<SampleRecord>& dataset,
                                                 const ClassMap& class_map,
                                                 const SsiTrainConfig& config) {
    if (dataset.empty()) throw ValidationError("scene model requires a nonempty dataset");
    std::vector<DiffusionTrainItem> items;
    for (const auto& rec : dataset) {
        DiffusionTrainItem item;
        item.x0 = to_model(rec.image);
        item.prompt_id = 1;
        items.push_back(std::move(item));
    }

    auto model = std::make_shared<DenoiserModel>();
    model->cfg = config.arch;
    model->cfg.in_channels = 3;
    model->cfg.out_channels = 3;
    model->cfg.image_size = dataset.front().image.h;
    model->class_id = -1;
    model->prediction_type = config.prediction_type.value_or(PredictionType::epsilon);
    model->schedule_spec = config.schedule;
    model->seed = config.seed;
    model->train_meta = {config.steps, config.lr, config.batch};
    model->net.init(model->cfg, derive_seed(config.seed, "scene_init"));
    model->register_prompt(make_prompt(0, class_map, PromptKind::scene));

    const NoiseSchedule schedule = config.schedule.build();
    run_diffusion_training(*model, items, schedule, config.steps, config.lr, config.batch,
                           derive_seed(config.seed, "scene_train"), config.p_uncond, false);
    return model;
}

// ---- sampling ------------------------------------------------------------------------

ImageU8 sample_inpaint_with_model(const DenoiserModel& model, const ImageU8& source_image,
                                  const BinaryMask& mask, const SamplerConfig& sampler_config,
                                  uint64_t seed, const ControlHandle* control) {
    const int res = model.cfg.image_size;
    if (source_image.h != res || source_image.w != res)
        throw ValidationError("source image resolution does not match the model");
    BinaryMask m_res = resample_mask_nn(mask, res);
    for (uint8_t v : m_res.mask.px)
        if (v > 1) throw ValidationError("inpainting mask must be binary");
    if (m_res.area() == 0) return source_image;  // nothing to inpaint

    const Tensor x0 = to_model(source_image);
    const Tensor m = mask_to_tensor(m_res);
    const Tensor extra = make_inpaint_extra_channels(m, x0);

    EdgePyramid pyramid;
    const EdgePyramid* edges = nullptr;
    const ControlAdapter* adapter = nullptr;
    if (control && control->adapter) {
        if (control->adapter->base_descriptor != model.cfg.descriptor())
            throw CompatibilityError("adapter trained for " + control->adapter->base_descriptor +
                                     " attached to " + model.cfg.descriptor());
        const EdgeImage edge = extract_soft_edges(m_res, control->edge_sigma);
        pyramid = make_edge_pyramid(edge_to_tensor(edge), res);
        edges = &pyramid;
        adapter = control->adapter.get();
    }

    const Denoiser denoiser = make_inpaint_denoiser(model, adapter);
    Condition cond;
    cond.prompt_id = model.prompt_vocab.empty() ? 0 : 1;
    cond.extra_channels = &extra;
    cond.control = edges;

    Rng init_rng(derive_seed(seed, "inpaint_init"));
    const Tensor eps = normal_tensor(3, res, res, init_rng);
    const Tensor x_T = masked_blend(eps, x0, m);

    const NoiseSchedule schedule = model.schedule_spec.build();
    const StepHook hook = [&](Tensor& state, int t) {
        if (t >= 0) {
            const Tensor zt = normal_like(state, derive_seed(seed, "blend_noise", uint64_t(t)));
            state = masked_blend(state, forward_diffuse(x0, t, zt, schedule), m);
        } else {
            state = masked_blend(state, x0, m);
        }
    };

    const Tensor out = ddim_sample(denoiser, x_T, cond, schedule, sampler_config, hook);
    ImageU8 img = to_u8(out);
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x)
            if (m_res.mask.at(y, x) == 0)
                for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = source_image.at(y, x, ch);
    return img;
}

ImageU8 sample_inpaint(const ModelRegistry& registry, int class_id, const ImageU8& source_image,
                       const BinaryMask& mask, const SamplerConfig& sampler_config, uint64_t seed,
                       const ControlHandle* control) {
    const DenoiserModel& model = registry.class_model(class_id);
    return sample_inpaint_with_model(model, source_image, mask, sampler_config, seed, control);
}

}  // namespace synth
