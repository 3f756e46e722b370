#include "synth/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <set>

#include "synth/checkpoint.hpp"
#include "synth/control.hpp"
#include "synth/errors.hpp"
#include "synth/inpaint.hpp"
#include "synth/refine.hpp"

namespace synth {

namespace fs = std::filesystem;
using nlohmann::json;

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::ingest: return "ingest";
        case Stage::train_ssi_all: return "train_ssi_all";
        case Stage::train_adapter: return "train_adapter";
        case Stage::generate_organs: return "generate_organs";
        case Stage::compose: return "compose";
        case Stage::refine: return "refine";
        case Stage::evaluate_quality: return "evaluate_quality";
        case Stage::seg_train: return "seg_train";
        case Stage::seg_eval: return "seg_eval";
        case Stage::report: return "report";
    }
    return "?";
}

Stage parse_stage(const std::string& s) {
    for (Stage st : {Stage::ingest, Stage::train_ssi_all, Stage::train_adapter,
                     Stage::generate_organs, Stage::compose, Stage::refine,
                     Stage::evaluate_quality, Stage::seg_train, Stage::seg_eval, Stage::report})
        if (stage_name(st) == s) return st;
    throw ValidationError("unknown stage: " + s);
}

// ---- config ---------------------------------------------------------------------

namespace {

const json* walk(const json& j, const std::string& path) {
    const json* cur = &j;
    size_t start = 0;
    while (start < path.size()) {
        const size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (!cur->is_object() || !cur->contains(key)) return nullptr;
        cur = &(*cur)[key];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    return cur;
}

template <typename T>
T cfg_get(const json& j, const std::string& path, T def) {
    const json* v = walk(j, path);
    if (!v) return def;
    try {
        return v->get<T>();
    } catch (const json::exception&) {
        throw ValidationError("config." + path + ": wrong type");
    }
}

}  // namespace

PipelineConfig load_pipeline_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("config parse error in " + path.string() + ": " + e.what());
    }

    PipelineConfig c;
    c.toy.n_samples = cfg_get(j, "dataset.n_samples", 120);
    c.toy.image_size = cfg_get(j, "dataset.image_size", 32);
    c.toy.n_classes = cfg_get(j, "dataset.n_classes", 3);
    c.toy.n_train = cfg_get(j, "dataset.n_train", -1);
    c.toy.n_test = cfg_get(j, "dataset.n_test", -1);
    c.toy.n_val = cfg_get(j, "dataset.n_val", -1);
    c.toy.texture.noise_amp = cfg_get(j, "dataset.noise_amp", c.toy.texture.noise_amp);
    c.toy.texture.class_presence = cfg_get(j, "dataset.class_presence", c.toy.texture.class_presence);
    c.sim_masks = cfg_get(j, "dataset.sim_masks", 16);

    c.schedule = {{"kind", cfg_get<std::string>(j, "schedule.kind", "linear")},
                  {"T", cfg_get(j, "schedule.T", 1000)},
                  {"beta_start", cfg_get(j, "schedule.beta_start", 1e-4f)},
                  {"beta_end", cfg_get(j, "schedule.beta_end", 0.02f)}};

    c.width0 = cfg_get(j, "model.width0", 16);
    c.width1 = cfg_get(j, "model.width1", 32);
    c.width2 = cfg_get(j, "model.width2", 32);
    c.emb_dim = cfg_get(j, "model.emb_dim", 64);
    c.groups = cfg_get(j, "model.groups", 8);

    c.ssi_steps = cfg_get(j, "ssi.steps", 1500);
    c.ssi_lr = cfg_get(j, "ssi.lr", 1e-5f);
    c.ssi_batch = cfg_get(j, "ssi.batch", 8);
    c.p_uncond = cfg_get(j, "ssi.p_uncond", 0.1f);
    c.masked_loss_only = cfg_get(j, "ssi.masked_loss_only", false);
    c.scene_steps = cfg_get(j, "scene.steps", 800);
    c.scene_lr = cfg_get(j, "scene.lr", 1e-3f);
    c.scene_batch = cfg_get(j, "scene.batch", 8);

    c.adapter_steps = cfg_get(j, "adapter.steps", 800);
    c.adapter_lr = cfg_get(j, "adapter.lr", 1e-3f);
    c.adapter_batch = cfg_get(j, "adapter.batch", 8);
    c.conditioning_scale = cfg_get(j, "adapter.conditioning_scale", 0.5f);
    c.edge_sigma = cfg_get(j, "adapter.edge_sigma", 1.f);

    c.sample_steps = cfg_get(j, "sampler.n_steps", 30);
    const std::string sk = cfg_get<std::string>(j, "sampler.scheduler", "ddim");
    if (sk == "ddim")
        c.scheduler_kind = SchedulerKind::ddim;
    else if (sk == "fast_multistep")
        c.scheduler_kind = SchedulerKind::fast_multistep;
    else
        throw ValidationError("config.sampler.scheduler: unknown kind " + sk);
    if (const json* g = walk(j, "sampler.guidance_overrides")) {
        if (!g->is_object()) throw ValidationError("config.sampler.guidance_overrides: wrong type");
        for (const auto& [key, val] : g->items()) c.guidance_overrides[std::stoi(key)] = val;
    }

    c.n_scenes = cfg_get(j, "generate.n_scenes", 20);
    c.mask_source = cfg_get<std::string>(j, "generate.mask_source", "real");
    if (c.mask_source != "real" && c.mask_source != "simulated")
        throw ValidationError("config.generate.mask_source must be real or simulated");
    c.use_control = cfg_get(j, "generate.use_control", true);
    c.registry_dir = cfg_get<std::string>(j, "generate.registry_dir", "");
    c.adapters_dir = cfg_get<std::string>(j, "generate.adapters_dir", "");

    c.refine_enabled = cfg_get(j, "refine.enabled", true);
    c.refine_strength = cfg_get(j, "refine.strength", 0.3f);
    c.refine_steps = cfg_get(j, "refine.n_steps", 10);
    c.refine_guidance = cfg_get(j, "refine.guidance_scale", 1.f);

    c.seg.steps = cfg_get(j, "seg.steps", 1200);
    c.seg.lr = cfg_get(j, "seg.lr", 2e-3f);
    c.seg.batch = cfg_get(j, "seg.batch", 8);
    c.seg.width = cfg_get(j, "seg.width", 16);
    c.seg.finetune_steps = cfg_get(j, "seg.finetune_steps", 400);
    c.seg_seeds = cfg_get(j, "seg.n_seeds", 1);
    const std::vector<std::string> default_schemes = {"real_noaug", "syn_only", "syn_plus_real"};
    for (const auto& s : cfg_get(j, "seg.schemes", default_schemes))
        c.schemes.push_back(parse_scheme(s));

    c.extractor_steps = cfg_get(j, "metrics.extractor_steps", 400);
    c.kid_subset = cfg_get(j, "metrics.kid_subset", 50);
    c.kid_subsets = cfg_get(j, "metrics.kid_subsets", 10);

    if (c.sample_steps < 1) throw ValidationError("config.sampler.n_steps: must be >= 1");
    if (c.n_scenes < 1) throw ValidationError("config.generate.n_scenes: must be >= 1");
    return c;
}

// ---- manifest --------------------------------------------------------------------

uint64_t fnv1a64_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot hash missing file: " + path.string());
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        const std::streamsize n = in.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= uint8_t(buf[i]);
            h *= 0x100000001b3ull;
        }
        if (!in) break;
    }
    return h;
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
    return buf;
}

ExperimentManifest ExperimentManifest::open(const fs::path& root,
                                            const std::string& experiment_id) {
    ExperimentManifest m;
    m.root_ = root / experiment_id;
    fs::create_directories(m.root_);
    m.file_ = m.root_ / "manifest.json";
    if (fs::exists(m.file_)) {
        std::ifstream in(m.file_);
        try {
            in >> m.doc_;
        } catch (const json::exception& e) {
            throw IoError("corrupt manifest " + m.file_.string() + ": " + e.what());
        }
    } else {
        m.doc_ = {{"experiment", experiment_id}, {"records", json::array()}};
    }
    return m;
}

bool ExperimentManifest::has_stage(const std::string& stage) const {
    for (const auto& r : doc_.at("records"))
        if (r.at("stage") == stage) return true;
    return false;
}

std::vector<ArtifactRef> ExperimentManifest::stage_outputs(const std::string& stage) const {
    std::vector<ArtifactRef> out;
    for (const auto& r : doc_.at("records"))
        if (r.at("stage") == stage) {
            out.clear();
            for (const auto& o : r.at("outputs"))
                out.push_back({o.at("path"), o.at("hash"), o.value("volatile", false)});
        }
    return out;
}

void ExperimentManifest::append(const StageRecord& record) {
    json r = {{"stage", record.stage},
              {"seed", record.seed},
              {"config_hash", record.config_hash},
              {"inputs", record.inputs},
              {"wall_ms", record.wall_ms},
              {"outputs", json::array()}};
    for (const auto& o : record.outputs)
        r["outputs"].push_back(
            {{"path", o.path}, {"hash", o.hash}, {"volatile", o.is_volatile}});
    doc_["records"].push_back(std::move(r));
    std::ofstream out(file_);
    if (!out) throw IoError("cannot write manifest: " + file_.string());
    out << doc_.dump(1) << "\n";
}

std::filesystem::path artifact_root() {
    if (const char* env = std::getenv("SYNTH_ARTIFACT_ROOT")) return fs::path(env);
    return fs::path("artifacts");
}

// ---- stage helpers ------------------------------------------------------------------

namespace {

struct StageCtx {
    PipelineConfig cfg;
    fs::path config_path;
    uint64_t seed = 0;
    ExperimentManifest manifest;
    std::vector<ArtifactRef> outputs;

    fs::path root() const { return manifest.root(); }

    void add_output(const fs::path& p, bool is_volatile = false) {
        outputs.push_back({fs::relative(p, root()).string(), hash_hex(fnv1a64_file(p)),
                           is_volatile});
    }
    void require(const std::string& stage) const {
        if (!manifest.has_stage(stage))
            throw DependencyError("stage '" + stage + "' has not been recorded yet");
    }
};

std::string scene_stem(int i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%04d", i);
    return buf;
}

struct LoadedData {
    ClassMap class_map;
    std::vector<SampleRecord> records;
    std::vector<const SampleRecord*> train, test;
};

LoadedData load_data(const StageCtx& ctx) {
    LoadedData d;
    d.class_map = load_class_map(ctx.root() / "data" / "class_map.json");
    d.records = load_dataset(ctx.root() / "data" / "manifest.jsonl", d.class_map);
    for (const auto& r : d.records) {
        if (r.split == Split::train) d.train.push_back(&r);
        if (r.split == Split::test) d.test.push_back(&r);
    }
    return d;
}

UNetConfig arch_from(const PipelineConfig& c) {
    UNetConfig a;
    a.width0 = c.width0;
    a.width1 = c.width1;
    a.width2 = c.width2;
    a.emb_dim = c.emb_dim;
    a.groups = c.groups;
    a.image_size = c.toy.image_size;
    return a;
}

SsiTrainConfig ssi_config_from(const PipelineConfig& c, uint64_t seed) {
    SsiTrainConfig t;
    t.steps = c.ssi_steps;
    t.lr = c.ssi_lr;
    t.batch = c.ssi_batch;
    t.seed = seed;
    t.p_uncond = c.p_uncond;
    t.masked_loss_only = c.masked_loss_only;
    t.arch = arch_from(c);
    t.schedule = ScheduleSpec::from_json(c.schedule);
    return t;
}

fs::path registry_dir_for(const StageCtx& ctx) {
    if (!ctx.cfg.registry_dir.empty()) return fs::path(ctx.cfg.registry_dir);
    return ctx.root() / "registry";
}

fs::path adapters_dir_for(const StageCtx& ctx) {
    if (!ctx.cfg.adapters_dir.empty()) return fs::path(ctx.cfg.adapters_dir);
    return ctx.root() / "adapters";
}

float guidance_for(const PipelineConfig& cfg, const ClassEntry& entry) {
    auto it = cfg.guidance_overrides.find(entry.class_id);
    if (it != cfg.guidance_overrides.end()) return it->second;
    return default_guidance_scale(entry.name);
}

json seg_report_json(const SegMetricReport& rep) {
    json per = json::object();
    for (const auto& [cid, s] : rep.per_class) {
        json e = {{"dice", s.dice}, {"iou", s.iou}};
        if (s.hausdorff) e["hausdorff"] = *s.hausdorff;
        per[std::to_string(cid)] = e;
    }
    json excl = json::array();
    for (const auto& e : rep.excluded)
        excl.push_back({{"class_id", e.class_id}, {"metric", e.metric}, {"reason", e.reason}});
    json macro = {{"dice", rep.macro.dice}, {"iou", rep.macro.iou}};
    if (rep.macro.hausdorff) macro["hausdorff"] = *rep.macro.hausdorff;
    return {{"per_class", per}, {"macro", macro}, {"excluded", excl}};
}

// ---- stage bodies --------------------------------------------------------------------

void stage_ingest(StageCtx& ctx) {
    const ToyDataset ds = generate_toy_dataset(ctx.cfg.toy, ctx.seed);
    const fs::path manifest_path = save_dataset(ctx.root() / "data", ds.records, ds.class_map);
    ctx.add_output(manifest_path);
    ctx.add_output(ctx.root() / "data" / "class_map.json");
    for (const auto& rec : ds.records) {
        ctx.add_output(ctx.root() / "data" / "images" / (rec.id + ".png"));
        ctx.add_output(ctx.root() / "data" / "masks" / (rec.id + ".png"));
    }

    ToyConfig sim_cfg = ctx.cfg.toy;
    sim_cfg.n_samples = ctx.cfg.sim_masks;
    sim_cfg.n_train = sim_cfg.n_test = sim_cfg.n_val = -1;
    const auto sims = generate_sim_label_maps(sim_cfg, derive_seed(ctx.seed, "sim_masks"));
    fs::create_directories(ctx.root() / "sim_masks");
    const Palette pal = ds.class_map.palette();
    for (size_t i = 0; i < sims.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "mask_%04zu.png", i);
        const fs::path p = ctx.root() / "sim_masks" / buf;
        write_label_png(p, sims[i], pal);
        ctx.add_output(p);
    }
}

void stage_train_ssi_all(StageCtx& ctx) {
    ctx.require("ingest");
    const LoadedData data = load_data(ctx);
    std::vector<SampleRecord> train;
    for (const auto* r : data.train) train.push_back(*r);

    ModelRegistry registry;
    for (const auto& entry : data.class_map.entries) {
        SsiTrainConfig t = ssi_config_from(
            ctx.cfg, derive_seed(ctx.seed, "train_ssi_all", uint64_t(entry.class_id)));
        registry.register_class_model(train_ssi(entry.class_id, train, data.class_map, t));
    }
    SsiTrainConfig t = ssi_config_from(ctx.cfg, derive_seed(ctx.seed, "train_scene"));
    t.steps = ctx.cfg.scene_steps;
    t.lr = ctx.cfg.scene_lr;
    t.batch = ctx.cfg.scene_batch;
    t.prediction_type = PredictionType::epsilon;
    registry.register_scene_model(train_scene_model(train, data.class_map, t));

    const fs::path dir = ctx.root() / "registry";
    registry.save(dir);
    ctx.add_output(dir / "index.json");
    for (int cid : registry.class_ids())
        ctx.add_output(dir / ("ssi_class_" + std::to_string(cid) + ".ckpt"));
    ctx.add_output(dir / "scene.ckpt");
}

void stage_train_adapter(StageCtx& ctx) {
    if (ctx.cfg.registry_dir.empty()) ctx.require("train_ssi_all");
    const LoadedData data = load_data(ctx);
    ModelRegistry registry = ModelRegistry::load(registry_dir_for(ctx));

    fs::create_directories(adapters_dir_for(ctx));
    for (const auto& entry : data.class_map.entries) {
        std::vector<AdapterTrainExample> examples;
        for (const auto* rec : data.train) {
            BinaryMask bm;
            bm.class_id = entry.class_id;
            bm.mask = LabelMap(rec->label_map.h, rec->label_map.w);
            int area = 0;
            for (size_t i = 0; i < rec->label_map.px.size(); ++i) {
                bm.mask.px[i] = rec->label_map.px[i] == entry.class_id ? 1 : 0;
                area += bm.mask.px[i];
            }
            if (area == 0) continue;
            AdapterTrainExample ex;
            ex.image = rec->image;
            ex.edges = extract_soft_edges(bm, ctx.cfg.edge_sigma);
            ex.mask = std::move(bm);
            ex.prompt = make_prompt(entry.class_id, data.class_map, PromptKind::organ);
            examples.push_back(std::move(ex));
        }
        AdapterTrainConfig acfg;
        acfg.steps = ctx.cfg.adapter_steps;
        acfg.lr = ctx.cfg.adapter_lr;
        acfg.batch = ctx.cfg.adapter_batch;
        acfg.seed = derive_seed(ctx.seed, "train_adapter", uint64_t(entry.class_id));
        acfg.p_uncond = ctx.cfg.p_uncond;
        acfg.conditioning_scale = ctx.cfg.conditioning_scale;

        auto& base = const_cast<DenoiserModel&>(registry.class_model(entry.class_id));
        ControlHandle handle = train_adapter(base, examples, acfg, ctx.cfg.edge_sigma);

        CheckpointHeader base_info;
        base_info.prediction_type = prediction_type_name(base.prediction_type);
        base_info.class_id = entry.class_id;
        base_info.extra = {{"edge_sigma", ctx.cfg.edge_sigma}};
        const fs::path p =
            adapters_dir_for(ctx) / ("adapter_class_" + std::to_string(entry.class_id) + ".ckpt");
        save_adapter(p, *handle.adapter, base_info);
        ctx.add_output(p);
    }
}

void stage_generate_organs(StageCtx& ctx) {
    ctx.require("ingest");
    if (ctx.cfg.registry_dir.empty()) ctx.require("train_ssi_all");
    if (ctx.cfg.use_control && ctx.cfg.adapters_dir.empty()) ctx.require("train_adapter");

    const LoadedData data = load_data(ctx);
    const ModelRegistry registry = ModelRegistry::load(registry_dir_for(ctx));

    std::map<int, ControlHandle> handles;
    if (ctx.cfg.use_control) {
        for (const auto& entry : data.class_map.entries) {
            const fs::path p = adapters_dir_for(ctx) /
                               ("adapter_class_" + std::to_string(entry.class_id) + ".ckpt");
            CheckpointHeader h;
            ControlHandle handle;
            handle.adapter = load_adapter(p, &h);
            handle.edge_sigma = h.extra.value("edge_sigma", ctx.cfg.edge_sigma);
            handles[entry.class_id] = std::move(handle);
        }
    }

    const bool simulated = ctx.cfg.mask_source == "simulated";
    std::vector<fs::path> sim_files;
    if (simulated) {
        for (const auto& e : fs::directory_iterator(ctx.root() / "sim_masks"))
            sim_files.push_back(e.path());
        std::sort(sim_files.begin(), sim_files.end());
        if (sim_files.empty()) throw DependencyError("no simulated masks found; run ingest");
    } else if (data.train.empty()) {
        throw ValidationError("no training records available as mask sources");
    }

    struct SceneWork {
        LabelMap source_labels;
        ImageU8 background;
        std::string source_id;
        std::vector<BinaryMask> masks;
        std::vector<ImageU8> renders;
        std::vector<uint64_t> seeds;
        std::vector<float> guidances;
    };
    std::vector<SceneWork> work(size_t(ctx.cfg.n_scenes));

    // deterministic inputs assembled sequentially
    for (int i = 0; i < ctx.cfg.n_scenes; ++i) {
        SceneWork& sw = work[size_t(i)];
        if (simulated) {
            const fs::path& mf = sim_files[size_t(i) % sim_files.size()];
            sw.source_labels = read_label_png(mf);
            sw.source_id = mf.filename().string();
        } else {
            const SampleRecord& rec = *data.train[size_t(i) % data.train.size()];
            sw.source_labels = rec.label_map;
            sw.background = rec.image;
            sw.source_id = rec.id;
        }
        sw.masks = split_label_map(sw.source_labels, data.class_map);
        for (const auto& bm : sw.masks) {
            sw.seeds.push_back(
                derive_seed(ctx.seed, "generate_organs", uint64_t(i) * 1000 + bm.class_id));
            sw.guidances.push_back(guidance_for(ctx.cfg, data.class_map.entry(bm.class_id)));
        }
        sw.renders.resize(sw.masks.size());
    }
    if (simulated && !registry.scene_model())
        throw LookupError("simulated-mask path requires the scene model");

    // renders are independent; compute in parallel, write in order
#pragma omp parallel for schedule(dynamic) num_threads(2)
    for (int i = 0; i < ctx.cfg.n_scenes; ++i) {
        SceneWork& sw = work[size_t(i)];
        if (simulated) {
            // no photograph behind a simulated mask: render a scene-level background
            const DenoiserModel* scene_model = registry.scene_model();
            SamplerConfig sc;
            sc.n_steps = ctx.cfg.sample_steps;
            sc.scheduler_kind = ctx.cfg.scheduler_kind;
            sc.guidance_scale = 1.f;
            const Denoiser d = make_plain_denoiser(*scene_model);
            Condition cond;
            cond.prompt_id = 1;
            Rng rng(derive_seed(ctx.seed, "background_render", uint64_t(i)));
            const Tensor x_T =
                normal_tensor(3, scene_model->cfg.image_size, scene_model->cfg.image_size, rng);
            sw.background =
                to_u8(ddim_sample(d, x_T, cond, scene_model->schedule_spec.build(), sc));
        }
        for (size_t k = 0; k < sw.masks.size(); ++k) {
            SamplerConfig sc;
            sc.n_steps = ctx.cfg.sample_steps;
            sc.scheduler_kind = ctx.cfg.scheduler_kind;
            sc.guidance_scale = sw.guidances[k];
            const ControlHandle* handle = nullptr;
            if (ctx.cfg.use_control) handle = &handles.at(sw.masks[k].class_id);
            sw.renders[k] = sample_inpaint(registry, sw.masks[k].class_id, sw.background,
                                           sw.masks[k], sc, sw.seeds[k], handle);
        }
    }

    for (int i = 0; i < ctx.cfg.n_scenes; ++i) {
        const SceneWork& sw = work[size_t(i)];
        const fs::path dir = ctx.root() / "organs" / scene_stem(i);
        fs::create_directories(dir);
        json meta = {{"mask_source", ctx.cfg.mask_source},
                     {"source_id", sw.source_id},
                     {"classes", json::array()}};
        write_image_png(dir / "background.png", sw.background);
        ctx.add_output(dir / "background.png");
        for (size_t k = 0; k < sw.masks.size(); ++k) {
            const int cid = sw.masks[k].class_id;
            const std::string rk = "render_" + std::to_string(cid) + ".png";
            const std::string mk = "mask_" + std::to_string(cid) + ".png";
            write_image_png(dir / rk, sw.renders[k]);
            write_label_png(dir / mk, sw.masks[k].mask, {});
            ctx.add_output(dir / rk);
            ctx.add_output(dir / mk);
            meta["classes"].push_back({{"class_id", cid},
                                       {"seed", sw.seeds[k]},
                                       {"guidance_scale", sw.guidances[k]},
                                       {"n_steps", ctx.cfg.sample_steps},
                                       {"checkpoint", "ssi_class_" + std::to_string(cid)},
                                       {"control", ctx.cfg.use_control}});
        }
        std::ofstream mo(dir / "meta.json");
        mo << meta.dump(1) << "\n";
        mo.close();
        ctx.add_output(dir / "meta.json");
    }
}

void stage_compose(StageCtx& ctx) {
    ctx.require("generate_organs");
    const LoadedData data = load_data(ctx);
    const Palette pal = data.class_map.palette();
    fs::create_directories(ctx.root() / "scenes");

    for (int i = 0; i < ctx.cfg.n_scenes; ++i) {
        const fs::path dir = ctx.root() / "organs" / scene_stem(i);
        std::ifstream mi(dir / "meta.json");
        if (!mi) throw IoError("missing organ metadata: " + (dir / "meta.json").string());
        json meta;
        mi >> meta;

        const ImageU8 background = read_image_png(dir / "background.png");
        std::vector<OrganRender> renders;
        for (const auto& cls : meta.at("classes")) {
            OrganRender r;
            r.class_id = cls.at("class_id");
            r.image = read_image_png(dir / ("render_" + std::to_string(r.class_id) + ".png"));
            r.mask.class_id = r.class_id;
            r.mask.mask = read_label_png(dir / ("mask_" + std::to_string(r.class_id) + ".png"));
            r.provenance.checkpoint_id = cls.at("checkpoint");
            r.provenance.seed = cls.at("seed");
            r.provenance.sampler_steps = cls.at("n_steps");
            r.provenance.guidance_scale = cls.at("guidance_scale");
            renders.push_back(std::move(r));
        }
        const BackgroundSource bs = meta.at("mask_source") == "simulated"
                                        ? BackgroundSource::background_render
                                        : BackgroundSource::source_image;
        const CompositeScene scene = compose(renders, background, data.class_map, bs);

        const fs::path img_p = ctx.root() / "scenes" / (scene_stem(i) + ".png");
        const fs::path lab_p = ctx.root() / "scenes" / (scene_stem(i) + "_label.png");
        const fs::path prov_p = ctx.root() / "scenes" / (scene_stem(i) + "_provenance.json");
        write_image_png(img_p, scene.image);
        write_label_png(lab_p, scene.label_map, pal);
        json prov = {{"background_source",
                      bs == BackgroundSource::source_image ? "source_image" : "background_render"},
                     {"source_id", meta.at("source_id")},
                     {"organs", json::array()}};
        for (const auto& [cid, p] : scene.provenance)
            prov["organs"].push_back({{"class_id", cid},
                                      {"checkpoint", p.checkpoint_id},
                                      {"seed", p.seed},
                                      {"n_steps", p.sampler_steps},
                                      {"guidance_scale", p.guidance_scale}});
        std::ofstream po(prov_p);
        po << prov.dump(1) << "\n";
        po.close();
        ctx.add_output(img_p);
        ctx.add_output(lab_p);
        ctx.add_output(prov_p);
    }
}

void stage_refine(StageCtx& ctx) {
    ctx.require("compose");
    if (ctx.cfg.registry_dir.empty()) ctx.require("train_ssi_all");
    const LoadedData data = load_data(ctx);
    const ModelRegistry registry = ModelRegistry::load(registry_dir_for(ctx));
    const DenoiserModel* scene_model = registry.scene_model();
    if (!scene_model) throw LookupError("refine requires the scene-level model in the registry");
    const Palette pal = data.class_map.palette();
    const std::string prompt = make_prompt(0, data.class_map, PromptKind::scene);

    for (int i = 0; i < ctx.cfg.n_scenes; ++i) {
        CompositeScene scene;
        scene.image = read_image_png(ctx.root() / "scenes" / (scene_stem(i) + ".png"));
        scene.label_map = read_label_png(ctx.root() / "scenes" / (scene_stem(i) + "_label.png"));

        RefineConfig rc;
        rc.strength = ctx.cfg.refine_strength;
        rc.n_steps = ctx.cfg.refine_steps;
        rc.guidance_scale = ctx.cfg.refine_guidance;
        rc.seed = derive_seed(ctx.seed, "refine", uint64_t(i));
        const RefineResult res = refine(scene, *scene_model, rc, prompt);

        const fs::path img_p = ctx.root() / "scenes" / (scene_stem(i) + "_refined.png");
        const fs::path lab_p = ctx.root() / "scenes" / (scene_stem(i) + "_refined_label.png");
        const fs::path prov_p = ctx.root() / "scenes" / (scene_stem(i) + "_refined_provenance.json");
        write_image_png(img_p, res.image);
        write_label_png(lab_p, res.label_map, pal);
        const json prov = {{"strength", rc.strength},
                           {"n_steps", rc.n_steps},
                           {"guidance_scale", rc.guidance_scale},
                           {"seed", rc.seed},
                           {"scene_prompt", prompt}};
        std::ofstream po(prov_p);
        po << prov.dump(1) << "\n";
        po.close();
        ctx.add_output(img_p);
        ctx.add_output(lab_p);
        ctx.add_output(prov_p);
    }
}

std::vector<SampleRecord> load_syn_records(const StageCtx& ctx, bool prefer_refined) {
    std::vector<SampleRecord> out;
    for (int i = 0; i < ctx.cfg.n_scenes; ++i) {
        const fs::path base = ctx.root() / "scenes" / scene_stem(i);
        SampleRecord rec;
        const fs::path refined = ctx.root() / "scenes" / (scene_stem(i) + "_refined.png");
        if (prefer_refined && fs::exists(refined)) {
            rec.image = read_image_png(refined);
        } else {
            rec.image = read_image_png(base.string() + ".png");
        }
        rec.label_map = read_label_png(base.string() + "_label.png");
        rec.split = Split::train;
        rec.id = "syn_" + scene_stem(i);
        out.push_back(std::move(rec));
    }
    return out;
}

void stage_evaluate_quality(StageCtx& ctx) {
    ctx.require("compose");
    const LoadedData data = load_data(ctx);
    const bool refined = ctx.manifest.has_stage("refine");
    const std::vector<SampleRecord> syn = load_syn_records(ctx, refined);

    std::vector<ImageU8> real_train, real_test, syn_imgs;
    for (const auto* r : data.train) real_train.push_back(r->image);
    for (const auto* r : data.test) real_test.push_back(r->image);
    for (const auto& r : syn) syn_imgs.push_back(r.image);

    ToyFeatureExtractor fe = ToyFeatureExtractor::train(
        real_train, derive_seed(ctx.seed, "extractor"), ctx.cfg.extractor_steps);
    const fs::path fe_path = ctx.root() / "feature_extractor.ckpt";
    fe.save(fe_path);
    ctx.add_output(fe_path);

    const Features f_real = fe.features(real_test);
    const Features f_syn = fe.features(syn_imgs);

    const double cfid = frechet_distance(f_real, f_syn);
    const int subset = std::min({ctx.cfg.kid_subset, f_real.n, f_syn.n});
    const KidResult k = kid(f_real, f_syn, std::max(2, subset), ctx.cfg.kid_subsets,
                            derive_seed(ctx.seed, "kid"));
    const double bw = median_pairwise_distance(f_real, f_syn);
    const double cmmd = gaussian_mmd(f_real, f_syn, bw);
    double lpips = 0;
    const int n_pairs = std::min(f_real.n, f_syn.n);
    for (int i = 0; i < n_pairs; ++i)
        lpips += fe.perceptual_distance(real_test[size_t(i)], syn_imgs[size_t(i)]);
    if (n_pairs > 0) lpips /= n_pairs;

    json rep = {{"extractor", fe.descriptor()},
                {"extractor_final_loss", fe.final_loss()},
                {"n_real", f_real.n},
                {"n_syn", f_syn.n},
                {"seed", ctx.seed},
                {"refined_inputs", refined},
                {"cfid", cfid},
                {"kid", {{"mean", k.mean}, {"std", k.std}, {"subset_size", k.subset_size},
                         {"n_subsets", k.n_subsets}}},
                {"cmmd", {{"value", cmmd}, {"bandwidth", bw}}},
                {"lpips_slot", lpips}};
    fs::create_directories(ctx.root() / "reports");
    const fs::path jp = ctx.root() / "reports" / "quality.json";
    std::ofstream jo(jp);
    jo << rep.dump(1) << "\n";
    jo.close();
    ctx.add_output(jp);

    const fs::path tp = ctx.root() / "reports" / "quality.txt";
    std::ofstream to(tp);
    to << "image quality report\n"
       << "extractor: " << fe.descriptor() << "\n"
       << "samples: real=" << f_real.n << " syn=" << f_syn.n << "\n"
       << "seed: " << ctx.seed << "\n"
       << "cfid: " << cfid << "\n"
       << "kid: " << k.mean << " +/- " << k.std << " (subset " << k.subset_size << " x "
       << k.n_subsets << ")\n"
       << "cmmd: " << cmmd << " (rbf bandwidth " << bw << ")\n"
       << "lpips_slot: " << lpips << "\n";
    to.close();
    ctx.add_output(tp);
}

bool scheme_uses_syn(SchemeKind k) {
    return k == SchemeKind::syn_only || k == SchemeKind::syn_plus_real ||
           k == SchemeKind::syn_pretrain_finetune_real;
}

void stage_seg_train(StageCtx& ctx) {
    ctx.require("ingest");
    bool needs_syn = false;
    for (SchemeKind k : ctx.cfg.schemes) needs_syn |= scheme_uses_syn(k);
    if (needs_syn) ctx.require("compose");

    const LoadedData data = load_data(ctx);
    const std::vector<SampleRecord> syn =
        needs_syn ? load_syn_records(ctx, ctx.manifest.has_stage("refine"))
                  : std::vector<SampleRecord>{};

    fs::create_directories(ctx.root() / "seg");
    for (size_t si = 0; si < ctx.cfg.schemes.size(); ++si) {
        for (int sd = 0; sd < ctx.cfg.seg_seeds; ++sd) {
            TrainingScheme scheme;
            scheme.kind = ctx.cfg.schemes[si];
            scheme.cfg = ctx.cfg.seg;
            scheme.cfg.seed = derive_seed(ctx.seed, "seg_train", si * 100 + uint64_t(sd));
            SegModel model = train_segmenter(scheme, data.class_map, data.records,
                                             scheme_uses_syn(scheme.kind) ? syn
                                                                          : std::vector<SampleRecord>{});
            const fs::path p = ctx.root() / "seg" /
                               (scheme_name(scheme.kind) + "_seed" + std::to_string(sd) + ".ckpt");
            model.save(p);
            ctx.add_output(p);
        }
    }
}

void stage_seg_eval(StageCtx& ctx) {
    ctx.require("seg_train");
    const LoadedData data = load_data(ctx);
    std::vector<SampleRecord> test;
    for (const auto* r : data.test) test.push_back(*r);

    fs::create_directories(ctx.root() / "reports");
    json table = json::object();
    std::string csv = "scheme,seed,dice,iou,hausdorff\n";
    for (SchemeKind kind : ctx.cfg.schemes) {
        std::vector<double> dices, ious, hds;
        for (int sd = 0; sd < ctx.cfg.seg_seeds; ++sd) {
            const std::string stem = scheme_name(kind) + "_seed" + std::to_string(sd);
            SegModel model = SegModel::load(ctx.root() / "seg" / (stem + ".ckpt"));
            const SegMetricReport rep = evaluate_segmenter(model, test, data.class_map);
            const fs::path jp = ctx.root() / "reports" / ("seg_" + stem + ".json");
            std::ofstream jo(jp);
            jo << seg_report_json(rep).dump(1) << "\n";
            jo.close();
            ctx.add_output(jp);
            dices.push_back(rep.macro.dice);
            ious.push_back(rep.macro.iou);
            if (rep.macro.hausdorff) hds.push_back(*rep.macro.hausdorff);
            csv += scheme_name(kind) + "," + std::to_string(sd) + "," +
                   std::to_string(rep.macro.dice) + "," + std::to_string(rep.macro.iou) + "," +
                   (rep.macro.hausdorff ? std::to_string(*rep.macro.hausdorff) : "") + "\n";
        }
        auto mean_std = [](const std::vector<double>& v) {
            double m = 0;
            for (double x : v) m += x;
            m /= v.empty() ? 1 : double(v.size());
            double s = 0;
            for (double x : v) s += (x - m) * (x - m);
            s = v.size() > 1 ? std::sqrt(s / double(v.size() - 1)) : 0;
            return std::pair<double, double>(m, s);
        };
        const auto [dm, dsd] = mean_std(dices);
        const auto [im, isd] = mean_std(ious);
        const auto [hm, hsd] = mean_std(hds);
        table[scheme_name(kind)] = {{"dice", {{"mean", dm}, {"std", dsd}}},
                                    {"iou", {{"mean", im}, {"std", isd}}},
                                    {"hausdorff", {{"mean", hm}, {"std", hsd}}}};
    }

    const fs::path csv_p = ctx.root() / "reports" / "seg_table.csv";
    std::ofstream co(csv_p);
    co << csv;
    co.close();
    ctx.add_output(csv_p);

    const fs::path txt_p = ctx.root() / "reports" / "seg_table.txt";
    std::ofstream to(txt_p);
    to << "training scheme            dice            iou             hausdorff\n";
    for (SchemeKind kind : ctx.cfg.schemes) {
        const auto& row = table[scheme_name(kind)];
        char line[256];
        std::snprintf(line, sizeof(line), "%-26s %.3f+/-%.3f  %.3f+/-%.3f  %.2f+/-%.2f\n",
                      scheme_name(kind).c_str(), row["dice"]["mean"].get<double>(),
                      row["dice"]["std"].get<double>(), row["iou"]["mean"].get<double>(),
                      row["iou"]["std"].get<double>(), row["hausdorff"]["mean"].get<double>(),
                      row["hausdorff"]["std"].get<double>());
        to << line;
    }
    to.close();
    ctx.add_output(txt_p);

    const fs::path js_p = ctx.root() / "reports" / "seg_table.json";
    std::ofstream jo(js_p);
    jo << table.dump(1) << "\n";
    jo.close();
    ctx.add_output(js_p);
}

void stage_report(StageCtx& ctx) {
    ctx.require("compose");
    const LoadedData data = load_data(ctx);
    const bool refined = ctx.manifest.has_stage("refine");

    // scan the artifacts on disk so the report works without a config
    int n_found = 0;
    while (fs::exists(ctx.root() / "scenes" / (scene_stem(n_found) + ".png"))) ++n_found;
    if (n_found == 0) throw DependencyError("no composed scenes found; run compose");

    const int n = std::min(6, n_found);
    std::vector<CompositeScene> scenes;
    std::vector<ImageU8> refined_imgs, real_refs;
    bool have_real = true;
    for (int i = 0; i < n; ++i) {
        CompositeScene s;
        s.image = read_image_png(ctx.root() / "scenes" / (scene_stem(i) + ".png"));
        s.label_map = read_label_png(ctx.root() / "scenes" / (scene_stem(i) + "_label.png"));
        scenes.push_back(std::move(s));
        if (refined)
            refined_imgs.push_back(
                read_image_png(ctx.root() / "scenes" / (scene_stem(i) + "_refined.png")));
        std::ifstream mi(ctx.root() / "organs" / scene_stem(i) / "meta.json");
        json meta;
        mi >> meta;
        if (meta.at("mask_source") == "real") {
            const std::string sid = meta.at("source_id");
            real_refs.push_back(read_image_png(ctx.root() / "data" / "images" / (sid + ".png")));
        } else {
            have_real = false;
        }
    }

    fs::create_directories(ctx.root() / "reports");
    const fs::path grid_p = ctx.root() / "reports" / "figure_grid.png";
    emit_figure_grid(scenes, refined ? &refined_imgs : nullptr,
                     have_real ? &real_refs : nullptr, data.class_map, grid_p);
    ctx.add_output(grid_p);

    const fs::path sum_p = ctx.root() / "reports" / "summary.txt";
    std::ofstream so(sum_p);
    so << "experiment summary\n";
    for (const auto& r : ctx.manifest.doc().at("records"))
        so << "  " << r.at("stage").get<std::string>() << ": " << r.at("wall_ms").get<long>()
           << " ms, " << r.at("outputs").size() << " artifacts\n";
    so.close();
    ctx.add_output(sum_p, /*is_volatile=*/true);
}

}  // namespace

// ---- figure grid -------------------------------------------------------------------

void emit_figure_grid(const std::vector<CompositeScene>& scenes,
                      const std::vector<ImageU8>* refined, const std::vector<ImageU8>* real_refs,
                      const ClassMap& class_map, const std::filesystem::path& out_path) {
    if (scenes.empty()) throw ValidationError("figure grid requires at least one scene");
    const int h = scenes.front().image.h, w = scenes.front().image.w;
    for (const auto& s : scenes)
        if (s.image.h != h || s.image.w != w)
            throw ValidationError("figure grid requires uniform scene resolutions");
    if (refined && refined->size() != scenes.size())
        throw ValidationError("refined column size mismatch");
    if (real_refs && real_refs->size() != scenes.size())
        throw ValidationError("real reference column size mismatch");

    std::vector<std::vector<const ImageU8*>> rows;
    std::vector<ImageU8> colorized;
    colorized.reserve(scenes.size());
    for (const auto& s : scenes) colorized.push_back(class_map.colorize(s.label_map));

    for (size_t i = 0; i < scenes.size(); ++i) {
        std::vector<const ImageU8*> row;
        if (real_refs) row.push_back(&(*real_refs)[i]);
        row.push_back(&colorized[i]);
        row.push_back(&scenes[i].image);
        if (refined) row.push_back(&(*refined)[i]);
        rows.push_back(std::move(row));
    }
    for (const auto& row : rows)
        for (const ImageU8* img : row)
            if (img->h != h || img->w != w)
                throw ValidationError("figure grid requires uniform tile resolutions");

    const int cols = int(rows.front().size());
    ImageU8 grid(int(rows.size()) * h, cols * w);
    for (size_t r = 0; r < rows.size(); ++r)
        for (int c = 0; c < cols; ++c) {
            const ImageU8& tile = *rows[r][size_t(c)];
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        grid.at(int(r) * h + y, c * w + x, ch) = tile.at(y, x, ch);
        }
    write_image_png(out_path, grid);
}

// ---- runner ---------------------------------------------------------------------------

StageRecord run_report(uint64_t seed, const std::string& experiment_id,
                       const std::optional<fs::path>& root_override) {
    const fs::path root = root_override.value_or(artifact_root());
    StageCtx ctx{PipelineConfig{}, {}, seed, ExperimentManifest::open(root, experiment_id), {}};
    const auto t0 = std::chrono::steady_clock::now();
    stage_report(ctx);
    const auto t1 = std::chrono::steady_clock::now();
    StageRecord rec;
    rec.stage = stage_name(Stage::report);
    rec.seed = seed;
    rec.outputs = ctx.outputs;
    rec.wall_ms = long(std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count());
    ctx.manifest.append(rec);
    return rec;
}

StageRecord run_stage(Stage stage, const fs::path& config_path, uint64_t seed,
                      const std::string& experiment_id,
                      const std::optional<fs::path>& root_override) {
    const fs::path root = root_override.value_or(artifact_root());
    StageCtx ctx{load_pipeline_config(config_path), config_path, seed,
                 ExperimentManifest::open(root, experiment_id), {}};

    const auto t0 = std::chrono::steady_clock::now();
    switch (stage) {
        case Stage::ingest: stage_ingest(ctx); break;
        case Stage::train_ssi_all: stage_train_ssi_all(ctx); break;
        case Stage::train_adapter: stage_train_adapter(ctx); break;
        case Stage::generate_organs: stage_generate_organs(ctx); break;
        case Stage::compose: stage_compose(ctx); break;
        case Stage::refine: stage_refine(ctx); break;
        case Stage::evaluate_quality: stage_evaluate_quality(ctx); break;
        case Stage::seg_train: stage_seg_train(ctx); break;
        case Stage::seg_eval: stage_seg_eval(ctx); break;
        case Stage::report: stage_report(ctx); break;
    }
    const auto t1 = std::chrono::steady_clock::now();

    StageRecord rec;
    rec.stage = stage_name(stage);
    rec.seed = seed;
    rec.config_hash = hash_hex(fnv1a64_file(config_path));
    rec.inputs = {config_path.string()};
    rec.outputs = ctx.outputs;
    rec.wall_ms = long(std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count());
    ctx.manifest.append(rec);
    return rec;
}

std::vector<StageRecord> run_all(const fs::path& config_path, uint64_t seed,
                                 const std::string& experiment_id,
                                 const std::optional<fs::path>& root_override) {
    const PipelineConfig cfg = load_pipeline_config(config_path);
    std::vector<Stage> stages = {Stage::ingest, Stage::train_ssi_all};
    if (cfg.use_control) stages.push_back(Stage::train_adapter);
    stages.insert(stages.end(), {Stage::generate_organs, Stage::compose});
    if (cfg.refine_enabled) stages.push_back(Stage::refine);
    stages.insert(stages.end(),
                  {Stage::evaluate_quality, Stage::seg_train, Stage::seg_eval, Stage::report});

    std::vector<StageRecord> records;
    for (Stage s : stages)
        records.push_back(run_stage(s, config_path, seed, experiment_id, root_override));
    return records;
}

}  // namespace synth
