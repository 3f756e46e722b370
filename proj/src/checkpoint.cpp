#include "synth/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "synth/errors.hpp"

namespace synth {

static const char kMagic[8] = {'S', 'Y', 'N', 'C', 'K', 'P', 'T', '1'};

nlohmann::json CheckpointHeader::to_json() const {
    return {{"format_version", format_version},
            {"kind", kind},
            {"arch_descriptor", arch_descriptor},
            {"prediction_type", prediction_type},
            {"class_id", class_id},
            {"extra", extra}};
}

CheckpointHeader CheckpointHeader::from_json(const nlohmann::json& j) {
    CheckpointHeader h;
    h.format_version = j.at("format_version");
    h.kind = j.at("kind");
    h.arch_descriptor = j.at("arch_descriptor");
    h.prediction_type = j.at("prediction_type");
    h.class_id = j.at("class_id");
    h.extra = j.value("extra", nlohmann::json::object());
    return h;
}

nlohmann::json ScheduleSpec::to_json() const {
    return {{"kind", kind == ScheduleKind::linear ? "linear" : "cosine"},
            {"T", T},
            {"beta_start", beta_start},
            {"beta_end", beta_end}};
}

ScheduleSpec ScheduleSpec::from_json(const nlohmann::json& j) {
    ScheduleSpec s;
    s.kind = j.at("kind") == "linear" ? ScheduleKind::linear : ScheduleKind::cosine;
    s.T = j.at("T");
    s.beta_start = j.at("beta_start");
    s.beta_end = j.at("beta_end");
    return s;
}

template <typename T>
static void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
static void read_pod(std::ifstream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const ParamRefs& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out.write(kMagic, sizeof(kMagic));
    const std::string hj = header.to_json().dump();
    write_pod(out, uint32_t(hj.size()));
    out.write(hj.data(), std::streamsize(hj.size()));
    write_pod(out, uint32_t(params.size()));
    for (const Param* p : params) {
        write_pod(out, uint32_t(p->name.size()));
        out.write(p->name.data(), std::streamsize(p->name.size()));
        write_pod(out, uint64_t(p->w.size()));
        out.write(reinterpret_cast<const char*>(p->w.data()),
                  std::streamsize(p->w.size() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint write failed: " + path.string());
}

static CheckpointHeader read_header_impl(std::ifstream& in, const std::filesystem::path& path) {
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw IoError("not a checkpoint file: " + path.string());
    uint32_t len = 0;
    read_pod(in, len);
    std::string hj(len, '\0');
    in.read(hj.data(), std::streamsize(len));
    if (!in) throw IoError("truncated checkpoint header: " + path.string());
    try {
        return CheckpointHeader::from_json(nlohmann::json::parse(hj));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    return read_header_impl(in, path);
}

CheckpointHeader load_checkpoint(const std::filesystem::path& path, const ParamRefs& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    CheckpointHeader h = read_header_impl(in, path);
    uint32_t n = 0;
    read_pod(in, n);
    if (n != params.size())
        throw ValidationError("checkpoint tensor count mismatch in " + path.string());
    for (Param* p : params) {
        uint32_t nl = 0;
        read_pod(in, nl);
        std::string name(nl, '\0');
        in.read(name.data(), std::streamsize(nl));
        uint64_t count = 0;
        read_pod(in, count);
        if (name != p->name || count != p->w.size())
            throw ValidationError("checkpoint tensor mismatch: expected " + p->name + " got " +
                                  name + " in " + path.string());
        in.read(reinterpret_cast<char*>(p->w.data()),
                std::streamsize(p->w.size() * sizeof(float)));
    }
    if (!in) throw IoError("truncated checkpoint payload: " + path.string());
    return h;
}

int DenoiserModel::prompt_id(const std::string& prompt) const {
    for (size_t i = 0; i < prompt_vocab.size(); ++i)
        if (prompt_vocab[i] == prompt) return int(i) + 1;
    throw LookupError("prompt not in model vocabulary: " + prompt);
}

int DenoiserModel::register_prompt(const std::string& prompt) {
    for (size_t i = 0; i < prompt_vocab.size(); ++i)
        if (prompt_vocab[i] == prompt) return int(i) + 1;
    if (int(prompt_vocab.size()) + 1 >= cfg.n_prompts)
        throw ValidationError("prompt vocabulary full");
    prompt_vocab.push_back(prompt);
    return int(prompt_vocab.size());
}

static CheckpointHeader denoiser_header(const DenoiserModel& m) {
    CheckpointHeader h;
    h.kind = "denoiser";
    h.arch_descriptor = m.cfg.descriptor();
    h.prediction_type = prediction_type_name(m.prediction_type);
    h.class_id = m.class_id;
    h.extra = {{"schedule", m.schedule_spec.to_json()},
               {"prompt_vocab", m.prompt_vocab},
               {"train", {{"steps", m.train_meta.steps},
                          {"lr", m.train_meta.lr},
                          {"batch", m.train_meta.batch}}},
               {"seed", m.seed}};
    return h;
}

void save_denoiser(const std::filesystem::path& path, DenoiserModel& model) {
    save_checkpoint(path, denoiser_header(model), model.net.params());
}

std::shared_ptr<DenoiserModel> load_denoiser(const std::filesystem::path& path) {
    auto model = std::make_shared<DenoiserModel>();
    const CheckpointHeader probe = read_checkpoint_header(path);
    if (probe.kind != "denoiser")
        throw ValidationError("checkpoint is not a denoiser: " + path.string());
    model->cfg = parse_descriptor(probe.arch_descriptor);
    model->net.init(model->cfg, 0);
    const CheckpointHeader h = load_checkpoint(path, model->net.params());
    model->prediction_type = parse_prediction_type(h.prediction_type);
    model->class_id = h.class_id;
    model->schedule_spec = ScheduleSpec::from_json(h.extra.at("schedule"));
    model->prompt_vocab = h.extra.at("prompt_vocab").get<std::vector<std::string>>();
    model->train_meta.steps = h.extra.at("train").value("steps", 0);
    model->train_meta.lr = h.extra.at("train").value("lr", 0.f);
    model->train_meta.batch = h.extra.at("train").value("batch", 0);
    model->seed = h.extra.value("seed", uint64_t(0));
    return model;
}

Denoiser make_plain_denoiser(const DenoiserModel& model, const ControlAdapter* adapter) {
    Denoiser d;
    d.prediction_type = model.prediction_type;
    const DenoiserModel* m = &model;
    d.fn = [m, adapter](const Tensor& x_t, int t, const Condition& cond) {
        Tensor input = cond.extra_channels ? concat_channels(x_t, *cond.extra_channels) : x_t;
        UNetTrace tr;
        const ControlAdapter* a = cond.control ? adapter : nullptr;
        return m->net.forward(input, t, cond.prompt_id, tr, a, cond.control);
    };
    return d;
}

void save_adapter(const std::filesystem::path& path, ControlAdapter& adapter,
                  const CheckpointHeader& base_info) {
    CheckpointHeader h;
    h.kind = "control_adapter";
    h.arch_descriptor = adapter.base_descriptor;
    h.prediction_type = base_info.prediction_type;
    h.class_id = base_info.class_id;
    h.extra = base_info.extra;
    h.extra["conditioning_scale"] = adapter.scale;
    save_checkpoint(path, h, adapter.params());
}

std::shared_ptr<ControlAdapter> load_adapter(const std::filesystem::path& path,
                                             CheckpointHeader* header_out) {
    const CheckpointHeader probe = read_checkpoint_header(path);
    if (probe.kind != "control_adapter")
        throw ValidationError("checkpoint is not a control adapter: " + path.string());
    const UNetConfig cfg = parse_descriptor(probe.arch_descriptor);
    UNet scaffold;
    scaffold.init(cfg, 0);
    auto adapter = std::make_shared<ControlAdapter>(scaffold.make_adapter(0.5f));
    const CheckpointHeader h = load_checkpoint(path, adapter->params());
    adapter->base_descriptor = h.arch_descriptor;
    adapter->scale = h.extra.value("conditioning_scale", 0.5f);
    if (header_out) *header_out = h;
    return adapter;
}

}  // namespace synth
