#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "synth/diffusion.hpp"
#include "synth/unet.hpp"

namespace synth {

// Container layout: magic, u32 header length, header json, then named float
// tensors. The header is readable without touching the payload.
struct CheckpointHeader {
    int format_version = 1;
    std::string kind;             // denoiser | control_adapter | segmenter | feature_extractor
    std::string arch_descriptor;
    std::string prediction_type = "epsilon";
    int class_id = -1;            // -1 = scene-level model
    nlohmann::json extra;         // schedule, train config, seed, prompt vocab, ...

    nlohmann::json to_json() const;
    static CheckpointHeader from_json(const nlohmann::json& j);
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const ParamRefs& params);
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);
CheckpointHeader load_checkpoint(const std::filesystem::path& path, const ParamRefs& params);

struct TrainMeta {
    int steps = 0;
    float lr = 0.f;
    int batch = 0;
};

struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::linear;
    int T = 1000;
    float beta_start = 1e-4f;
    float beta_end = 0.02f;

    NoiseSchedule build() const { return build_schedule(kind, T, beta_start, beta_end); }
    nlohmann::json to_json() const;
    static ScheduleSpec from_json(const nlohmann::json& j);
};

// A trained denoiser plus everything needed to run it.
struct DenoiserModel {
    UNetConfig cfg;
    UNet net;
    PredictionType prediction_type = PredictionType::epsilon;
    int class_id = -1;
    std::vector<std::string> prompt_vocab;  // vocab[i] maps to prompt row i+1
    ScheduleSpec schedule_spec;
    TrainMeta train_meta;
    uint64_t seed = 0;

    int prompt_id(const std::string& prompt) const;  // throws LookupError
    int register_prompt(const std::string& prompt);
};

void save_denoiser(const std::filesystem::path& path, DenoiserModel& model);
std::shared_ptr<DenoiserModel> load_denoiser(const std::filesystem::path& path);

// plain denoiser over the raw input channels (scene model / free generation)
Denoiser make_plain_denoiser(const DenoiserModel& model, const ControlAdapter* adapter = nullptr);

void save_adapter(const std::filesystem::path& path, ControlAdapter& adapter,
                  const CheckpointHeader& base_info);
std::shared_ptr<ControlAdapter> load_adapter(const std::filesystem::path& path,
                                             CheckpointHeader* header_out = nullptr);

}  // namespace synth
