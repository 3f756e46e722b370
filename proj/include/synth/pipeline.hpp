#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "synth/compose.hpp"
#include "synth/dataset.hpp"
#include "synth/diffusion.hpp"
#include "synth/segmenter.hpp"

namespace synth {

enum class Stage {
    ingest,
    train_ssi_all,
    train_adapter,
    generate_organs,
    compose,
    refine,
    evaluate_quality,
    seg_train,
    seg_eval,
    report
};

std::string stage_name(Stage s);
Stage parse_stage(const std::string& s);

struct PipelineConfig {
    // dataset
    ToyConfig toy;
    int sim_masks = 16;
    // diffusion machinery
    nlohmann::json schedule;  // ScheduleSpec json
    int width0 = 16, width1 = 32, width2 = 32, emb_dim = 64, groups = 8;
    // stage-1 training
    int ssi_steps = 1500;
    float ssi_lr = 1e-5f;
    int ssi_batch = 8;
    float p_uncond = 0.1f;
    bool masked_loss_only = false;
    int scene_steps = 800;
    float scene_lr = 1e-3f;
    int scene_batch = 8;
    // stage-2 control
    int adapter_steps = 800;
    float adapter_lr = 1e-3f;
    int adapter_batch = 8;
    float conditioning_scale = 0.5f;
    float edge_sigma = 1.f;
    // sampling
    int sample_steps = 30;
    SchedulerKind scheduler_kind = SchedulerKind::ddim;
    std::map<int, float> guidance_overrides;
    // generation
    int n_scenes = 20;
    std::string mask_source = "real";  // real | simulated
    bool use_control = true;
    std::string registry_dir;  // pre-trained registry for the stage-1 skip rule
    std::string adapters_dir;
    // stage-4
    bool refine_enabled = true;
    float refine_strength = 0.3f;
    int refine_steps = 10;
    float refine_guidance = 1.f;
    // downstream segmentation
    SegTrainConfig seg;
    std::vector<SchemeKind> schemes;
    int seg_seeds = 1;
    // quality metrics
    int extractor_steps = 400;
    int kid_subset = 50;
    int kid_subsets = 10;
};

PipelineConfig load_pipeline_config(const std::filesystem::path& path);

uint64_t fnv1a64_file(const std::filesystem::path& path);
std::string hash_hex(uint64_t h);

struct ArtifactRef {
    std::string path;  // relative to the experiment root
    std::string hash;
    // wall-clock-bearing artifacts (timing reports) cannot reproduce across
    // runs and are excluded from reproducibility comparisons
    bool is_volatile = false;
};

struct StageRecord {
    std::string stage;
    uint64_t seed = 0;
    std::string config_hash;
    std::vector<std::string> inputs;
    std::vector<ArtifactRef> outputs;
    long wall_ms = 0;
};

// Append-only journal of stage executions; re-runs append new records.
class ExperimentManifest {
public:
    static ExperimentManifest open(const std::filesystem::path& root,
                                   const std::string& experiment_id);
    bool has_stage(const std::string& stage) const;
    std::vector<ArtifactRef> stage_outputs(const std::string& stage) const;  // latest record
    void append(const StageRecord& record);
    const nlohmann::json& doc() const { return doc_; }
    const std::filesystem::path& root() const { return root_; }

private:
    std::filesystem::path root_, file_;
    nlohmann::json doc_;
};

std::filesystem::path artifact_root();  // SYNTH_ARTIFACT_ROOT or ./artifacts

// config-free report over whatever artifacts exist on disk
StageRecord run_report(uint64_t seed, const std::string& experiment_id,
                       const std::optional<std::filesystem::path>& root_override = {});

// Executes one stage, appends its record, returns it.
StageRecord run_stage(Stage stage, const std::filesystem::path& config_path, uint64_t seed,
                      const std::string& experiment_id,
                      const std::optional<std::filesystem::path>& root_override = {});

std::vector<StageRecord> run_all(const std::filesystem::path& config_path, uint64_t seed,
                                 const std::string& experiment_id,
                                 const std::optional<std::filesystem::path>& root_override = {});

// Tiled qualitative panel: [real | colorized mask | composite | refined].
void emit_figure_grid(const std::vector<CompositeScene>& scenes,
                      const std::vector<ImageU8>* refined, const std::vector<ImageU8>* real_refs,
                      const ClassMap& class_map, const std::filesystem::path& out_path);

}  // namespace synth
