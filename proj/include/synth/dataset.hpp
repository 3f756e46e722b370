#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "synth/class_map.hpp"
#include "synth/image.hpp"

namespace synth {

enum class Split { train, test, val };

std::string split_name(Split s);
Split parse_split(const std::string& s);

// One (image, multi-class label map) pair.
struct SampleRecord {
    ImageU8 image;
    LabelMap label_map;
    Split split = Split::train;
    std::string id;
};

struct BinaryMask {
    int class_id = 0;
    LabelMap mask;  // values exactly 0 or 1

    int area() const;
};

// Soft-edge conditioning image derived from a mask boundary.
struct EdgeImage {
    int class_id = 0;
    int h = 0, w = 0;
    std::vector<float> edges;  // values in [0, 1]

    float at(int y, int x) const { return edges[size_t(y) * w + x]; }
};

// Manifest: line-delimited json records {image, mask, split, id}, paths
// relative to the manifest file.
std::vector<SampleRecord> load_dataset(const std::filesystem::path& manifest_path,
                                       const ClassMap& class_map);

std::filesystem::path save_dataset(const std::filesystem::path& dir,
                                   const std::vector<SampleRecord>& records,
                                   const ClassMap& class_map);

// One BinaryMask per class id present in the label map, pairwise disjoint.
std::vector<BinaryMask> split_label_map(const LabelMap& label_map, const ClassMap& class_map);

// Inverse of split_label_map for disjoint masks.
LabelMap reconstruct_label_map(const std::vector<BinaryMask>& masks, int h, int w);

// Morphological gradient (3x3 cross, frame border counts as outside) blurred
// with a truncated Gaussian of std blur_sigma, peak renormalized to 1.
EdgeImage extract_soft_edges(const BinaryMask& mask, float blur_sigma);

enum class PromptKind { organ, scene };

std::string make_prompt(int class_id, const ClassMap& class_map, PromptKind kind);

struct ToyTextureParams {
    float noise_amp = 14.f;      // per-pixel uniform color noise
    float wave_amp = 10.f;       // low-frequency modulation
    float blob_min_frac = 0.14f; // blob semi-axis as fraction of image size
    float blob_max_frac = 0.26f;
    float class_presence = 0.85f;
};

struct ToyConfig {
    int n_samples = 100;
    int image_size = 32;
    int n_classes = 3;
    ToyTextureParams texture;
    // optional absolute split counts; must sum to n_samples when all set,
    // otherwise samples split 70/15/15 by index
    int n_train = -1, n_test = -1, n_val = -1;
};

struct ToyDataset {
    std::vector<SampleRecord> records;
    ClassMap class_map;
};

// Procedural stand-in for a real surgical dataset: per sample, one
// non-overlapping textured blob per present class over a textured background.
// Pure function of (config, seed); class mean colors are separated by design.
ToyDataset generate_toy_dataset(const ToyConfig& config, uint64_t seed);

// Label-map-only generation for the simulated-mask path (different blob
// statistics, no photographs behind them).
std::vector<LabelMap> generate_sim_label_maps(const ToyConfig& config, uint64_t seed);

// reference mean color of a toy class texture (used by tests and oracles)
std::array<float, 3> toy_class_base_color(int class_id);
std::array<float, 3> toy_background_color();

}  // namespace synth
