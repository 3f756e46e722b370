#pragma once

#include <functional>
#include <map>
#include <optional>

#include "synth/class_map.hpp"
#include "synth/dataset.hpp"
#include "synth/nn.hpp"

namespace synth {

// row-major n x d feature matrix
struct Features {
    int n = 0, d = 0;
    std::vector<float> data;

    Features() = default;
    Features(int n_, int d_) : n(n_), d(d_), data(size_t(n_) * d_, 0.f) {}
    float at(int i, int j) const { return data[size_t(i) * d + j]; }
    float& at(int i, int j) { return data[size_t(i) * d + j]; }
};

// Gaussian Frechet distance between feature sets:
// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), symmetrized square root.
double frechet_distance(const Features& a, const Features& b);

struct KidResult {
    double mean = 0, std = 0;
    int subset_size = 0, n_subsets = 0;
};

// Unbiased MMD^2 with kernel (x.y/d + 1)^3 averaged over seeded subsets.
KidResult kid(const Features& a, const Features& b, int subset_size, int n_subsets,
              uint64_t seed);

// Biased MMD^2 with RBF kernel exp(-|x-y|^2 / (2 sigma^2)).
double gaussian_mmd(const Features& a, const Features& b, double bandwidth);
double median_pairwise_distance(const Features& a, const Features& b);

struct ClassSegScore {
    double dice = 0, iou = 0;
    std::optional<double> hausdorff;
};

struct SegExclusion {
    int class_id = 0;
    std::string metric;  // "all" or "hausdorff"
    std::string reason;  // "absent" or "one-sided-empty"
};

struct SegMetricReport {
    std::map<int, ClassSegScore> per_class;
    ClassSegScore macro;  // unweighted mean over included classes
    std::vector<SegExclusion> excluded;
};

// Dice/IoU plus symmetric boundary Hausdorff (Euclidean, pixel units),
// background excluded throughout.
SegMetricReport seg_metrics(const LabelMap& pred, const LabelMap& gt, const ClassMap& class_map);

// boundary pixels of a binary region; the frame border counts as outside
std::vector<std::pair<int, int>> boundary_pixels(const LabelMap& map, int class_id);

// Small convolutional autoencoder; the encoder is the feature extractor
// standing in for a pretrained metric backbone.
class ToyFeatureExtractor {
public:
    static constexpr int kDim = 64;

    static ToyFeatureExtractor train(const std::vector<ImageU8>& images, uint64_t seed,
                                     int steps = 400, float lr = 2e-3f, int batch = 16);

    std::vector<float> features(const ImageU8& img) const;
    Features features(const std::vector<ImageU8>& imgs) const;

    // normalized intermediate activations, used by the perceptual-distance slot
    double perceptual_distance(const ImageU8& a, const ImageU8& b) const;

    int dim() const { return kDim; }
    const std::string& descriptor() const { return descriptor_; }
    double init_loss() const { return init_loss_; }
    double final_loss() const { return final_loss_; }

    void save(const std::filesystem::path& path);
    static ToyFeatureExtractor load(const std::filesystem::path& path);

private:
    void init_net(int image_size, uint64_t seed);
    ParamRefs params();

    Tensor encode_mid(const Tensor& x, Tensor* mid1 = nullptr, Tensor* mid2 = nullptr) const;
    std::vector<float> encode(const Tensor& x) const;

    int image_size_ = 32;
    Conv2d enc1_, enc2_;
    Linear enc_fc_;
    Linear dec_fc_;
    Conv2d dec1_, dec2_;
    std::string descriptor_;
    double init_loss_ = 0, final_loss_ = 0;
    uint64_t seed_ = 0;
};

// pluggable perceptual-distance slot (LPIPS role)
using PerceptualDistanceFn = std::function<double(const ImageU8&, const ImageU8&)>;

}  // namespace synth
