#pragma once

#include <string>
#include <vector>

#include "synth/nn.hpp"

namespace synth {

struct UNetConfig {
    int in_channels = 3;
    int out_channels = 3;
    int image_size = 32;
    int width0 = 16, width1 = 32, width2 = 32;
    int emb_dim = 64;
    int n_prompts = 4;  // embedding rows; row 0 is the null (unconditional) row
    int groups = 8;

    std::string descriptor() const;  // canonical string, used for compat checks
    bool operator==(const UNetConfig&) const = default;
};

UNetConfig parse_descriptor(const std::string& desc);

// GroupNorm -> SiLU -> conv3 -> +emb -> GroupNorm -> SiLU -> conv3, residual.
struct ResBlock {
    int c_in = 0, c_out = 0;
    GroupNorm gn1, gn2;
    Conv2d conv1, conv2, skip;
    Linear emb_proj;
    bool has_skip = false;

    struct Trace {
        Tensor x, a1, h1, a2;
        GroupNorm::Stats s1, s2;
    };

    void init(const std::string& name, int c_in_, int c_out_, int emb_dim, int groups, Rng& rng);
    Tensor forward(const Tensor& x, const std::vector<float>& emb, Trace& tr) const;
    Tensor backward(const Trace& tr, const std::vector<float>& emb, const Tensor& dy,
                    std::vector<float>& demb);
    void collect(ParamRefs& out);
    void copy_params_from(const ResBlock& other);
};

// Edge conditioning image pooled to every adapter site input resolution.
struct EdgePyramid {
    Tensor levels[3];
};

EdgePyramid make_edge_pyramid(const Tensor& edge_1ch, int image_size);

// Trainable copy of one encoder block linked through 1x1 zero convolutions.
struct AdapterSite {
    ResBlock block;  // theta_c
    Conv2d zin;      // edge channel -> block input channels, zero-initialized
    Conv2d zout;     // block output channels -> same, zero-initialized
};

struct ControlAdapter {
    std::string base_descriptor;
    float scale = 0.5f;
    AdapterSite sites[3];

    ParamRefs params();
    void collect(ParamRefs& out);
};

struct UNetTrace {
    std::vector<float> emb_pre, emb_h1, emb;
    int prompt_id = 0;
    Tensor x_in, stem_out;
    ResBlock::Trace enc0, enc1, enc2, dec1, dec0;
    Tensor e0, e1, e2, p0, p1;
    Tensor up1_in, up1_out, cat1, d1;
    Tensor up0_in, up0_out, cat0, d0;
    GroupNorm::Stats out_stats;
    Tensor out_gn_in, out_gn;
    bool with_adapter = false;
    ResBlock::Trace ad[3];
    Tensor ad_in[3], ad_out[3], edge[3];
};

class UNet {
public:
    void init(const UNetConfig& cfg, uint64_t seed);

    // Adapter sites wrap the encoder blocks:
    //   y = B(x) + scale * Zout(B_c(x + Zin(edge)))
    Tensor forward(const Tensor& x, int t, int prompt_id, UNetTrace& tr,
                   const ControlAdapter* adapter = nullptr,
                   const EdgePyramid* edges = nullptr) const;

    // Accumulates gradients for all touched parameters (base and adapter);
    // the optimizer decides which group actually steps.
    Tensor backward(const UNetTrace& tr, const Tensor& dy,
                    ControlAdapter* adapter = nullptr);

    ParamRefs params();
    const UNetConfig& config() const { return cfg_; }

    // fresh adapter whose blocks start as copies of this net's encoder blocks
    ControlAdapter make_adapter(float scale) const;

    const ResBlock& encoder_block(int i) const;

private:
    UNetConfig cfg_;
    Conv2d stem_;
    ResBlock enc0_, enc1_, enc2_, dec1_, dec0_;
    Conv2d up1_, up0_;
    GroupNorm out_gn_;
    Conv2d out_conv_;
    Linear temb1_, temb2_;
    Embedding prompt_;
};

}  // namespace synth
