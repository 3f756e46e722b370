#pragma once

#include <string>
#include <vector>

#include "synth/rng.hpp"
#include "synth/tensor.hpp"

namespace synth {

// Trainable parameter: value, gradient, Adam moments.
struct Param {
    std::string name;
    FloatVec w, g, m, v;

    void init(const std::string& name_, size_t n) {
        name = name_;
        w.assign(n, 0.f);
        g.assign(n, 0.f);
        m.assign(n, 0.f);
        v.assign(n, 0.f);
    }
    void zero_grad() { std::fill(g.begin(), g.end(), 0.f); }
};

using ParamRefs = std::vector<Param*>;

// Stride-1 convolution, pad = k/2 (k odd). Weight layout [oc][ic][ky][kx].
struct Conv2d {
    int in_c = 0, out_c = 0, k = 1;
    Param w, b;

    void init(const std::string& name, int in_c_, int out_c_, int k_, Rng& rng);
    void init_zero(const std::string& name, int in_c_, int out_c_, int k_);
    Tensor forward(const Tensor& x) const;
    // accumulates parameter grads, returns dL/dx
    Tensor backward(const Tensor& x, const Tensor& dy);
    void collect(ParamRefs& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct Linear {
    int in_d = 0, out_d = 0;
    Param w, b;

    void init(const std::string& name, int in_d_, int out_d_, Rng& rng);
    std::vector<float> forward(const std::vector<float>& x) const;
    std::vector<float> backward(const std::vector<float>& x, const std::vector<float>& dy);
    void collect(ParamRefs& out) {
        out.push_back(&w);
        out.push_back(&b);
    }
};

struct GroupNorm {
    int channels = 0, groups = 1;
    Param gamma, beta;

    struct Stats {
        std::vector<float> mean, inv_std;  // per group
    };

    void init(const std::string& name, int channels_, int groups_);
    Tensor forward(const Tensor& x, Stats& stats) const;
    Tensor backward(const Tensor& x, const Stats& stats, const Tensor& dy);
    void collect(ParamRefs& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

struct Embedding {
    int rows = 0, dim = 0;
    Param table;

    void init(const std::string& name, int rows_, int dim_, Rng& rng);
    std::vector<float> forward(int row) const;
    void backward(int row, const std::vector<float>& dy);
    void collect(ParamRefs& out) { out.push_back(&table); }
};

// elementwise / shape ops
Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& dy);
void silu_vec(std::vector<float>& x);
std::vector<float> silu_vec_backward(const std::vector<float>& x, const std::vector<float>& dy);

Tensor avgpool2(const Tensor& x);
Tensor avgpool2_backward(const Tensor& x_like, const Tensor& dy);
Tensor upsample2(const Tensor& x);
Tensor upsample2_backward(const Tensor& x_like, const Tensor& dy);

Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& d, int c_first, Tensor& da, Tensor& db);

// repeated average-pool until the tensor is res x res
Tensor pool_to(const Tensor& x, int res);

std::vector<float> sinusoidal_embedding(int t, int dim);

struct Adam {
    float lr = 1e-3f, beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    int64_t t = 0;

    void step(const ParamRefs& params);
};

void zero_grads(const ParamRefs& params);

}  // namespace synth
