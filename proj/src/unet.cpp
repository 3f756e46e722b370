#include "synth/unet.hpp"

#include <sstream>

#include "json.hpp"
#include "synth/errors.hpp"

namespace synth {

std::string UNetConfig::descriptor() const {
    nlohmann::json j = {{"arch", "unet_v1"},
                        {"in_channels", in_channels},
                        {"out_channels", out_channels},
                        {"image_size", image_size},
                        {"width0", width0},
                        {"width1", width1},
                        {"width2", width2},
                        {"emb_dim", emb_dim},
                        {"n_prompts", n_prompts},
                        {"groups", groups}};
    return j.dump();
}

UNetConfig parse_descriptor(const std::string& desc) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(desc);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("bad architecture descriptor: ") + e.what());
    }
    if (j.value("arch", "") != "unet_v1")
        throw ValidationError("unknown architecture: " + j.value("arch", std::string("?")));
    UNetConfig cfg;
    cfg.in_channels = j.at("in_channels");
    cfg.out_channels = j.at("out_channels");
    cfg.image_size = j.at("image_size");
    cfg.width0 = j.at("width0");
    cfg.width1 = j.at("width1");
    cfg.width2 = j.at("width2");
    cfg.emb_dim = j.at("emb_dim");
    cfg.n_prompts = j.at("n_prompts");
    cfg.groups = j.at("groups");
    return cfg;
}

static int pick_groups(int channels, int preferred) {
    int g = std::min(preferred, channels);
    while (g > 1 && channels % g != 0) --g;
    return g;
}

// ---- ResBlock ---------------------------------------------------------------

void ResBlock::init(const std::string& name, int c_in_, int c_out_, int emb_dim, int groups,
                    Rng& rng) {
    c_in = c_in_;
    c_out = c_out_;
    gn1.init(name + ".gn1", c_in, pick_groups(c_in, groups));
    conv1.init(name + ".conv1", c_in, c_out, 3, rng);
    emb_proj.init(name + ".emb", emb_dim, c_out, rng);
    gn2.init(name + ".gn2", c_out, pick_groups(c_out, groups));
    conv2.init(name + ".conv2", c_out, c_out, 3, rng);
    has_skip = c_in != c_out;
    if (has_skip) skip.init(name + ".skip", c_in, c_out, 1, rng);
}

Tensor ResBlock::forward(const Tensor& x, const std::vector<float>& emb, Trace& tr) const {
    tr.x = x;
    tr.a1 = gn1.forward(x, tr.s1);
    Tensor h = conv1.forward(silu(tr.a1));

    std::vector<float> se = emb;
    silu_vec(se);
    const std::vector<float> ebias = emb_proj.forward(se);
    const size_t hw = size_t(h.h) * h.w;
    for (int c = 0; c < c_out; ++c) {
        float* row = h.v.data() + size_t(c) * hw;
        for (size_t i = 0; i < hw; ++i) row[i] += ebias[size_t(c)];
    }
    tr.h1 = h;
    tr.a2 = gn2.forward(h, tr.s2);
    Tensor y = conv2.forward(silu(tr.a2));
    if (has_skip) {
        y += skip.forward(x);
    } else {
        y += x;
    }
    return y;
}

Tensor ResBlock::backward(const Trace& tr, const std::vector<float>& emb, const Tensor& dy,
                          std::vector<float>& demb) {
    Tensor ds2 = conv2.backward(silu(tr.a2), dy);
    Tensor da2 = silu_backward(tr.a2, ds2);
    Tensor dh1 = gn2.backward(tr.h1, tr.s2, da2);

    // emb bias was broadcast over hw
    const size_t hw = size_t(dh1.h) * dh1.w;
    std::vector<float> debias(size_t(c_out), 0.f);
    for (int c = 0; c < c_out; ++c) {
        const float* row = dh1.v.data() + size_t(c) * hw;
        double acc = 0;
        for (size_t i = 0; i < hw; ++i) acc += row[i];
        debias[size_t(c)] = float(acc);
    }
    std::vector<float> se = emb;
    silu_vec(se);
    const std::vector<float> dse = emb_proj.backward(se, debias);
    const std::vector<float> de = silu_vec_backward(emb, dse);
    for (size_t i = 0; i < de.size(); ++i) demb[i] += de[i];

    Tensor ds1 = conv1.backward(silu(tr.a1), dh1);
    Tensor da1 = silu_backward(tr.a1, ds1);
    Tensor dx = gn1.backward(tr.x, tr.s1, da1);
    if (has_skip) {
        dx += skip.backward(tr.x, dy);
    } else {
        dx += dy;
    }
    return dx;
}

void ResBlock::collect(ParamRefs& out) {
    gn1.collect(out);
    conv1.collect(out);
    emb_proj.collect(out);
    gn2.collect(out);
    conv2.collect(out);
    if (has_skip) skip.collect(out);
}

void ResBlock::copy_params_from(const ResBlock& other) {
    ParamRefs mine, theirs;
    collect(mine);
    const_cast<ResBlock&>(other).collect(theirs);
    for (size_t i = 0; i < mine.size(); ++i) mine[i]->w = theirs[i]->w;
}

// ---- adapter ------------------------------------------------------------------

EdgePyramid make_edge_pyramid(const Tensor& edge_1ch, int image_size) {
    EdgePyramid p;
    Tensor e = edge_1ch;
    if (e.h != image_size) e = pool_to(e, image_size);
    p.levels[0] = e;
    p.levels[1] = avgpool2(p.levels[0]);
    p.levels[2] = avgpool2(p.levels[1]);
    return p;
}

ParamRefs ControlAdapter::params() {
    ParamRefs out;
    collect(out);
    return out;
}

void ControlAdapter::collect(ParamRefs& out) {
    for (auto& s : sites) {
        s.block.collect(out);
        s.zin.collect(out);
        s.zout.collect(out);
    }
}

// ---- UNet -----------------------------------------------------------------------

void UNet::init(const UNetConfig& cfg, uint64_t seed) {
    cfg_ = cfg;
    Rng rng(derive_seed(seed, "unet_init"));
    stem_.init("stem", cfg.in_channels, cfg.width0, 3, rng);
    enc0_.init("enc0", cfg.width0, cfg.width0, cfg.emb_dim, cfg.groups, rng);
    enc1_.init("enc1", cfg.width0, cfg.width1, cfg.emb_dim, cfg.groups, rng);
    enc2_.init("enc2", cfg.width1, cfg.width2, cfg.emb_dim, cfg.groups, rng);
    up1_.init("up1", cfg.width2, cfg.width1, 3, rng);
    dec1_.init("dec1", 2 * cfg.width1, cfg.width1, cfg.emb_dim, cfg.groups, rng);
    up0_.init("up0", cfg.width1, cfg.width0, 3, rng);
    dec0_.init("dec0", 2 * cfg.width0, cfg.width0, cfg.emb_dim, cfg.groups, rng);
    out_gn_.init("out_gn", cfg.width0, pick_groups(cfg.width0, cfg.groups));
    out_conv_.init_zero("out_conv", cfg.width0, cfg.out_channels, 3);
    temb1_.init("temb1", cfg.emb_dim, cfg.emb_dim, rng);
    temb2_.init("temb2", cfg.emb_dim, cfg.emb_dim, rng);
    prompt_.init("prompt", cfg.n_prompts, cfg.emb_dim, rng);
}

const ResBlock& UNet::encoder_block(int i) const {
    switch (i) {
        case 0: return enc0_;
        case 1: return enc1_;
        default: return enc2_;
    }
}

ControlAdapter UNet::make_adapter(float scale) const {
    ControlAdapter a;
    a.base_descriptor = cfg_.descriptor();
    a.scale = scale;
    Rng rng(0);
    const int cins[3] = {cfg_.width0, cfg_.width0, cfg_.width1};
    const int couts[3] = {cfg_.width0, cfg_.width1, cfg_.width2};
    for (int i = 0; i < 3; ++i) {
        const std::string p = "adapt" + std::to_string(i);
        a.sites[i].block.init(p, cins[i], couts[i], cfg_.emb_dim, cfg_.groups, rng);
        a.sites[i].block.copy_params_from(encoder_block(i));
        a.sites[i].zin.init_zero(p + ".zin", 1, cins[i], 1);
        a.sites[i].zout.init_zero(p + ".zout", couts[i], couts[i], 1);
    }
    return a;
}

Tensor UNet::forward(const Tensor& x, int t, int prompt_id, UNetTrace& tr,
                     const ControlAdapter* adapter, const EdgePyramid* edges) const {
    if (x.c != cfg_.in_channels || x.h != cfg_.image_size || x.w != cfg_.image_size)
        throw ValidationError("unet input shape mismatch");
    if (adapter && !edges) throw ValidationError("adapter attached without edge conditioning");

    tr.prompt_id = prompt_id;
    tr.x_in = x;
    tr.emb_pre = sinusoidal_embedding(t, cfg_.emb_dim);
    tr.emb_h1 = temb1_.forward(tr.emb_pre);
    std::vector<float> h1s = tr.emb_h1;
    silu_vec(h1s);
    tr.emb = temb2_.forward(h1s);
    const std::vector<float> prow = prompt_.forward(prompt_id);
    for (size_t i = 0; i < tr.emb.size(); ++i) tr.emb[i] += prow[i];

    tr.with_adapter = adapter != nullptr;
    const ResBlock* encs[3] = {&enc0_, &enc1_, &enc2_};
    ResBlock::Trace* enc_tr[3] = {&tr.enc0, &tr.enc1, &tr.enc2};

    tr.stem_out = stem_.forward(x);
    Tensor cur = tr.stem_out;
    Tensor* outs[3] = {&tr.e0, &tr.e1, &tr.e2};
    for (int i = 0; i < 3; ++i) {
        Tensor y = encs[i]->forward(cur, tr.emb, *enc_tr[i]);
        if (adapter) {
            const AdapterSite& s = adapter->sites[i];
            tr.edge[i] = edges->levels[i];
            tr.ad_in[i] = cur;
            tr.ad_in[i] += s.zin.forward(edges->levels[i]);
            tr.ad_out[i] = s.block.forward(tr.ad_in[i], tr.emb, tr.ad[i]);
            Tensor inj = s.zout.forward(tr.ad_out[i]);
            inj *= adapter->scale;
            y += inj;
        }
        *outs[i] = y;
        if (i == 0) {
            tr.p0 = avgpool2(y);
            cur = tr.p0;
        } else if (i == 1) {
            tr.p1 = avgpool2(y);
            cur = tr.p1;
        }
    }

    tr.up1_in = upsample2(tr.e2);
    tr.up1_out = up1_.forward(tr.up1_in);
    tr.cat1 = concat_channels(tr.up1_out, tr.e1);
    tr.d1 = dec1_.forward(tr.cat1, tr.emb, tr.dec1);

    tr.up0_in = upsample2(tr.d1);
    tr.up0_out = up0_.forward(tr.up0_in);
    tr.cat0 = concat_channels(tr.up0_out, tr.e0);
    tr.d0 = dec0_.forward(tr.cat0, tr.emb, tr.dec0);

    tr.out_gn_in = tr.d0;
    tr.out_gn = out_gn_.forward(tr.out_gn_in, tr.out_stats);
    return out_conv_.forward(silu(tr.out_gn));
}

Tensor UNet::backward(const UNetTrace& tr, const Tensor& dy, ControlAdapter* adapter) {
    if (tr.with_adapter != (adapter != nullptr))
        throw ValidationError("unet backward adapter mismatch with trace");
    std::vector<float> demb(size_t(cfg_.emb_dim), 0.f);

    Tensor ds = out_conv_.backward(silu(tr.out_gn), dy);
    Tensor dgn = silu_backward(tr.out_gn, ds);
    Tensor dd0 = out_gn_.backward(tr.out_gn_in, tr.out_stats, dgn);

    Tensor dcat0 = dec0_.backward(tr.dec0, tr.emb, dd0, demb);
    Tensor dup0_out, de0;
    split_channels(dcat0, cfg_.width0, dup0_out, de0);
    Tensor dup0_in = up0_.backward(tr.up0_in, dup0_out);
    Tensor dd1 = upsample2_backward(tr.d1, dup0_in);

    Tensor dcat1 = dec1_.backward(tr.dec1, tr.emb, dd1, demb);
    Tensor dup1_out, de1;
    split_channels(dcat1, cfg_.width1, dup1_out, de1);
    Tensor dup1_in = up1_.backward(tr.up1_in, dup1_out);
    Tensor de2 = upsample2_backward(tr.e2, dup1_in);

    // walk encoder sites top-down: site 2 -> 0
    ResBlock* encs[3] = {&enc0_, &enc1_, &enc2_};
    const ResBlock::Trace* enc_tr[3] = {&tr.enc0, &tr.enc1, &tr.enc2};
    Tensor dsite[3];
    dsite[2] = de2;

    Tensor dstem;
    for (int i = 2; i >= 0; --i) {
        Tensor din = encs[i]->backward(*enc_tr[i], tr.emb, dsite[i], demb);
        if (adapter) {
            AdapterSite& s = adapter->sites[i];
            Tensor dzo = dsite[i];
            dzo *= adapter->scale;
            Tensor dablk = s.zout.backward(tr.ad_out[i], dzo);
            Tensor dad_in = s.block.backward(tr.ad[i], tr.emb, dablk, demb);
            s.zin.backward(tr.edge[i], dad_in);  // edge grad itself is discarded
            din += dad_in;
        }
        if (i == 2) {
            dsite[1] = avgpool2_backward(tr.e1, din);
            dsite[1] += de1;
        } else if (i == 1) {
            dsite[0] = avgpool2_backward(tr.e0, din);
            dsite[0] += de0;
        } else {
            dstem = din;
        }
    }
    Tensor dx = stem_.backward(tr.x_in, dstem);

    // embedding path
    std::vector<float> h1s = tr.emb_h1;
    silu_vec(h1s);
    const std::vector<float> dh1s = temb2_.backward(h1s, demb);
    const std::vector<float> dpre = silu_vec_backward(tr.emb_h1, dh1s);
    temb1_.backward(tr.emb_pre, dpre);
    prompt_.backward(tr.prompt_id, demb);
    return dx;
}

ParamRefs UNet::params() {
    ParamRefs out;
    stem_.collect(out);
    enc0_.collect(out);
    enc1_.collect(out);
    enc2_.collect(out);
    up1_.collect(out);
    dec1_.collect(out);
    up0_.collect(out);
    dec0_.collect(out);
    out_gn_.collect(out);
    out_conv_.collect(out);
    temb1_.collect(out);
    temb2_.collect(out);
    prompt_.collect(out);
    return out;
}

}  // namespace synth
