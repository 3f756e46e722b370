#include "synth/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "synth/errors.hpp"
#include "synth/rng.hpp"

namespace synth {

std::string split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::test: return "test";
        case Split::val: return "val";
    }
    return "train";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    if (s == "val") return Split::val;
    throw ValidationError("unknown split: " + s);
}

int BinaryMask::area() const {
    int n = 0;
    for (uint8_t v : mask.px) n += v;
    return n;
}

static void validate_record(const SampleRecord& rec, const ClassMap& cm) {
    if (rec.image.h != rec.label_map.h || rec.image.w != rec.label_map.w)
        throw ValidationError("record " + rec.id + ": image/label resolution mismatch");
    for (uint8_t v : rec.label_map.px)
        if (!cm.is_valid_label(v))
            throw ValidationError("record " + rec.id + ": label value " +
                                  std::to_string(int(v)) + " not in class map");
}

std::vector<SampleRecord> load_dataset(const std::filesystem::path& manifest_path,
                                       const ClassMap& class_map) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open manifest: " + manifest_path.string());
    const auto base = manifest_path.parent_path();

    std::vector<SampleRecord> records;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        SampleRecord rec;
        rec.id = j.at("id").get<std::string>();
        rec.split = parse_split(j.at("split").get<std::string>());
        const auto resolve = [&base](const std::string& p) {
            std::filesystem::path fp(p);
            return fp.is_absolute() ? fp : base / fp;
        };
        rec.image = read_image_png(resolve(j.at("image").get<std::string>()));
        rec.label_map = read_label_png(resolve(j.at("mask").get<std::string>()));
        validate_record(rec, class_map);
        records.push_back(std::move(rec));
    }
    return records;
}

std::filesystem::path save_dataset(const std::filesystem::path& dir,
                                   const std::vector<SampleRecord>& records,
                                   const ClassMap& class_map) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    save_class_map(dir / "class_map.json", class_map);

    const Palette palette = class_map.palette();
    const auto manifest_path = dir / "manifest.jsonl";
    std::ofstream out(manifest_path);
    if (!out) throw IoError("cannot write manifest: " + manifest_path.string());
    for (const auto& rec : records) {
        const std::string img_rel = "images/" + rec.id + ".png";
        const std::string msk_rel = "masks/" + rec.id + ".png";
        write_image_png(dir / img_rel, rec.image);
        write_label_png(dir / msk_rel, rec.label_map, palette);
        nlohmann::json j = {{"image", img_rel},
                            {"mask", msk_rel},
                            {"split", split_name(rec.split)},
                            {"id", rec.id}};
        out << j.dump() << "\n";
    }
    return manifest_path;
}

std::vector<BinaryMask> split_label_map(const LabelMap& label_map, const ClassMap& class_map) {
    std::set<int> present;
    for (uint8_t v : label_map.px) {
        if (!class_map.is_valid_label(v))
            throw ValidationError("label value " + std::to_string(int(v)) + " not in class map");
        if (v != class_map.background_id) present.insert(v);
    }
    std::vector<BinaryMask> masks;
    for (const auto& e : class_map.entries) {
        if (!present.count(e.class_id)) continue;
        BinaryMask bm;
        bm.class_id = e.class_id;
        bm.mask = LabelMap(label_map.h, label_map.w);
        for (size_t i = 0; i < label_map.px.size(); ++i)
            bm.mask.px[i] = label_map.px[i] == e.class_id ? 1 : 0;
        masks.push_back(std::move(bm));
    }
    return masks;
}

LabelMap reconstruct_label_map(const std::vector<BinaryMask>& masks, int h, int w) {
    LabelMap lm(h, w);
    for (const auto& bm : masks) {
        if (bm.mask.h != h || bm.mask.w != w)
            throw ValidationError("mask resolution mismatch in reconstruct");
        for (size_t i = 0; i < lm.px.size(); ++i)
            if (bm.mask.px[i]) lm.px[i] = uint8_t(bm.class_id);
    }
    return lm;
}

EdgeImage extract_soft_edges(const BinaryMask& mask, float blur_sigma) {
    if (blur_sigma < 0.f) throw ValidationError("blur_sigma must be >= 0");
    const int h = mask.mask.h, w = mask.mask.w;
    for (uint8_t v : mask.mask.px)
        if (v > 1) throw ValidationError("mask values must be 0 or 1");

    // cross structuring element; off-frame pixels count as 0
    const auto sample = [&](int y, int x) -> int {
        if (y < 0 || y >= h || x < 0 || x >= w) return 0;
        return mask.mask.at(y, x);
    };
    std::vector<float> boundary(size_t(h) * w, 0.f);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int dil = 0, ero = 1;
            const int dy[5] = {0, -1, 1, 0, 0};
            const int dx[5] = {0, 0, 0, -1, 1};
            for (int k = 0; k < 5; ++k) {
                const int v = sample(y + dy[k], x + dx[k]);
                dil = std::max(dil, v);
                ero = std::min(ero, v);
            }
            boundary[size_t(y) * w + x] = dil != ero ? 1.f : 0.f;
        }

    EdgeImage out;
    out.class_id = mask.class_id;
    out.h = h;
    out.w = w;

    const int radius = int(std::floor(4.f * blur_sigma));
    if (blur_sigma == 0.f || radius == 0) {
        out.edges = std::move(boundary);
        return out;
    }

    std::vector<float> kernel(size_t(radius) * 2 + 1);
    for (int k = -radius; k <= radius; ++k)
        kernel[size_t(k + radius)] = std::exp(-0.5f * float(k) * float(k) / (blur_sigma * blur_sigma));

    // separable blur
    std::vector<float> tmp(size_t(h) * w, 0.f), blurred(size_t(h) * w, 0.f);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float acc = 0.f;
            for (int k = -radius; k <= radius; ++k) {
                const int xx = x + k;
                if (xx < 0 || xx >= w) continue;
                acc += kernel[size_t(k + radius)] * boundary[size_t(y) * w + xx];
            }
            tmp[size_t(y) * w + x] = acc;
        }
    float peak = 0.f;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float acc = 0.f;
            for (int k = -radius; k <= radius; ++k) {
                const int yy = y + k;
                if (yy < 0 || yy >= h) continue;
                acc += kernel[size_t(k + radius)] * tmp[size_t(yy) * w + x];
            }
            blurred[size_t(y) * w + x] = acc;
            peak = std::max(peak, acc);
        }
    if (peak > 0.f)
        for (auto& v : blurred) v /= peak;
    out.edges = std::move(blurred);
    return out;
}

std::string make_prompt(int class_id, const ClassMap& class_map, PromptKind kind) {
    if (kind == PromptKind::scene)
        return "an image in " + class_map.dataset_name;
    const auto& e = class_map.entry(class_id);
    return "an image of " + e.prompt_noun + " in " + class_map.dataset_name;
}

// ---- toy dataset -----------------------------------------------------------

namespace {

struct ToyClassSpec {
    const char* name;
    std::array<float, 3> base;
    std::array<uint8_t, 3> display;
    float wave_fx, wave_fy;
};

// Base colors chosen so any two classes differ by well over 30/255 in at
// least one channel; wave frequencies give each class a texture signature.
const ToyClassSpec kToyClasses[6] = {
    {"abdominal wall", {205.f, 95.f, 80.f}, {205, 95, 80}, 3.f, 1.f},
    {"liver", {120.f, 45.f, 40.f}, {120, 45, 40}, 1.f, 4.f},
    {"fat", {225.f, 195.f, 110.f}, {225, 195, 110}, 5.f, 2.f},
    {"gall bladder", {90.f, 160.f, 90.f}, {90, 160, 90}, 2.f, 5.f},
    {"ligament", {210.f, 210.f, 200.f}, {210, 210, 200}, 4.f, 4.f},
    {"stomach", {150.f, 90.f, 150.f}, {150, 90, 150}, 6.f, 3.f},
};
const std::array<float, 3> kToyBackground = {60.f, 50.f, 55.f};

void validate_toy_config(const ToyConfig& cfg) {
    if (cfg.image_size < 16) throw ValidationError("toy image_size must be >= 16");
    if (cfg.n_classes < 2 || cfg.n_classes > 6)
        throw ValidationError("toy n_classes must be in [2, 6]");
    if (cfg.n_samples < 0) throw ValidationError("toy n_samples must be >= 0");
    const bool counts_set = cfg.n_train >= 0 || cfg.n_test >= 0 || cfg.n_val >= 0;
    if (counts_set) {
        if (cfg.n_train < 0 || cfg.n_test < 0 || cfg.n_val < 0 ||
            cfg.n_train + cfg.n_test + cfg.n_val != cfg.n_samples)
            throw ValidationError("toy split counts must be set together and sum to n_samples");
    }
}

struct Ellipse {
    float cx, cy, a, b, phi;
    bool contains(float x, float y) const {
        const float dx = x - cx, dy = y - cy;
        const float u = (dx * std::cos(phi) + dy * std::sin(phi)) / a;
        const float v = (-dx * std::sin(phi) + dy * std::cos(phi)) / b;
        return u * u + v * v <= 1.f;
    }
};

uint8_t clamp_px(float v) {
    return uint8_t(std::min(255.f, std::max(0.f, std::round(v))));
}

void paint_texture(ImageU8& img, const LabelMap& where, uint8_t id,
                   const std::array<float, 3>& base, float fx, float fy, float phase,
                   const ToyTextureParams& tp, Rng& rng) {
    const float s = float(img.w);
    const float chan_scale[3] = {1.f, 0.8f, 0.6f};
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            if (where.at(y, x) != id) continue;
            const float wave =
                tp.wave_amp *
                std::sin(6.2831853f * (fx * float(x) + fy * float(y)) / s + phase);
            for (int ch = 0; ch < 3; ++ch) {
                const float noise = float(rng.uniform(-tp.noise_amp, tp.noise_amp));
                img.at(y, x, ch) = clamp_px(base[size_t(ch)] + wave * chan_scale[ch] + noise);
            }
        }
}

// one blob per chosen class, rejected until disjoint from what is placed
LabelMap place_blobs(int size, const std::vector<int>& class_ids,
                     const ToyTextureParams& tp, Rng& rng) {
    LabelMap lm(size, size);
    for (int cid : class_ids) {
        float scale = 1.f;
        for (int attempt = 0; attempt < 60; ++attempt) {
            Ellipse e;
            e.cx = float(rng.uniform(0.15, 0.85)) * float(size);
            e.cy = float(rng.uniform(0.15, 0.85)) * float(size);
            e.a = float(rng.uniform(tp.blob_min_frac, tp.blob_max_frac)) * float(size) * scale;
            e.b = float(rng.uniform(tp.blob_min_frac, tp.blob_max_frac)) * float(size) * scale;
            e.phi = float(rng.uniform(0.0, 3.14159265));
            bool clash = false;
            for (int y = 0; y < size && !clash; ++y)
                for (int x = 0; x < size; ++x)
                    if (e.contains(float(x), float(y)) && lm.at(y, x) != 0) {
                        clash = true;
                        break;
                    }
            if (!clash) {
                int painted = 0;
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x)
                        if (e.contains(float(x), float(y))) {
                            lm.at(y, x) = uint8_t(cid);
                            ++painted;
                        }
                if (painted > 0) break;
            }
            if (attempt % 10 == 9) scale *= 0.8f;
        }
    }
    return lm;
}

ClassMap toy_class_map(int n_classes) {
    ClassMap cm;
    cm.background_id = 0;
    cm.dataset_name = "toyset";
    for (int k = 0; k < n_classes; ++k) {
        const auto& spec = kToyClasses[size_t(k)];
        ClassEntry e;
        e.class_id = k + 1;
        e.name = spec.name;
        e.rgb = spec.display;
        e.prompt_noun = spec.name;
        e.z_order = k + 1;
        cm.entries.push_back(std::move(e));
    }
    cm.validate();
    return cm;
}

}  // namespace

std::array<float, 3> toy_class_base_color(int class_id) {
    if (class_id < 1 || class_id > 6) throw LookupError("no toy class " + std::to_string(class_id));
    return kToyClasses[size_t(class_id - 1)].base;
}

std::array<float, 3> toy_background_color() { return kToyBackground; }

ToyDataset generate_toy_dataset(const ToyConfig& config, uint64_t seed) {
    validate_toy_config(config);
    ToyDataset ds;
    ds.class_map = toy_class_map(config.n_classes);

    const int n = config.n_samples;
    int n_train = config.n_train, n_test = config.n_test;
    if (n_train < 0) {
        n_train = int(std::round(0.70 * n));
        n_test = int(std::round(0.15 * n));
    }

    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "toy_sample", uint64_t(i)));

        std::vector<int> chosen;
        for (int k = 1; k <= config.n_classes; ++k)
            if (rng.uniform() < config.texture.class_presence) chosen.push_back(k);
        if (chosen.empty()) chosen.push_back(1 + int(rng.uniform_index(uint64_t(config.n_classes))));

        SampleRecord rec;
        rec.label_map = place_blobs(config.image_size, chosen, config.texture, rng);
        rec.image = ImageU8(config.image_size, config.image_size);

        const float bg_phase = float(rng.uniform(0.0, 6.2831853));
        paint_texture(rec.image, rec.label_map, 0, kToyBackground, 2.f, 2.f, bg_phase,
                      config.texture, rng);
        for (int k = 1; k <= config.n_classes; ++k) {
            const auto& spec = kToyClasses[size_t(k - 1)];
            const float phase = float(rng.uniform(0.0, 6.2831853));
            paint_texture(rec.image, rec.label_map, uint8_t(k), spec.base, spec.wave_fx,
                          spec.wave_fy, phase, config.texture, rng);
        }

        rec.split = i < n_train ? Split::train
                                : (i < n_train + n_test ? Split::test : Split::val);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "toy_%05d", i);
        rec.id = buf;
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

std::vector<LabelMap> generate_sim_label_maps(const ToyConfig& config, uint64_t seed) {
    validate_toy_config(config);
    std::vector<LabelMap> maps;
    ToyTextureParams tp = config.texture;
    // simulation masks approximate real organ shapes: rounder, larger blobs
    tp.blob_min_frac = std::min(0.30f, tp.blob_min_frac * 1.4f);
    tp.blob_max_frac = std::min(0.34f, tp.blob_max_frac * 1.3f);
    for (int i = 0; i < config.n_samples; ++i) {
        Rng rng(derive_seed(seed, "sim_mask", uint64_t(i)));
        std::vector<int> chosen;
        for (int k = 1; k <= config.n_classes; ++k)
            if (rng.uniform() < tp.class_presence) chosen.push_back(k);
        if (chosen.empty()) chosen.push_back(1 + int(rng.uniform_index(uint64_t(config.n_classes))));
        maps.push_back(place_blobs(config.image_size, chosen, tp, rng));
    }
    return maps;
}

}  // namespace synth
