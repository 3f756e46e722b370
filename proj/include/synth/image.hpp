#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "synth/tensor.hpp"

namespace synth {

// Interleaved 8-bit RGB.
struct ImageU8 {
    int h = 0, w = 0;
    std::vector<uint8_t> px;

    ImageU8() = default;
    ImageU8(int h_, int w_) : h(h_), w(w_), px(size_t(h_) * w_ * 3, 0) {}

    uint8_t& at(int y, int x, int ch) { return px[(size_t(y) * w + x) * 3 + ch]; }
    uint8_t at(int y, int x, int ch) const { return px[(size_t(y) * w + x) * 3 + ch]; }
};

// Single-channel class-id map, pixel value = class id (0 = background).
struct LabelMap {
    int h = 0, w = 0;
    std::vector<uint8_t> px;

    LabelMap() = default;
    LabelMap(int h_, int w_) : h(h_), w(w_), px(size_t(h_) * w_, 0) {}

    uint8_t& at(int y, int x) { return px[size_t(y) * w + x]; }
    uint8_t at(int y, int x) const { return px[size_t(y) * w + x]; }
};

using Palette = std::vector<std::array<uint8_t, 3>>;

ImageU8 read_image_png(const std::filesystem::path& path);
void write_image_png(const std::filesystem::path& path, const ImageU8& img);

// Label maps are stored as single-channel indexed PNG (palette when given,
// grayscale otherwise); the stored byte is the class id either way.
LabelMap read_label_png(const std::filesystem::path& path);
void write_label_png(const std::filesystem::path& path, const LabelMap& lm,
                     const Palette& palette = {});

// Model space is [-1, 1] float CHW; quantization back to uint8 is
// round(clamp(x)*127.5 + 127.5) so that to_model -> to_u8 is the identity.
Tensor to_model(const ImageU8& img);
ImageU8 to_u8(const Tensor& t);
uint8_t quantize_px(float x);

}  // namespace synth
