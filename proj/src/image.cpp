#include "synth/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

#include "synth/errors.hpp"

namespace synth {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

FilePtr open_or_throw(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.string().c_str(), mode));
    if (!f) throw IoError("cannot open file: " + path.string());
    return f;
}

struct PngReader {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReader() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    }
};

struct PngWriter {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWriter() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    }
};

}  // namespace

ImageU8 read_image_png(const std::filesystem::path& path) {
    FilePtr f = open_or_throw(path, "rb");
    PngReader r;
    r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    r.info = png_create_info_struct(r.png);
    if (setjmp(png_jmpbuf(r.png))) throw IoError("png decode failed: " + path.string());
    png_init_io(r.png, f.get());
    png_read_info(r.png, r.info);

    png_set_expand(r.png);          // palette/low-bit -> 8-bit rgb
    png_set_strip_16(r.png);
    png_set_strip_alpha(r.png);
    png_set_gray_to_rgb(r.png);
    png_read_update_info(r.png, r.info);

    const int w = int(png_get_image_width(r.png, r.info));
    const int h = int(png_get_image_height(r.png, r.info));
    if (png_get_channels(r.png, r.info) != 3)
        throw IoError("unexpected channel count in " + path.string());

    ImageU8 img(h, w);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = img.px.data() + size_t(y) * w * 3;
    png_read_image(r.png, rows.data());
    png_read_end(r.png, nullptr);
    return img;
}

void write_image_png(const std::filesystem::path& path, const ImageU8& img) {
    FilePtr f = open_or_throw(path, "wb");
    PngWriter wr;
    wr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    wr.info = png_create_info_struct(wr.png);
    if (setjmp(png_jmpbuf(wr.png))) throw IoError("png encode failed: " + path.string());
    png_init_io(wr.png, f.get());
    png_set_IHDR(wr.png, wr.info, img.w, img.h, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(wr.png, wr.info);
    std::vector<png_bytep> rows(img.h);
    for (int y = 0; y < img.h; ++y)
        rows[y] = const_cast<png_bytep>(img.px.data() + size_t(y) * img.w * 3);
    png_write_image(wr.png, rows.data());
    png_write_end(wr.png, nullptr);
}

LabelMap read_label_png(const std::filesystem::path& path) {
    FilePtr f = open_or_throw(path, "rb");
    PngReader r;
    r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    r.info = png_create_info_struct(r.png);
    if (setjmp(png_jmpbuf(r.png))) throw IoError("png decode failed: " + path.string());
    png_init_io(r.png, f.get());
    png_read_info(r.png, r.info);

    const int color = png_get_color_type(r.png, r.info);
    if (color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY)
        throw IoError("label map must be indexed or grayscale png: " + path.string());
    if (png_get_bit_depth(r.png, r.info) < 8) png_set_packing(r.png);
    png_set_strip_16(r.png);
    png_read_update_info(r.png, r.info);

    const int w = int(png_get_image_width(r.png, r.info));
    const int h = int(png_get_image_height(r.png, r.info));
    LabelMap lm(h, w);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = lm.px.data() + size_t(y) * w;
    png_read_image(r.png, rows.data());
    png_read_end(r.png, nullptr);
    return lm;
}

void write_label_png(const std::filesystem::path& path, const LabelMap& lm,
                     const Palette& palette) {
    FilePtr f = open_or_throw(path, "wb");
    PngWriter wr;
    wr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    wr.info = png_create_info_struct(wr.png);
    if (setjmp(png_jmpbuf(wr.png))) throw IoError("png encode failed: " + path.string());
    png_init_io(wr.png, f.get());

    if (!palette.empty()) {
        png_set_IHDR(wr.png, wr.info, lm.w, lm.h, 8, PNG_COLOR_TYPE_PALETTE,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                     PNG_FILTER_TYPE_DEFAULT);
        std::vector<png_color> plte(palette.size());
        for (size_t i = 0; i < palette.size(); ++i)
            plte[i] = {palette[i][0], palette[i][1], palette[i][2]};
        png_set_PLTE(wr.png, wr.info, plte.data(), int(plte.size()));
    } else {
        png_set_IHDR(wr.png, wr.info, lm.w, lm.h, 8, PNG_COLOR_TYPE_GRAY,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                     PNG_FILTER_TYPE_DEFAULT);
    }
    png_write_info(wr.png, wr.info);
    std::vector<png_bytep> rows(lm.h);
    for (int y = 0; y < lm.h; ++y)
        rows[y] = const_cast<png_bytep>(lm.px.data() + size_t(y) * lm.w);
    png_write_image(wr.png, rows.data());
    png_write_end(wr.png, nullptr);
}

Tensor to_model(const ImageU8& img) {
    Tensor t(3, img.h, img.w);
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                t.at(ch, y, x) = float(img.at(y, x, ch)) / 127.5f - 1.f;
    return t;
}

uint8_t quantize_px(float x) {
    if (x < -1.f) x = -1.f;
    if (x > 1.f) x = 1.f;
    const float q = std::round(x * 127.5f + 127.5f);
    return uint8_t(q < 0.f ? 0.f : (q > 255.f ? 255.f : q));
}

ImageU8 to_u8(const Tensor& t) {
    ImageU8 img(t.h, t.w);
    for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < t.h; ++y)
            for (int x = 0; x < t.w; ++x)
                img.at(y, x, ch) = quantize_px(t.at(ch, y, x));
    return img;
}

}  // namespace synth
