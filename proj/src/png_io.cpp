#include "irst/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace irst {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::string& path, const std::string& why) {
    throw std::runtime_error("png: " + path + ": " + why);
}

}  // namespace

void write_png16(const std::string& path, const Image& img) {
    if (img.h <= 0 || img.w <= 0) fail(path, "empty image");
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) fail(path, "cannot open for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) fail(path, "png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        fail(path, "png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(path, "libpng error while writing");
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, img.w, img.h, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> row(std::size_t(img.w) * 2);
    for (int r = 0; r < img.h; ++r) {
        for (int c = 0; c < img.w; ++c) {
            float v = img.at(r, c);
            v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
            const auto q = static_cast<unsigned>(std::lround(v * 65535.0));
            row[std::size_t(c) * 2] = static_cast<png_byte>(q >> 8);
            row[std::size_t(c) * 2 + 1] = static_cast<png_byte>(q & 0xff);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png16(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) fail(path, "cannot open");
    png_byte header[8];
    if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8))
        fail(path, "not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) fail(path, "png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        fail(path, "png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(path, "truncated or corrupt PNG");
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY ||
        png_get_bit_depth(png, info) != 16) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(path, "expected 16-bit grayscale");
    }
    Image img = Image::zeros(int(png_get_image_height(png, info)),
                             int(png_get_image_width(png, info)));
    std::vector<png_byte> row(std::size_t(img.w) * 2);
    for (int r = 0; r < img.h; ++r) {
        png_read_row(png, row.data(), nullptr);
        for (int c = 0; c < img.w; ++c) {
            const unsigned q = (unsigned(row[std::size_t(c) * 2]) << 8) |
                               unsigned(row[std::size_t(c) * 2 + 1]);
            img.at(r, c) = float(q) / 65535.0f;
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

}  // namespace irst
