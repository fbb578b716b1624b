#pragma once

#include <string>
#include <vector>

namespace irst {

/// Single-channel image with values in [0,1].
struct Image {
    int h = 0, w = 0;
    std::vector<float> v;

    static Image zeros(int h, int w) { return {h, w, std::vector<float>(std::size_t(h) * w, 0.f)}; }
    float at(int r, int c) const { return v[std::size_t(r) * w + c]; }
    float& at(int r, int c) { return v[std::size_t(r) * w + c]; }
};

/// Writes a 16-bit grayscale PNG (values quantized from [0,1]).
void write_png16(const std::string& path, const Image& img);

/// Reads a 16-bit grayscale PNG written by write_png16; throws with the
/// path and reason on malformed input.
Image read_png16(const std::string& path);

}  // namespace irst
