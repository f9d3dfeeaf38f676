// Copyright Contributors to the cosplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cosplat/core.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <string>
#include <vector>

namespace cosplat {

// Row-major, channel-interleaved RGB image with values in [0, 1].
struct ImageBuffer {
    int width = 0;
    int height = 0;
    std::vector<double> data; // height * width * 3

    ImageBuffer() = default;
    ImageBuffer(int w, int h, double fill = 0.0)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {
        if (w <= 0 || h <= 0) throw std::invalid_argument("ImageBuffer: dimensions must be positive");
    }

    double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    std::size_t size() const { return data.size(); }

    bool same_shape(const ImageBuffer& o) const { return width == o.width && height == o.height; }
};

namespace detail {

inline int pnm_next_int(std::istream& in) {
    // skips whitespace and '#' comments per the netpbm grammar
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        } else {
            c = in.get();
        }
    }
    if (c == EOF) throw std::runtime_error("pnm: unexpected end of header");
    int value = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        any = true;
        c = in.get();
    }
    if (!any) throw std::runtime_error("pnm: malformed header token");
    return value;
}

}  // namespace detail

// Binary PPM (P6), 8-bit. Values are clamped to [0,1] and quantized with
// round-to-nearest.
inline void write_ppm(const ImageBuffer& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(img.at(x, y, c), 0.0, 1.0);
                row[static_cast<std::size_t>(x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("write_ppm: write failed for " + path);
}

inline ImageBuffer read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '6') throw std::runtime_error("read_ppm: not a P6 file: " + path);
    const int w = detail::pnm_next_int(in);
    const int h = detail::pnm_next_int(in);
    const int maxval = detail::pnm_next_int(in);
    if (maxval != 255) throw std::runtime_error("read_ppm: only maxval 255 supported");
    ImageBuffer img(w, h);
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    }
    for (std::size_t i = 0; i < raw.size(); ++i) img.data[i] = raw[i] / 255.0;
    return img;
}

// 16-bit binary PGM (P5, maxval 65535, big-endian samples per netpbm).
// Depth values are scaled by `scale` into [0, 1]; the scale is recorded as a
// header comment so readers can invert the mapping.
inline void write_pgm16(const std::vector<double>& values, int width, int height, double scale,
                        const std::string& path) {
    if (static_cast<std::size_t>(width) * height != values.size()) {
        throw std::invalid_argument("write_pgm16: size mismatch");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm16: cannot open " + path);
    char header[96];
    std::snprintf(header, sizeof(header), "P5\n# scale=%.17g\n%d %d\n65535\n", scale, width, height);
    out << header;
    for (double v : values) {
        const double n = scale > 0 ? std::clamp(v / scale, 0.0, 1.0) : 0.0;
        const auto q = static_cast<std::uint16_t>(std::lround(n * 65535.0));
        const unsigned char bytes[2] = {static_cast<unsigned char>(q >> 8),
                                        static_cast<unsigned char>(q & 0xff)};
        out.write(reinterpret_cast<const char*>(bytes), 2);
    }
    if (!out) throw std::runtime_error("write_pgm16: write failed for " + path);
}

}  // namespace cosplat
