#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "sdg/common.hpp"

namespace sdg {

// RGB raster, values in [0,1], row-major, 3 channels interleaved.
struct Raster {
    int w = 0, h = 0;
    std::vector<double> rgb;

    Raster() = default;
    Raster(int width, int height) : w(width), h(height), rgb((size_t)width * height * 3, 0.0) {}

    double* px(int x, int y) { return rgb.data() + ((size_t)y * w + x) * 3; }
    const double* px(int x, int y) const { return rgb.data() + ((size_t)y * w + x) * 3; }

    void set(int x, int y, const std::array<double, 3>& c) {
        double* p = px(x, y);
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    }

    std::array<double, 3> get(int x, int y) const {
        const double* p = px(x, y);
        return {p[0], p[1], p[2]};
    }
};

// 8-bit quantization used for PNG encode; decode maps back to v/255.
inline uint8_t quantize8(double v) {
    double q = std::round(std::min(1.0, std::max(0.0, v)) * 255.0);
    return (uint8_t)q;
}

void write_png(const std::string& path, const Raster& img);
Raster read_png(const std::string& path);

inline double max_abs_diff(const Raster& a, const Raster& b) {
    require(a.w == b.w && a.h == b.h, "raster size mismatch");
    double m = 0;
    for (size_t i = 0; i < a.rgb.size(); ++i) m = std::max(m, std::abs(a.rgb[i] - b.rgb[i]));
    return m;
}

inline std::array<double, 3> hsv_to_rgb(double h_deg, double s, double v) {
    double h = std::fmod(std::fmod(h_deg, 360.0) + 360.0, 360.0) / 60.0;
    int i = (int)std::floor(h) % 6;
    double f = h - std::floor(h);
    double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    switch (i) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

} // namespace sdg
