// FaceImage: the square RGB tensor every network consumes and produces.
// Values live in [-1, 1]; 8-bit conversion is x/127.5 - 1 and its inverse.
#pragma once

#include <cstdint>
#include <vector>

#include "ecgan/common.hpp"
#include "ecgan/rng.hpp"
#include "ecgan/tensor.hpp"

namespace ecgan {

struct FaceImage {
    // [channels=3, side, side], values in [-1, 1]
    Tensor<float> data;

    FaceImage() = default;
    explicit FaceImage(int side) : data(Shape{3, side, side}) { check_side(side); }
    explicit FaceImage(Tensor<float> t) : data(std::move(t)) { validate(); }

    int side() const { return data.shape.rank == 3 ? data.shape[1] : 0; }

    float& at(int c, int h, int w) { return data.data[(static_cast<size_t>(c) * side() + h) * side() + w]; }
    float at(int c, int h, int w) const {
        return data.data[(static_cast<size_t>(c) * side() + h) * side() + w];
    }

    // Enforces the full invariant set; throws invalid_argument on violation.
    void validate() const {
        if (data.shape.rank != 3 || data.shape[0] != 3)
            throw invalid_argument("FaceImage must be [3,H,W], got " + data.shape.str());
        if (data.shape[1] != data.shape[2])
            throw invalid_argument("FaceImage must be square");
        check_side(data.shape[1]);
        for (float v : data.data) {
            if (!std::isfinite(v)) throw invalid_argument("FaceImage has non-finite values");
            if (v < -1.0f || v > 1.0f)
                throw invalid_argument("FaceImage values must lie in [-1,1]");
        }
    }

    static void check_side(int side) {
        if (!is_pow2_side(side))
            throw invalid_argument("FaceImage side must be one of 16/32/64/128, got " +
                                   std::to_string(side));
    }
};

inline float u8_to_unit(uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }

inline uint8_t unit_to_u8(float v) {
    const float x = (clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f;
    const int r = static_cast<int>(x + 0.5f);
    return static_cast<uint8_t>(r > 255 ? 255 : r);
}

// Bilinear resample to a new side.
inline FaceImage resize(const FaceImage& img, int side) {
    FaceImage::check_side(side);
    const int src = img.side();
    if (src == side) return img;
    FaceImage out(side);
    const float scale = static_cast<float>(src) / static_cast<float>(side);
    for (int c = 0; c < 3; ++c)
        for (int h = 0; h < side; ++h)
            for (int w = 0; w < side; ++w) {
                const float sy = (static_cast<float>(h) + 0.5f) * scale - 0.5f;
                const float sx = (static_cast<float>(w) + 0.5f) * scale - 0.5f;
                const int y0 = clamp(static_cast<int>(std::floor(sy)), 0, src - 1);
                const int x0 = clamp(static_cast<int>(std::floor(sx)), 0, src - 1);
                const int y1 = clamp(y0 + 1, 0, src - 1);
                const int x1 = clamp(x0 + 1, 0, src - 1);
                const float fy = clamp(sy - static_cast<float>(y0), 0.0f, 1.0f);
                const float fx = clamp(sx - static_cast<float>(x0), 0.0f, 1.0f);
                const float v = (1 - fy) * ((1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
                                fy * ((1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1));
                out.at(c, h, w) = clamp(v, -1.0f, 1.0f);
            }
    return out;
}

inline FaceImage flip_horizontal(const FaceImage& img) {
    const int s = img.side();
    FaceImage out(s);
    for (int c = 0; c < 3; ++c)
        for (int h = 0; h < s; ++h)
            for (int w = 0; w < s; ++w) out.at(c, h, w) = img.at(c, h, s - 1 - w);
    return out;
}

// Reflection-pad by `pad` on each border, then crop a side-sized window whose
// top-left corner is (dy, dx) in the padded frame; (pad, pad) is the identity.
inline FaceImage pad_reflect_crop(const FaceImage& img, int pad, int dy, int dx) {
    const int s = img.side();
    if (dy < 0 || dx < 0 || dy > 2 * pad || dx > 2 * pad)
        throw invalid_argument("crop offset out of range");
    FaceImage out(s);
    const auto reflect = [s](int i) {
        while (i < 0 || i >= s) {
            if (i < 0) i = -i - 1;
            if (i >= s) i = 2 * s - 1 - i;
        }
        return i;
    };
    for (int c = 0; c < 3; ++c)
        for (int h = 0; h < s; ++h)
            for (int w = 0; w < s; ++w)
                out.at(c, h, w) = img.at(c, reflect(h + dy - pad), reflect(w + dx - pad));
    return out;
}

inline float l1_distance(const FaceImage& a, const FaceImage& b) {
    if (a.data.shape != b.data.shape) throw invalid_argument("l1_distance shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.data.data.size(); ++i)
        acc += std::abs(static_cast<double>(a.data.data[i]) - b.data.data[i]);
    return static_cast<float>(acc / static_cast<double>(a.data.data.size()));
}

}  // namespace ecgan
