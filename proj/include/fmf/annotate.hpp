#pragma once

#include <optional>

#include "fmf/persist.hpp"
#include "fmf/tensor.hpp"

namespace fmf {

struct Keyframe {
    int64_t frame = 0;
    std::string role;  // onset | apex | offset
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive pixel coordinates
};

struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

// Text format: one keyframe per line, "frame_idx role x0 y0 x1 y1".
inline std::vector<Keyframe> parse_keyframes(const std::string& text) {
    std::vector<Keyframe> out;
    size_t pos = 0;
    int64_t lineno = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        Keyframe k;
        char role[32];
        int n = std::sscanf(line.c_str(), "%lld %31s %lf %lf %lf %lf", (long long*)&k.frame, role,
                            &k.x0, &k.y0, &k.x1, &k.y1);
        FMF_CHECK(n == 6, "malformed keyframe line " << lineno << ": '" << line << "'");
        k.role = role;
        FMF_CHECK(k.role == "onset" || k.role == "apex" || k.role == "offset",
                  "unknown keyframe role '" << k.role << "' on line " << lineno);
        FMF_CHECK(k.x0 <= k.x1 && k.y0 <= k.y1, "degenerate box on line " << lineno);
        out.push_back(std::move(k));
    }
    return out;
}

// Linear per-coordinate interpolation between consecutive keyframes; frames
// outside the keyframed span carry no box.
inline std::vector<std::optional<Box>> propagate(const std::vector<Keyframe>& keyframes,
                                                 int64_t frame_count) {
    FMF_CHECK(keyframes.size() >= 2, "propagation needs at least two keyframes");
    for (size_t i = 1; i < keyframes.size(); ++i)
        FMF_CHECK(keyframes[i].frame > keyframes[i - 1].frame,
                  "keyframe indices must be strictly increasing (duplicate or out-of-order at "
                      << keyframes[i].frame << ")");
    std::vector<std::optional<Box>> out(size_t(frame_count), std::nullopt);
    for (int64_t f = 0; f < frame_count; ++f) {
        if (f < keyframes.front().frame || f > keyframes.back().frame) continue;
        size_t hi = 1;
        while (hi < keyframes.size() && keyframes[hi].frame < f) ++hi;
        if (hi == keyframes.size()) hi = keyframes.size() - 1;
        const Keyframe& a = keyframes[hi - 1];
        const Keyframe& b = keyframes[hi];
        double w = b.frame == a.frame ? 0.0 : double(f - a.frame) / double(b.frame - a.frame);
        out[size_t(f)] = Box{a.x0 + (b.x0 - a.x0) * w, a.y0 + (b.y0 - a.y0) * w,
                             a.x1 + (b.x1 - a.x1) * w, a.y1 + (b.y1 - a.y1) * w};
    }
    return out;
}

// Filled rectangle, nearest-integer bounds, clamped to the frame.
inline std::vector<uint8_t> rasterize_box(const Box& box, int64_t H, int64_t W) {
    std::vector<uint8_t> mask(size_t(H * W), 0);
    int64_t x0 = std::clamp<int64_t>(int64_t(std::llround(box.x0)), 0, W - 1);
    int64_t x1 = std::clamp<int64_t>(int64_t(std::llround(box.x1)), 0, W - 1);
    int64_t y0 = std::clamp<int64_t>(int64_t(std::llround(box.y0)), 0, H - 1);
    int64_t y1 = std::clamp<int64_t>(int64_t(std::llround(box.y1)), 0, H - 1);
    for (int64_t y = y0; y <= y1; ++y)
        for (int64_t x = x0; x <= x1; ++x) mask[size_t(y * W + x)] = 1;
    return mask;
}

// Guidance-weighted median of a binary mask. For each pixel the labels in a
// (2r+1)^2 window vote with weights exp(-|color - center color|^2 / (2 s^2))
// taken from the guidance frame; for binary data the weighted median is
// anomaly iff the anomaly weight sum strictly exceeds the normal one.
// The window is clipped at the borders. radius 0 is the identity.
inline std::vector<uint8_t> refine(const std::vector<uint8_t>& mask, const Tensor<float>& guidance,
                                   int64_t radius, double sigma_color) {
    FMF_CHECK(guidance.rank() == 3, "guidance must be [H, W, C]");
    int64_t H = guidance.shape()[0], W = guidance.shape()[1], C = guidance.shape()[2];
    FMF_CHECK(int64_t(mask.size()) == H * W, "mask extents do not match guidance");
    FMF_CHECK(radius >= 0 && sigma_color > 0, "invalid refinement parameters");
    if (radius == 0) return mask;
    std::vector<uint8_t> out(size_t(H * W), 0);
    const float* g = guidance.data();
    double inv = 1.0 / (2.0 * sigma_color * sigma_color);
    parallel_for(H, [&](int64_t y) {
        for (int64_t x = 0; x < W; ++x) {
            const float* center = g + (y * W + x) * C;
            double w_anom = 0, w_norm = 0;
            for (int64_t dy = -radius; dy <= radius; ++dy) {
                int64_t yy = y + dy;
                if (yy < 0 || yy >= H) continue;
                for (int64_t dx = -radius; dx <= radius; ++dx) {
                    int64_t xx = x + dx;
                    if (xx < 0 || xx >= W) continue;
                    const float* p = g + (yy * W + xx) * C;
                    double d2 = 0;
                    for (int64_t c = 0; c < C; ++c) {
                        double d = double(p[c]) - double(center[c]);
                        d2 += d * d;
                    }
                    double w = std::exp(-d2 * inv);
                    if (mask[size_t(yy * W + xx)])
                        w_anom += w;
                    else
                        w_norm += w;
                }
            }
            out[size_t(y * W + x)] = w_anom > w_norm ? 1 : 0;
        }
    });
    return out;
}

// --- PGM image IO -----------------------------------------------------------

inline void write_pgm(const std::string& path, const std::vector<uint8_t>& gray, int64_t H,
                      int64_t W) {
    FMF_CHECK(int64_t(gray.size()) == H * W, "pgm payload size mismatch");
    detail_io::File f(path, "wb");
    char head[64];
    int n = std::snprintf(head, sizeof head, "P5\n%lld %lld\n255\n", (long long)W, (long long)H);
    detail_io::write_bytes(f.f, head, size_t(n));
    detail_io::write_bytes(f.f, gray.data(), gray.size());
}

inline void write_mask_pgm(const std::string& path, const std::vector<uint8_t>& mask, int64_t H,
                           int64_t W) {
    std::vector<uint8_t> gray(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) gray[i] = mask[i] ? 255 : 0;
    write_pgm(path, gray, H, W);
}

inline std::vector<uint8_t> read_pgm(const std::string& path, int64_t& H, int64_t& W) {
    detail_io::File f(path, "rb");
    char magic[3] = {0, 0, 0};
    long long w = 0, h = 0, maxval = 0;
    FMF_CHECK(std::fscanf(f.f, "%2s %lld %lld %lld", magic, &w, &h, &maxval) == 4 &&
                  std::string(magic) == "P5" && maxval == 255,
              path << " is not an 8-bit P5 pgm");
    std::fgetc(f.f);  // single whitespace after header
    H = h;
    W = w;
    std::vector<uint8_t> gray(size_t(H * W));
    detail_io::read_bytes(f.f, gray.data(), gray.size());
    return gray;
}

// Grayscale frame with the mask burned in at full brightness.
inline std::vector<uint8_t> overlay_mask(const Tensor<float>& frame_rgb,
                                         const std::vector<uint8_t>& mask) {
    FMF_CHECK(frame_rgb.rank() == 3 && frame_rgb.shape()[2] == 3, "expected [H, W, 3] frame");
    int64_t H = frame_rgb.shape()[0], W = frame_rgb.shape()[1];
    FMF_CHECK(int64_t(mask.size()) == H * W, "mask extents do not match frame");
    std::vector<uint8_t> gray(size_t(H * W));
    const float* p = frame_rgb.data();
    for (int64_t i = 0; i < H * W; ++i) {
        double lum = 0.299 * p[i * 3] + 0.587 * p[i * 3 + 1] + 0.114 * p[i * 3 + 2];
        gray[size_t(i)] = mask[size_t(i)] ? 255 : uint8_t(std::clamp(lum, 0.0, 1.0) * 255.0);
    }
    return gray;
}

}  // namespace fmf
