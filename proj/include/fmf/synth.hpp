#pragma once

#include "fmf/persist.hpp"
#include "fmf/tensor.hpp"

namespace fmf {

// One generated furnace episode. All stochastic choices derive from `seed`,
// so a scenario value identifies a sample bit-exactly.
struct Scenario {
    uint64_t seed = 0;
    int64_t frames = 8, H = 64, W = 64, T_c = 64;

    bool anomaly = false;
    int64_t onset = 0, apex = 0, offset = 0;  // video frame indices; may exceed the window

    double cx0 = 0.5, cy0 = 0.5, cx1 = 0.5, cy1 = 0.5;  // blob center drift path, unit coords
    double peak = 0.8;                                  // blob intensity at the apex
    double radius = 10.0;                               // gaussian radius in pixels

    double amp[3] = {0.9, 1.0, 1.1};  // per-phase current amplitude
    double cycles = 6.0;              // current oscillations per window
    double noise_sigma = 0.02;        // video pixel noise
    double current_noise = 0.05;
    double drift_factor = 2.0;   // anomaly amplitude drift on the current
    double extra_noise = 0.12;   // anomaly extra current variance (stddev)
    double occlusion_prob = 0.0;  // chance this sample is hazed
    double haze_strength = 0.9;
    double flicker = 0.06;  // flame flicker amplitude
};

struct SampleTriple {
    Tensor<float> video;    // frames x H x W x 3
    Tensor<float> current;  // T_c x 3
    std::vector<uint8_t> mask;  // H*W, anomaly pixels of the final frame
    uint8_t label = 0;          // aggregated class (1 = abnormal)
    bool occluded = false;
};

namespace synth_detail {

// Low-frequency field: a coarse random grid bilinearly upsampled, in [0,1].
inline std::vector<double> smooth_field(Rng& rng, int64_t H, int64_t W, int64_t coarse) {
    std::vector<double> grid(size_t(coarse * coarse));
    for (auto& v : grid) v = rng.uniform();
    std::vector<double> out(size_t(H * W));
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double fy = coarse > 1 ? double(y) * double(coarse - 1) / double(H - 1) : 0.0;
            double fx = coarse > 1 ? double(x) * double(coarse - 1) / double(W - 1) : 0.0;
            int64_t y0 = std::min<int64_t>(int64_t(fy), coarse - 2);
            int64_t x0 = std::min<int64_t>(int64_t(fx), coarse - 2);
            double wy = fy - double(y0), wx = fx - double(x0);
            double v = grid[size_t(y0 * coarse + x0)] * (1 - wy) * (1 - wx) +
                       grid[size_t(y0 * coarse + x0 + 1)] * (1 - wy) * wx +
                       grid[size_t((y0 + 1) * coarse + x0)] * wy * (1 - wx) +
                       grid[size_t((y0 + 1) * coarse + x0 + 1)] * wy * wx;
            out[size_t(y * W + x)] = v;
        }
    return out;
}

// Anomaly intensity envelope: linear ramp onset->apex, linear decay
// apex->offset, zero outside, evaluated at a (possibly fractional) frame time.
inline double episode_ramp(const Scenario& s, double t) {
    if (!s.anomaly || t < double(s.onset) || t > double(s.offset)) return 0.0;
    if (t <= double(s.apex))
        return s.apex == s.onset ? 1.0 : (t - double(s.onset)) / double(s.apex - s.onset);
    return s.offset == s.apex ? 1.0 : 1.0 - (t - double(s.apex)) / double(s.offset - s.apex);
}

}  // namespace synth_detail

// Pure function of the scenario: identical fields give identical bytes.
inline SampleTriple generate(const Scenario& s) {
    FMF_CHECK(s.frames >= 1 && s.H >= 2 && s.W >= 2 && s.T_c >= 2, "scenario extents too small");
    if (s.anomaly)
        FMF_CHECK(s.onset < s.apex && s.apex < s.offset,
                  "invalid episode ordering: onset " << s.onset << ", apex " << s.apex << ", offset "
                                                     << s.offset);
    Rng field_rng(seed_stream(s.seed, 1));
    Rng noise_rng(seed_stream(s.seed, 2));
    Rng current_rng(seed_stream(s.seed, 3));
    Rng haze_rng(seed_stream(s.seed, 4));
    Rng flick_rng(seed_stream(s.seed, 5));

    SampleTriple out;
    out.video = Tensor<float>({s.frames, s.H, s.W, 3});
    out.current = Tensor<float>({s.T_c, 3});
    out.mask.assign(size_t(s.H * s.W), 0);

    auto bg = synth_detail::smooth_field(field_rng, s.H, s.W, 4);
    bool hazed = s.occlusion_prob > 0 && haze_rng.uniform() < s.occlusion_prob;
    std::vector<double> haze_field;
    if (hazed) haze_field = synth_detail::smooth_field(haze_rng, s.H, s.W, 3);
    out.occluded = hazed;

    const double blob_tint[3] = {1.0, 0.55, 0.25};
    const double bright[3] = {0.95, 0.93, 0.90};
    double denom_t = s.frames > 1 ? double(s.frames - 1) : 1.0;
    float* vp = out.video.data();
    for (int64_t t = 0; t < s.frames; ++t) {
        double u = double(t) / denom_t;
        double ramp = synth_detail::episode_ramp(s, double(t));
        double cx = (s.cx0 + (s.cx1 - s.cx0) * u) * double(s.W - 1);
        double cy = (s.cy0 + (s.cy1 - s.cy0) * u) * double(s.H - 1);
        double flick = 1.0 + s.flicker * std::sin(6.283185307179586 * (2.3 * u + 0.37)) +
                       0.5 * s.flicker * flick_rng.gaussian();
        for (int64_t y = 0; y < s.H; ++y)
            for (int64_t x = 0; x < s.W; ++x) {
                double base = (0.22 + 0.28 * bg[size_t(y * s.W + x)]) * flick;
                double dx = double(x) - cx, dy = double(y) - cy;
                double blob = ramp * s.peak *
                              std::exp(-(dx * dx + dy * dy) / (2.0 * s.radius * s.radius));
                for (int64_t c = 0; c < 3; ++c) {
                    double v = base * (c == 0 ? 1.05 : (c == 1 ? 1.0 : 0.92)) +
                               blob * blob_tint[c] + s.noise_sigma * noise_rng.gaussian();
                    if (hazed) {
                        // mist covers the whole frame; the low-frequency field
                        // only modulates between heavy and near-total cover
                        double f = s.haze_strength * (0.70 + 0.30 * haze_field[size_t(y * s.W + x)]);
                        v = v * (1.0 - f) + bright[c] * f;
                    }
                    vp[((t * s.H + y) * s.W + x) * 3 + c] = float(std::clamp(v, 0.0, 1.0));
                }
            }
    }

    // current: three phase-shifted sinusoids; the anomaly interval drifts the
    // amplitude and adds variance. Timeline is aligned so the final current
    // sample and the final frame share the same instant.
    float* cp = out.current.data();
    double denom_c = s.T_c > 1 ? double(s.T_c - 1) : 1.0;
    for (int64_t j = 0; j < s.T_c; ++j) {
        double u = double(j) / denom_c;
        double ramp = synth_detail::episode_ramp(s, u * denom_t);
        for (int64_t p = 0; p < 3; ++p) {
            double phase = 6.283185307179586 * (s.cycles * u + double(p) / 3.0);
            double a = s.amp[p] * (1.0 + (s.drift_factor - 1.0) * ramp);
            double v = a * std::sin(phase) + s.current_noise * current_rng.gaussian() +
                       s.extra_noise * ramp * current_rng.gaussian();
            cp[j * 3 + p] = float(v);
        }
    }

    // mask: half-max support of the final-frame blob
    double final_ramp = synth_detail::episode_ramp(s, double(s.frames - 1));
    if (s.anomaly && final_ramp > 0.0) {
        double u = 1.0;
        double cx = (s.cx0 + (s.cx1 - s.cx0) * u) * double(s.W - 1);
        double cy = (s.cy0 + (s.cy1 - s.cy0) * u) * double(s.H - 1);
        for (int64_t y = 0; y < s.H; ++y)
            for (int64_t x = 0; x < s.W; ++x) {
                double dx = double(x) - cx, dy = double(y) - cy;
                if (std::exp(-(dx * dx + dy * dy) / (2.0 * s.radius * s.radius)) >= 0.5)
                    out.mask[size_t(y * s.W + x)] = 1;
            }
    }
    for (uint8_t m : out.mask)
        if (m) out.label = 1;
    return out;
}

struct DatasetConfig {
    int64_t n = 256;
    double balance = 0.5;       // abnormal fraction
    double occlusion = 0.0;     // haze probability (applies to every sample)
    double haze_strength = 0.9;
    int64_t frames = 8, H = 64, W = 64, T_c = 64;
    uint64_t seed = 0;
    std::string role = "train";  // seeds the per-sample stream: train/test are disjoint
};

inline uint64_t role_tag(const std::string& role) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : role) h = (h ^ uint64_t(uint8_t(c))) * 1099511628211ULL;
    return h;
}

inline Scenario scenario_for(const DatasetConfig& cfg, int64_t index, bool abnormal) {
    Scenario s;
    s.seed = seed_stream(cfg.seed ^ role_tag(cfg.role), uint64_t(index));
    Rng rng(seed_stream(s.seed, 7));
    s.frames = cfg.frames;
    s.H = cfg.H;
    s.W = cfg.W;
    s.T_c = cfg.T_c;
    s.anomaly = abnormal;
    s.occlusion_prob = cfg.occlusion;
    s.haze_strength = cfg.haze_strength;
    s.radius = rng.uniform(0.12, 0.20) * double(std::min(cfg.H, cfg.W));
    s.peak = rng.uniform(0.65, 0.95);
    s.cx0 = rng.uniform(0.30, 0.70);
    s.cy0 = rng.uniform(0.30, 0.70);
    s.cx1 = std::clamp(s.cx0 + rng.uniform(-0.12, 0.12), 0.25, 0.75);
    s.cy1 = std::clamp(s.cy0 + rng.uniform(-0.12, 0.12), 0.25, 0.75);
    for (int p = 0; p < 3; ++p) s.amp[p] = rng.uniform(0.8, 1.2);
    s.cycles = rng.uniform(4.5, 7.5);
    s.flicker = rng.uniform(0.03, 0.08);
    if (abnormal) {
        // the final frame lands between onset and apex with a strong ramp
        double T = double(cfg.frames - 1);
        s.onset = int64_t(rng.uniform(0.05, 0.45) * T);
        s.apex = cfg.frames - 1 + int64_t(rng.uniform(0.0, 0.5 * T)) + 1;
        s.offset = s.apex + std::max<int64_t>(2, int64_t(rng.uniform(0.5, 1.5) * T)) + 1;
    }
    return s;
}

// Balanced sample list: abnormal count is round(n * balance), order shuffled
// deterministically.
inline std::vector<SampleTriple> make_dataset(const DatasetConfig& cfg) {
    FMF_CHECK(cfg.n >= 2, "dataset needs at least 2 samples");
    int64_t n_abn = int64_t(std::llround(double(cfg.n) * cfg.balance));
    std::vector<uint8_t> flags(size_t(cfg.n), 0);
    for (int64_t i = 0; i < n_abn; ++i) flags[size_t(i)] = 1;
    Rng order(seed_stream(cfg.seed ^ role_tag(cfg.role), 0xABCD));
    order.shuffle(flags.begin(), flags.end());
    std::vector<SampleTriple> samples{size_t(cfg.n)};
    parallel_for(cfg.n, [&](int64_t i) {
        samples[size_t(i)] = generate(scenario_for(cfg, i, flags[size_t(i)] != 0));
    });
    return samples;
}

// --- FMFB container ---------------------------------------------------------

inline constexpr uint32_t kContainerVersion = 1;

inline void write_container(const std::string& path, const std::vector<SampleTriple>& samples) {
    ensure_little_endian();
    detail_io::File out(path, "wb");
    detail_io::write_bytes(out.f, "FMFB", 4);
    detail_io::write_u32(out.f, kContainerVersion);
    detail_io::write_u32(out.f, uint32_t(samples.size()));
    for (const auto& sm : samples) {
        uint32_t tv = uint32_t(sm.video.shape()[0]), h = uint32_t(sm.video.shape()[1]),
                 w = uint32_t(sm.video.shape()[2]);
        detail_io::write_u32(out.f, tv);
        detail_io::write_u32(out.f, h);
        detail_io::write_u32(out.f, w);
        detail_io::write_bytes(out.f, sm.video.data(), size_t(sm.video.size()) * 4);
        detail_io::write_u32(out.f, uint32_t(sm.current.shape()[0]));
        detail_io::write_bytes(out.f, sm.current.data(), size_t(sm.current.size()) * 4);
        detail_io::write_bytes(out.f, sm.mask.data(), sm.mask.size());
        detail_io::write_bytes(out.f, &sm.label, 1);
    }
}

inline std::vector<SampleTriple> read_container(const std::string& path) {
    ensure_little_endian();
    detail_io::File in(path, "rb");
    char magic[4];
    detail_io::read_bytes(in.f, magic, 4);
    FMF_CHECK(std::memcmp(magic, "FMFB", 4) == 0, path << " is not a sample container");
    uint32_t version = detail_io::read_u32(in.f);
    FMF_CHECK(version == kContainerVersion, "unsupported container version " << version);
    uint32_t count = detail_io::read_u32(in.f);
    std::vector<SampleTriple> samples(count);
    for (uint32_t i = 0; i < count; ++i) {
        auto& sm = samples[i];
        int64_t tv = detail_io::read_u32(in.f);
        int64_t h = detail_io::read_u32(in.f);
        int64_t w = detail_io::read_u32(in.f);
        sm.video = Tensor<float>({tv, h, w, 3});
        detail_io::read_bytes(in.f, sm.video.data(), size_t(sm.video.size()) * 4);
        int64_t tc = detail_io::read_u32(in.f);
        sm.current = Tensor<float>({tc, 3});
        detail_io::read_bytes(in.f, sm.current.data(), size_t(sm.current.size()) * 4);
        sm.mask.resize(size_t(h * w));
        detail_io::read_bytes(in.f, sm.mask.data(), sm.mask.size());
        detail_io::read_bytes(in.f, &sm.label, 1);
    }
    return samples;
}

// Provenance sidecar: generation config plus label statistics.
inline void write_sidecar(const std::string& container_path, const DatasetConfig& cfg,
                          const std::vector<SampleTriple>& samples) {
    int64_t abn = 0, hazed = 0, hazed_abn = 0;
    for (const auto& s : samples) {
        abn += s.label;
        hazed += s.occluded ? 1 : 0;
        hazed_abn += (s.occluded && s.label) ? 1 : 0;
    }
    KvList kv;
    kv.emplace_back("format", "FMFB");
    kv.emplace_back("n", std::to_string(cfg.n));
    kv.emplace_back("balance", std::to_string(cfg.balance));
    kv.emplace_back("occlusion", std::to_string(cfg.occlusion));
    kv.emplace_back("haze_strength", std::to_string(cfg.haze_strength));
    kv.emplace_back("frames", std::to_string(cfg.frames));
    kv.emplace_back("H", std::to_string(cfg.H));
    kv.emplace_back("W", std::to_string(cfg.W));
    kv.emplace_back("T_c", std::to_string(cfg.T_c));
    kv.emplace_back("seed", std::to_string(cfg.seed));
    kv.emplace_back("role", cfg.role);
    kv.emplace_back("samples_per_second", "25");
    kv.emplace_back("stat.normal", std::to_string(int64_t(samples.size()) - abn));
    kv.emplace_back("stat.abnormal", std::to_string(abn));
    kv.emplace_back("stat.total", std::to_string(samples.size()));
    kv.emplace_back("stat.hazed", std::to_string(hazed));
    kv.emplace_back("stat.hazed_abnormal", std::to_string(hazed_abn));
    detail_io::File out(container_path + ".meta", "wb");
    std::string text = kv_serialize(kv);
    detail_io::write_bytes(out.f, text.data(), text.size());
}

// --- raw ingestion ----------------------------------------------------------

struct RawSpec {
    int64_t samples = 0, T_v = 0, H = 0, W = 0, T_c = 0;
};

struct CropRect {
    int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
    int64_t width() const { return x1 - x0; }
    int64_t height() const { return y1 - y0; }
};

struct NormStats {
    double pixel_mean[3] = {0, 0, 0};
    double pixel_std[3] = {1, 1, 1};
    double current_mean[3] = {0, 0, 0};
    double current_std[3] = {1, 1, 1};
};

// Raw tensors in, standardized sample stream out: per-frame ROI crop, pixel
// scale to [0,1] (8-bit range assumed), per-channel standardization; current
// z-scored per phase with the supplied training statistics.
inline std::vector<SampleTriple> ingest_raw(const std::string& video_path,
                                            const std::string& current_path, const RawSpec& spec,
                                            const CropRect& crop, const NormStats& stats) {
    FMF_CHECK(spec.samples >= 1, "raw spec must declare at least one sample");
    FMF_CHECK(crop.x0 >= 0 && crop.y0 >= 0 && crop.x1 <= spec.W && crop.y1 <= spec.H &&
                  crop.width() >= 1 && crop.height() >= 1,
              "crop rectangle outside the declared frame bounds");
    ensure_little_endian();
    int64_t frame_elems = spec.T_v * spec.H * spec.W * 3;
    int64_t cur_elems = spec.T_c * 3;
    {
        detail_io::File vf(video_path, "rb");
        std::fseek(vf.f, 0, SEEK_END);
        FMF_CHECK(std::ftell(vf.f) == long(spec.samples * frame_elems * 4),
                  "video file size does not match the declared extents");
        detail_io::File cf(current_path, "rb");
        std::fseek(cf.f, 0, SEEK_END);
        FMF_CHECK(std::ftell(cf.f) == long(spec.samples * cur_elems * 4),
                  "current file size does not match the declared extents");
    }
    detail_io::File vf(video_path, "rb");
    detail_io::File cf(current_path, "rb");
    std::vector<SampleTriple> out(size_t(spec.samples));
    std::vector<float> vbuf(size_t(frame_elems), 0.0f), cbuf(size_t(cur_elems), 0.0f);
    int64_t ch = crop.height(), cw = crop.width();
    for (int64_t i = 0; i < spec.samples; ++i) {
        detail_io::read_bytes(vf.f, vbuf.data(), vbuf.size() * 4);
        detail_io::read_bytes(cf.f, cbuf.data(), cbuf.size() * 4);
        auto& sm = out[size_t(i)];
        sm.video = Tensor<float>({spec.T_v, ch, cw, 3});
        for (int64_t t = 0; t < spec.T_v; ++t)
            for (int64_t y = 0; y < ch; ++y)
                for (int64_t x = 0; x < cw; ++x)
                    for (int64_t c = 0; c < 3; ++c) {
                        double v = vbuf[size_t(((t * spec.H + crop.y0 + y) * spec.W + crop.x0 + x) *
                                               3 + c)] / 255.0;
                        sm.video[((t * ch + y) * cw + x) * 3 + c] =
                            float((v - stats.pixel_mean[c]) / stats.pixel_std[c]);
                    }
        sm.current = Tensor<float>({spec.T_c, 3});
        for (int64_t j = 0; j < spec.T_c; ++j)
            for (int64_t p = 0; p < 3; ++p)
                sm.current[j * 3 + p] = float((double(cbuf[size_t(j * 3 + p)]) -
                                               stats.current_mean[p]) / stats.current_std[p]);
        sm.mask.assign(size_t(ch * cw), 0);
        sm.label = 0;
    }
    return out;
}

}  // namespace fmf
