#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fmf {

using Shape = std::vector<int64_t>;

// All numeric buffers share one alignment so vectorized kernel dispatch (and
// therefore accumulation order) is a pure function of shape, never of where
// the allocator happened to place a buffer. This is what makes forwards
// bit-deterministic.
inline constexpr size_t kBufferAlign = 64;

template <typename T>
struct AlignedAllocator {
    using value_type = T;

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kBufferAlign)));
    }
    void deallocate(T* p, size_t) noexcept { ::operator delete(p, std::align_val_t(kBufferAlign)); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const {
        return true;
    }
    template <class U>
    bool operator!=(const AlignedAllocator<U>&) const {
        return false;
    }
};

template <typename T>
using AVec = std::vector<T, AlignedAllocator<T>>;

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

#define FMF_CHECK(cond, msg)                                                  \
    do {                                                                      \
        if (!(cond)) {                                                        \
            std::ostringstream oss_;                                          \
            oss_ << msg;                                                      \
            ::fmf::fail(oss_.str());                                          \
        }                                                                     \
    } while (0)

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += "x";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

// 64-bit mix used to derive independent seed streams from (base, tag) pairs.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline uint64_t seed_stream(uint64_t base, uint64_t tag) {
    return splitmix64(base ^ splitmix64(tag));
}

// Deterministic RNG. The uniform/gaussian mappings are written out explicitly
// (rather than using std::*_distribution) so that byte streams are identical
// across standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0xA5A5A5A5DEADBEEFULL)) {}

    uint64_t next_u64() {
        // xorshift64* keeps the generator self-contained and bit-stable.
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545F4914F6CDD1DULL;
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * (1.0 / 9007199254740992.0); }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int64_t uniform_int(int64_t n) {
        FMF_CHECK(n > 0, "uniform_int: n must be positive");
        return int64_t(next_u64() % uint64_t(n));
    }

    // Standard normal via Box-Muller (explicit formula, deterministic).
    double gaussian() {
        if (has_cache_) {
            has_cache_ = false;
            return cache_;
        }
        double u1 = (double(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
        double u2 = double(next_u64() >> 11) * (1.0 / 9007199254740992.0);
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586 * u2;
        cache_ = r * std::sin(a);
        has_cache_ = true;
        return r * std::cos(a);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = int64_t(last - first);
        for (int64_t i = n - 1; i > 0; --i) {
            int64_t j = uniform_int(i + 1);
            std::swap(first[i], first[j]);
        }
    }

private:
    uint64_t state_;
    double cache_ = 0.0;
    bool has_cache_ = false;
};

// Worker cap: FMF_THREADS env var, else hardware concurrency.
inline int max_threads() {
    if (const char* env = std::getenv("FMF_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

// Index-sharded parallel loop. Each index is processed exactly once and
// writes only to its own slot, so results do not depend on thread count.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    int nt = std::min<int64_t>(max_threads(), n);
    if (nt <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(nt);
    for (int t = 0; t < nt; ++t) {
        pool.emplace_back([&, t]() {
            for (int64_t i = t; i < n; i += nt) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

// Little-endian scalar IO for the binary container/checkpoint formats.
// The host is assumed little-endian (checked once at startup of any IO).
inline void ensure_little_endian() {
    uint32_t probe = 1;
    uint8_t b;
    std::memcpy(&b, &probe, 1);
    FMF_CHECK(b == 1, "big-endian hosts are not supported by the binary formats");
}

}  // namespace fmf
