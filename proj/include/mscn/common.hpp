#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mscn {

/// Base class for all library errors. The CLI maps subclasses onto exit
/// codes: numeric failures exit 3, everything else here exits 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct UsageError : Error { using Error::Error; };
struct DegenerateInputError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct ValidationError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };

/// MSCN_DETERMINISTIC=1 forces bitwise-reproducible outputs. The only
/// observable effect is that wall-time fields are reported as 0 so report
/// files compare byte-for-byte between runs; all numeric work is already
/// deterministic regardless of this flag.
inline bool deterministic_mode() {
    const char* v = std::getenv("MSCN_DETERMINISTIC");
    return v != nullptr && std::string(v) == "1";
}

/// Worker cap for the few embarrassingly parallel paths (evaluation,
/// gradient-check probes). MSCN_THREADS overrides; 0/unset means one worker
/// per hardware thread.
inline unsigned env_threads() {
    unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const char* v = std::getenv("MSCN_THREADS");
    if (v == nullptr) return hw;
    long n = std::strtol(v, nullptr, 10);
    if (n <= 0) return hw;
    return static_cast<unsigned>(std::min<long>(n, 256));
}

/// Runs fn(i) for i in [0, n). Each index must write only its own output
/// slot, which keeps results bitwise independent of the worker count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    unsigned workers = std::min<std::size_t>(env_threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

/// Compensated accumulator; keeps pairwise metric sums stable enough that
/// permuting the input order moves results by well under 1e-12.
class KahanSum {
public:
    void add(double x) {
        double y = x - c_;
        double t = s_ + y;
        c_ = (t - s_) - y;
        s_ = t;
    }
    double value() const { return s_; }

private:
    double s_ = 0.0;
    double c_ = 0.0;
};

inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace mscn
