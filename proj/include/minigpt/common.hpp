#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace minigpt {

// ---------------------------------------------------------------------------
// Error taxonomy. Every failure mode the library reports maps to one class;
// the CLI turns the class into a distinct process exit code.
// ---------------------------------------------------------------------------
enum class ErrorClass : uint8_t {
    config,       // bad option values, unusable configuration
    io,           // file open/read/write failure
    format,       // parse failure, bad magic, version or schema mismatch, truncation
    dimension,    // tensor shape mismatch
    index,        // id / index out of range
    numeric,      // NaN or Inf produced where finite values are required
    fingerprint,  // artifact does not match the checkpoint it claims to describe
    evaluation,   // dataset empty or unusable for the requested measurement
    contract,     // caller broke an API precondition
};

const char* error_class_name(ErrorClass c);

class Error : public std::runtime_error {
public:
    Error(ErrorClass cls, const std::string& message)
        : std::runtime_error(message), cls_(cls) {}

    ErrorClass cls() const { return cls_; }

private:
    ErrorClass cls_;
};

[[noreturn]] inline void fail(ErrorClass cls, const std::string& message) {
    throw Error(cls, message);
}

// ---------------------------------------------------------------------------
// FNV-1a 64-bit. Used for checkpoint fingerprints and manifest input hashes.
// ---------------------------------------------------------------------------
class Fnv1a64 {
public:
    void update(const void* data, size_t n);
    uint64_t digest() const { return state_; }

private:
    uint64_t state_ = 0xcbf29ce484222325ull;
};

uint64_t fnv1a64(std::span<const uint8_t> bytes);
std::string hex64(uint64_t v);

// ---------------------------------------------------------------------------
// Seeded random source. mt19937_64 raw draws are portable; the float helpers
// below are written out explicitly so the same seed gives the same stream on
// every standard library (std::*_distribution is implementation-defined).
// ---------------------------------------------------------------------------
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1) with 53 random bits
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [0, n), n > 0, by rejection
    uint64_t below(uint64_t n);

    // standard normal via Box-Muller (no cached spare; one pair per call, first used)
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates, deterministic for a given seed state
    template <class T>
    void shuffle(std::span<T> items) {
        for (size_t i = items.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Small shared helpers
// ---------------------------------------------------------------------------
bool is_valid_utf8(std::string_view s);
std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);  // throws Error(format) on bad input

}  // namespace minigpt
