#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvreuse {

/// Invalid user-supplied configuration (bad dimensions, missing options).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or truncated file contents.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Violated API precondition or internal invariant.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ContractError(msg);
}

inline void require_config(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

/// Dense row-major float matrix. The only tensor type in the project;
/// everything is float32 storage.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {}

    float* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const float* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    std::span<float> row_span(int r) { return {row(r), static_cast<size_t>(cols)}; }
    std::span<const float> row_span(int r) const { return {row(r), static_cast<size_t>(cols)}; }

    float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
};

/// out[r] = a.row(r) * b for every row of a; b is (a.cols x b.cols).
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
Matrix matmul(const Matrix& a, const Matrix& b);

/// y += x * w where x is a single row vector of length w.rows.
void matvec_accumulate(std::span<const float> x, const Matrix& w, std::span<float> y);

/// Deterministic RNG: splitmix64 stream with canonical float helpers.
/// The standard <random> distributions are implementation-defined, which
/// would make golden files compiler-dependent; this one is portable.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    float next_uniform() {
        return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
    }

    /// Standard normal via Box-Muller.
    float next_normal();

    /// Uniform integer in [lo, hi] inclusive.
    int next_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    float spare_ = 0.0f;
};

/// Mixes a label into a seed so sub-streams (noise, textures, text ids)
/// never alias each other.
uint64_t derive_seed(uint64_t seed, uint64_t stream);

}  // namespace kvreuse
