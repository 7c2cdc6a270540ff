#include "kvreuse/common.hpp"

#include <cmath>

namespace kvreuse {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
    require(a.cols == b.rows, "matmul: inner dimensions differ");
    out.rows = a.rows;
    out.cols = b.cols;
    out.data.assign(static_cast<size_t>(a.rows) * b.cols, 0.0f);
    for (int i = 0; i < a.rows; ++i) {
        const float* arow = a.row(i);
        float* orow = out.row(i);
        for (int k = 0; k < a.cols; ++k) {
            const float aik = arow[k];
            const float* brow = b.row(k);
            for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out;
    matmul(a, b, out);
    return out;
}

void matvec_accumulate(std::span<const float> x, const Matrix& w, std::span<float> y) {
    require(static_cast<int>(x.size()) == w.rows, "matvec: length mismatch");
    require(static_cast<int>(y.size()) == w.cols, "matvec: output length mismatch");
    for (int k = 0; k < w.rows; ++k) {
        const float xk = x[k];
        const float* wrow = w.row(k);
        for (int j = 0; j < w.cols; ++j) y[j] += xk * wrow[j];
    }
}

float Rng::next_normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller on canonical uniforms; u clamped away from 0 for the log.
    float u = next_uniform();
    float v = next_uniform();
    if (u < 1e-12f) u = 1e-12f;
    const float r = std::sqrt(-2.0f * std::log(u));
    const float theta = 6.28318530717958647692f * v;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    Rng mix(seed ^ (0x632be59bd9b4e019ULL * (stream + 1)));
    return mix.next_u64();
}

}  // namespace kvreuse
