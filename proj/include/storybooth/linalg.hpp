#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "storybooth/errors.hpp"

namespace storybooth {

// Dense row-major matrix of doubles. Sized for desk-scale experiments; no
// attempt at blocking or vectorization.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

    double& operator()(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
    }
};

// B x N x C tensor, row-major with frame-major flattening: flat row l*N + i
// holds frame l, token i.
struct Tensor3 {
    int frames = 0;  // B
    int tokens = 0;  // N
    int channels = 0; // C
    std::vector<double> data;

    Tensor3() = default;
    Tensor3(int b, int n, int c, double fill = 0.0)
        : frames(b), tokens(n), channels(c),
          data(static_cast<std::size_t>(b) * n * c, fill) {}

    double& operator()(int l, int i, int c) {
        return data[(static_cast<std::size_t>(l) * tokens + i) * channels + c];
    }
    double operator()(int l, int i, int c) const {
        return data[(static_cast<std::size_t>(l) * tokens + i) * channels + c];
    }

    // View of one frame as an N x C matrix (copy; sizes are small).
    Matrix frame(int l) const {
        Matrix m(tokens, channels);
        for (int i = 0; i < tokens; ++i)
            for (int c = 0; c < channels; ++c)
                m(i, c) = (*this)(l, i, c);
        return m;
    }

    // Frame-major flatten to a (B*N) x C matrix.
    Matrix flatten() const {
        Matrix m(frames * tokens, channels);
        m.data = data;
        return m;
    }

    static Tensor3 from_flat(const Matrix& m, int frames) {
        if (frames <= 0 || m.rows % frames != 0) {
            throw UsageError("from_flat: row count not divisible by frame count");
        }
        Tensor3 t(frames, m.rows / frames, m.cols);
        t.data = m.data;
        return t;
    }

    friend bool operator==(const Tensor3& a, const Tensor3& b) {
        return a.frames == b.frames && a.tokens == b.tokens && a.channels == b.channels &&
               a.data == b.data;
    }
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw UsageError("matmul: inner dimensions disagree");
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            for (int j = 0; j < b.cols; ++j) {
                out(i, j) += aik * b(k, j);
            }
        }
    }
    return out;
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool all_finite(const Matrix& m) { return all_finite(m.data); }
inline bool all_finite(const Tensor3& t) { return all_finite(t.data); }

} // namespace storybooth
