#pragma once

#include <cmath>
#include <cstring>
#include <span>
#include <vector>

#include "seqfm/common.hpp"
#include "seqfm/rng.hpp"

namespace seqfm {

// Row-major float matrix. The only tensor type in the project; sequences of
// vectors are rows. Deterministic summation order everywhere.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<float> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0f) {}

    float* row(int r) { return a.data() + static_cast<size_t>(r) * cols; }
    const float* row(int r) const { return a.data() + static_cast<size_t>(r) * cols; }
    std::span<float> row_span(int r) { return {row(r), static_cast<size_t>(cols)}; }
    std::span<const float> row_span(int r) const { return {row(r), static_cast<size_t>(cols)}; }

    float& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    float at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }

    size_t size() const { return a.size(); }
    void zero() { std::fill(a.begin(), a.end(), 0.0f); }

    static Mat gaussian(int r, int c, Rng& rng, float stddev) {
        Mat m(r, c);
        for (auto& v : m.a) v = static_cast<float>(rng.normal() * stddev);
        return m;
    }
};

using Vec = std::vector<float>;

inline float dot(const float* x, const float* y, int n) {
    float s = 0.0f;
    for (int i = 0; i < n; i++) s += x[i] * y[i];
    return s;
}

inline void axpy(float alpha, const float* x, float* y, int n) {
    for (int i = 0; i < n; i++) y[i] += alpha * x[i];
}

inline float l2_norm(const float* x, int n) {
    float s = 0.0f;
    for (int i = 0; i < n; i++) s += x[i] * x[i];
    return std::sqrt(s);
}

// C = A * B, A: m x k, B: k x n. ikj loop order so the inner loop is a
// vectorizable axpy over contiguous rows.
inline void matmul(const Mat& A, const Mat& B, Mat& C) {
    SEQFM_CHECK(A.cols == B.rows, "matmul: inner dims mismatch " << A.cols << " vs " << B.rows);
    C.rows = A.rows;
    C.cols = B.cols;
    C.a.assign(static_cast<size_t>(C.rows) * C.cols, 0.0f);
    for (int i = 0; i < A.rows; i++) {
        const float* arow = A.row(i);
        float* crow = C.row(i);
        for (int k = 0; k < A.cols; k++) {
            float av = arow[k];
            if (av == 0.0f) continue;
            const float* brow = B.row(k);
            for (int j = 0; j < B.cols; j++) crow[j] += av * brow[j];
        }
    }
}

// C += A^T * B, A: m x k, B: m x n, C: k x n. Gradient accumulation form.
inline void matmul_at_b_acc(const Mat& A, const Mat& B, Mat& C) {
    SEQFM_CHECK(A.rows == B.rows, "matmul_at_b_acc: row mismatch");
    SEQFM_CHECK(C.rows == A.cols && C.cols == B.cols, "matmul_at_b_acc: bad C shape");
    for (int i = 0; i < A.rows; i++) {
        const float* arow = A.row(i);
        const float* brow = B.row(i);
        for (int k = 0; k < A.cols; k++) {
            float av = arow[k];
            if (av == 0.0f) continue;
            axpy(av, brow, C.row(k), B.cols);
        }
    }
}

// C = A * B^T, A: m x k, B: n x k, C: m x n. Used for dx = dy * W^T.
inline void matmul_a_bt(const Mat& A, const Mat& B, Mat& C) {
    SEQFM_CHECK(A.cols == B.cols, "matmul_a_bt: inner dims mismatch");
    C.rows = A.rows;
    C.cols = B.rows;
    C.a.assign(static_cast<size_t>(C.rows) * C.cols, 0.0f);
    for (int i = 0; i < A.rows; i++) {
        const float* arow = A.row(i);
        float* crow = C.row(i);
        for (int j = 0; j < B.rows; j++) crow[j] = dot(arow, B.row(j), A.cols);
    }
}

} // namespace seqfm
