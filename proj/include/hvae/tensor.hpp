#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace hvae {

// Dense row-major matrix. Vectors are [1, n] or [n, 1]; scalars are [1, 1].
template <typename T>
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<T> v;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, T(0)) {}
    Tensor(int r, int c, std::vector<T> data) : rows(r), cols(c), v(std::move(data)) {
        if (v.size() != static_cast<size_t>(r) * c)
            throw std::invalid_argument("tensor: data size does not match shape");
    }

    T& operator()(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    T operator()(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    T* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    const T* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
    size_t size() const { return v.size(); }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    void fill(T x) { std::fill(v.begin(), v.end(), x); }

    bool all_finite() const {
        for (T x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }
};

template <typename T>
Tensor<T> scalar_tensor(T x) {
    Tensor<T> t(1, 1);
    t.v[0] = x;
    return t;
}

// C += A * B
template <typename T>
void matmul_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    assert(a.cols == b.rows && a.rows == c.rows && b.cols == c.cols);
    const int n = a.rows, k = a.cols, m = b.cols;
    for (int i = 0; i < n; ++i) {
        const T* ar = a.row(i);
        T* cr = c.row(i);
        for (int p = 0; p < k; ++p) {
            const T s = ar[p];
            const T* br = b.row(p);
            for (int j = 0; j < m; ++j) cr[j] += s * br[j];
        }
    }
}

// C += A * B^T
template <typename T>
void matmul_nt_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    assert(a.cols == b.cols && a.rows == c.rows && b.rows == c.cols);
    const int n = a.rows, k = a.cols, m = b.rows;
    for (int i = 0; i < n; ++i) {
        const T* ar = a.row(i);
        T* cr = c.row(i);
        for (int j = 0; j < m; ++j) {
            const T* br = b.row(j);
            T s = 0;
            for (int p = 0; p < k; ++p) s += ar[p] * br[p];
            cr[j] += s;
        }
    }
}

// C += A^T * B
template <typename T>
void matmul_tn_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    assert(a.rows == b.rows && a.cols == c.rows && b.cols == c.cols);
    const int n = a.cols, k = a.rows, m = b.cols;
    for (int p = 0; p < k; ++p) {
        const T* ar = a.row(p);
        const T* br = b.row(p);
        for (int i = 0; i < n; ++i) {
            const T s = ar[i];
            T* cr = c.row(i);
            for (int j = 0; j < m; ++j) cr[j] += s * br[j];
        }
    }
}

}  // namespace hvae
