// Dense row-major tensor (rank 1 or 2 in practice) used as the value and
// gradient carrier throughout the toolkit.
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace knit {

template <typename S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> v;

    Tensor() = default;

    explicit Tensor(std::vector<int> dims) : shape(std::move(dims)) {
        v.assign(count(shape), S(0));
    }

    Tensor(int r, int c) : Tensor(std::vector<int>{r, c}) {}

    static Tensor zeros(int r, int c) { return Tensor(r, c); }

    static Tensor scalar(S x) {
        Tensor t(1, 1);
        t.v[0] = x;
        return t;
    }

    static Tensor from_rows(std::initializer_list<std::initializer_list<S>> rows) {
        Tensor t(static_cast<int>(rows.size()),
                 rows.size() ? static_cast<int>(rows.begin()->size()) : 0);
        int i = 0;
        for (const auto& row : rows) {
            int j = 0;
            for (S x : row) t.at(i, j++) = x;
            ++i;
        }
        return t;
    }

    static std::size_t count(const std::vector<int>& dims) {
        std::size_t n = 1;
        for (int d : dims) {
            if (d < 0) throw std::invalid_argument("negative tensor dimension");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    std::size_t size() const { return v.size(); }
    bool is_scalar() const { return v.size() == 1; }

    S& at(int i, int j) { return v[static_cast<std::size_t>(i) * cols() + j]; }
    S at(int i, int j) const { return v[static_cast<std::size_t>(i) * cols() + j]; }

    S* row_ptr(int i) { return v.data() + static_cast<std::size_t>(i) * cols(); }
    const S* row_ptr(int i) const { return v.data() + static_cast<std::size_t>(i) * cols(); }

    void fill(S x) { std::fill(v.begin(), v.end(), x); }
    void zero() { fill(S(0)); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (S x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out(shape);
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
        return out;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

} // namespace knit
