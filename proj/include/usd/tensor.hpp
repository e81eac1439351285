#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace usd {

/// Dense row-major tensor. Shapes follow the conventions used throughout:
/// matrices are {rows, cols}, vectors {n}, feature maps {channels, h, w}.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != count(shape))
            throw std::invalid_argument("tensor: data size does not match shape");
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("tensor: non-positive dim");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int rows() const { assert(ndim() == 2); return shape[0]; }
    int cols() const { assert(ndim() == 2); return shape[1]; }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
    T& at2(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
    const T& at2(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
    T& at3(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    const T& at3(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    /// Reinterpret as a new shape with identical element count.
    Tensor reshaped(std::vector<int> s) const {
        if (count(s) != size()) throw std::invalid_argument("tensor: reshape count mismatch");
        return Tensor(std::move(s), data);
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    T min_value() const {
        T m = data[0];
        for (T v : data) m = std::min(m, v);
        return m;
    }
    T max_value() const {
        T m = data[0];
        for (T v : data) m = std::max(m, v);
        return m;
    }
    T sum() const { return std::accumulate(data.begin(), data.end(), T(0)); }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i)
            s += (i ? "," : "") + std::to_string(shape[i]);
        return s + "]";
    }
};

}  // namespace usd
