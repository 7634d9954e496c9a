// Dense row-major tensor with a small fixed-rank shape. The scalar type is a
// template parameter: training runs float, gradient checks run double.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "ecgan/common.hpp"

namespace ecgan {

struct Shape {
    std::array<int, 4> dim{1, 1, 1, 1};
    int rank = 0;

    Shape() = default;
    Shape(std::initializer_list<int> dims) {
        rank = static_cast<int>(dims.size());
        int i = 0;
        for (int d : dims) dim[i++] = d;
    }

    int operator[](int i) const { return dim[i]; }
    int& operator[](int i) { return dim[i]; }

    int64_t numel() const {
        int64_t n = 1;
        for (int i = 0; i < rank; ++i) n *= dim[i];
        return n;
    }

    bool operator==(const Shape& o) const {
        if (rank != o.rank) return false;
        for (int i = 0; i < rank; ++i)
            if (dim[i] != o.dim[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s = "[";
        for (int i = 0; i < rank; ++i) {
            if (i) s += ",";
            s += std::to_string(dim[i]);
        }
        return s + "]";
    }
};

template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(s), data(static_cast<size_t>(s.numel()), T(0)) {}
    Tensor(Shape s, T fill) : shape(s), data(static_cast<size_t>(s.numel()), fill) {}
    Tensor(Shape s, std::vector<T> d) : shape(s), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != shape.numel())
            throw invalid_argument("tensor data size " + std::to_string(data.size()) +
                                   " does not match shape " + shape.str());
    }

    static Tensor zeros(Shape s) { return Tensor(s); }
    static Tensor full(Shape s, T v) { return Tensor(s, v); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    int64_t numel() const { return shape.numel(); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // NCHW accessor for rank-4 tensors.
    T& at4(int n, int c, int h, int w) {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    const T& at4(int n, int c, int h, int w) const {
        return data[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }

    T& at2(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    const T& at2(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T min_value() const { return *std::min_element(data.begin(), data.end()); }
    T max_value() const { return *std::max_element(data.begin(), data.end()); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

}  // namespace ecgan
