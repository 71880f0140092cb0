#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "flowbridge/errors.hpp"

namespace flowbridge {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<MatX<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const MatX<T>>;

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Dense row-major tensor; the single numerical currency of every module.
// T is float for training, double for gradient verification.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (count(shape) != static_cast<int64_t>(data.size()))
            throw DimensionError("tensor shape " + shape_str(shape) + " does not match data length " +
                                 std::to_string(data.size()));
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(s));
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

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    // Rows = all leading dims collapsed, cols = last dim.
    int64_t rows() const { return shape.empty() ? 1 : size() / shape.back(); }
    int cols() const { return shape.empty() ? 1 : shape.back(); }

    MatMap<T> mat(int64_t r, int64_t c) { return MatMap<T>(data.data(), r, c); }
    ConstMatMap<T> mat(int64_t r, int64_t c) const { return ConstMatMap<T>(data.data(), r, c); }
    MatMap<T> mat2d() { return mat(rows(), cols()); }
    ConstMatMap<T> mat2d() const { return mat(rows(), cols()); }

    T& at(int64_t i) { return data[static_cast<size_t>(i)]; }
    T at(int64_t i) const { return data[static_cast<size_t>(i)]; }

    Tensor reshaped(std::vector<int> s) const {
        if (count(s) != size())
            throw DimensionError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
        return Tensor(std::move(s), data);
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw DimensionError("shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out = a;
    for (int64_t i = 0; i < out.size(); ++i) out.data[static_cast<size_t>(i)] += b.data[static_cast<size_t>(i)];
    return out;
}

template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw DimensionError("shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out = a;
    for (int64_t i = 0; i < out.size(); ++i) out.data[static_cast<size_t>(i)] -= b.data[static_cast<size_t>(i)];
    return out;
}

template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) {
    Tensor<T> out = a;
    for (auto& v : out.data) v *= s;
    return out;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
    Tensor<To> out(t.shape);
    for (int64_t i = 0; i < t.size(); ++i) out.data[static_cast<size_t>(i)] = static_cast<To>(t.data[static_cast<size_t>(i)]);
    return out;
}

}  // namespace flowbridge
