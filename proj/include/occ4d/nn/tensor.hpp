// Dense row-major double tensor. Everything trains in double so that exact
// gradient checks against central finite differences are meaningful.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace occ4d::nn {

using Real = double;

struct Tensor {
    std::vector<int> shape;
    std::vector<Real> v;

    Tensor() = default;

    explicit Tensor(std::vector<int> s, Real fill = 0.0) : shape(std::move(s)) {
        v.assign(static_cast<size_t>(numel_of(shape)), fill);
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor scalar(Real x) {
        Tensor t({1});
        t.v[0] = x;
        return t;
    }

    static Tensor from(std::vector<int> s, std::vector<Real> data) {
        Tensor t;
        t.shape = std::move(s);
        if (static_cast<long long>(data.size()) != numel_of(t.shape))
            throw std::invalid_argument("tensor data size does not match shape");
        t.v = std::move(data);
        return t;
    }

    static long long numel_of(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
            n *= d;
        }
        return n;
    }

    long long numel() const { return static_cast<long long>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    Real* data() { return v.data(); }
    const Real* data() const { return v.data(); }

    Real& operator[](size_t i) { return v[i]; }
    Real operator[](size_t i) const { return v[i]; }

    // checked multi-index access, mostly for tests
    Real& at(std::initializer_list<int> idx) { return v[offset_(idx)]; }
    Real at(std::initializer_list<int> idx) const { return v[offset_(idx)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (Real x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }

private:
    size_t offset_(std::initializer_list<int> idx) const {
        if (idx.size() != shape.size()) throw std::out_of_range("rank mismatch in Tensor::at");
        size_t off = 0;
        size_t i = 0;
        for (int x : idx) {
            if (x < 0 || x >= shape[i]) throw std::out_of_range("index out of range in Tensor::at");
            off = off * static_cast<size_t>(shape[i]) + static_cast<size_t>(x);
            ++i;
        }
        return off;
    }
};

}  // namespace occ4d::nn
