#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace sapiens {

// Dense row-major double tensor. Rank is dynamic; most code uses rank 1-3.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> shp, double fill = 0.0)
        : shape(std::move(shp)), data(static_cast<size_t>(count(shape)), fill) {}

    static Tensor from(std::vector<int> shp, std::vector<double> d) {
        Tensor t;
        t.shape = std::move(shp);
        if (static_cast<int64_t>(d.size()) != count(t.shape)) {
            throw std::invalid_argument("Tensor::from: data size does not match shape");
        }
        t.data = std::move(d);
        return t;
    }

    static Tensor scalar(double v) { return from({1}, {v}); }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    // 2D accessors
    int rows() const { assert(ndim() == 2); return shape[0]; }
    int cols() const { assert(ndim() == 2); return shape[1]; }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    double& at2(int r, int c) {
        assert(ndim() == 2);
        return data[static_cast<size_t>(r) * shape[1] + c];
    }
    double at2(int r, int c) const {
        assert(ndim() == 2);
        return data[static_cast<size_t>(r) * shape[1] + c];
    }
    // [C,H,W] accessor
    double& at3(int c, int y, int x) {
        assert(ndim() == 3);
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    double at3(int c, int y, int x) const {
        assert(ndim() == 3);
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EVec = Eigen::VectorXd;

// 2D views (also usable for flattened higher-rank tensors given explicit dims)
inline Eigen::Map<EMat> as_mat(Tensor& t, int r, int c) {
    assert(t.numel() == static_cast<int64_t>(r) * c);
    return Eigen::Map<EMat>(t.data.data(), r, c);
}
inline Eigen::Map<const EMat> as_mat(const Tensor& t, int r, int c) {
    assert(t.numel() == static_cast<int64_t>(r) * c);
    return Eigen::Map<const EMat>(t.data.data(), r, c);
}
inline Eigen::Map<EMat> as_mat(Tensor& t) { return as_mat(t, t.rows(), t.cols()); }
inline Eigen::Map<const EMat> as_mat(const Tensor& t) { return as_mat(t, t.rows(), t.cols()); }

inline Eigen::Map<EVec> as_vec(Tensor& t) {
    return Eigen::Map<EVec>(t.data.data(), static_cast<Eigen::Index>(t.numel()));
}
inline Eigen::Map<const EVec> as_vec(const Tensor& t) {
    return Eigen::Map<const EVec>(t.data.data(), static_cast<Eigen::Index>(t.numel()));
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace sapiens
