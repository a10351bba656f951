#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ctrlora/core/errors.hpp"
#include "ctrlora/core/rng.hpp"

namespace ctrlora {

// Dense float64 tensor, row-major, NCHW for feature maps. Everything in the
// project runs in double: the gradient checks, the 1e-6 composition
// tolerance, and the bitwise contracts all get easier, and the nets are small
// enough that the 2x memory cost is irrelevant.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> shp, double fill = 0.0)
        : shape(std::move(shp)), data(static_cast<size_t>(count(shape)), fill) {}

    static int64_t count(const std::vector<int64_t>& shp) {
        int64_t n = 1;
        for (int64_t d : shp) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int64_t> shp) { return Tensor(std::move(shp), 0.0); }
    static Tensor full(std::vector<int64_t> shp, double v) { return Tensor(std::move(shp), v); }
    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor randn(std::vector<int64_t> shp, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shp));
        for (auto& v : t.data) v = stddev * rng.normal();
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data) m = std::max(m, std::fabs(v));
        return m;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace ctrlora
