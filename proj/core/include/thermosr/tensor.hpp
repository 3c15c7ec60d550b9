#pragma once

#include <string>
#include <vector>

namespace thermosr {

// Dense row-major double tensor. Double precision throughout: the gradient
// checks in the test suite compare analytic derivatives against central
// finite differences at 1e-4 relative tolerance, which single precision
// cannot reliably meet.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0);

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double v) { return Tensor(std::move(s), v); }
    static Tensor scalar(double v);
    static Tensor from(std::vector<int> s, std::vector<double> d);

    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const;
    std::int64_t numel() const;
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;

    double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // Unchecked row-major accessors for the common ranks.
    double& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double& at(int c, int i, int j) {
        return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j];
    }
    double at(int c, int i, int j) const {
        return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j];
    }
    double& at(int a, int b, int c, int d) {
        return data[((static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }
    double at(int a, int b, int c, int d) const {
        return data[((static_cast<std::size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }

    std::string shape_str() const;
};

// Throws validation_error with a context message if shapes differ.
void check_same_shape(const Tensor& a, const Tensor& b, const char* context);

double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);
double mean(const Tensor& a);
double max_abs(const Tensor& a);
// Frobenius norm of a - b.
double l2_dist(const Tensor& a, const Tensor& b);

}  // namespace thermosr
