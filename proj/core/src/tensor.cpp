#include "thermosr/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <sstream>

#include "thermosr/errors.hpp"

namespace thermosr {

static std::int64_t count_elems(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw validation_error("Tensor: negative dimension");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> s, double fill)
    : shape(std::move(s)), data(static_cast<std::size_t>(count_elems(shape)), fill) {}

Tensor Tensor::scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> d) {
    Tensor t;
    t.shape = std::move(s);
    if (count_elems(t.shape) != static_cast<std::int64_t>(d.size()))
        throw validation_error("Tensor::from: data size does not match shape");
    t.data = std::move(d);
    return t;
}

int Tensor::dim(int i) const {
    if (i < 0 || i >= ndim()) throw validation_error("Tensor::dim: axis out of range");
    return shape[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::numel() const { return count_elems(shape); }

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* context) {
    if (!a.same_shape(b))
        throw validation_error(std::string(context) + ": shape mismatch " + a.shape_str() +
                               " vs " + b.shape_str());
}

double dot(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

double sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data) s += v;
    return s;
}

double mean(const Tensor& a) {
    if (a.data.empty()) throw validation_error("mean: empty tensor");
    return sum(a) / static_cast<double>(a.data.size());
}

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::fabs(v));
    return m;
}

double l2_dist(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "l2_dist");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace thermosr
