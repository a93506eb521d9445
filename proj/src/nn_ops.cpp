#include "ocrsn/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ocrsn::nn {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw std::invalid_argument("matmul: dimension mismatch " + a.shape_str() + " * " +
                                    b.shape_str());
    }
    Matrix out(a.rows, b.cols, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    assert_finite(out.data, "matmul result");
    return out;
}

double silu(double x) {
    if (x >= 0.0) return x / (1.0 + std::exp(-x));
    double ex = std::exp(x);
    return x * ex / (1.0 + ex);
}

std::vector<double> silu(std::span<const double> x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = silu(x[i]);
    return out;
}

void softmax_inplace(std::span<double> v) {
    if (v.empty()) throw std::invalid_argument("softmax: empty input");
    double mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out(logits.begin(), logits.end());
    softmax_inplace(out);
    return out;
}

void rms_norm_into(std::span<const double> x, std::span<const double> gain, double eps,
                   std::span<double> out) {
    if (x.size() != gain.size()) {
        throw std::invalid_argument("rms_norm: length mismatch (" + std::to_string(x.size()) +
                                    " vs " + std::to_string(gain.size()) + ")");
    }
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms = x.empty() ? 0.0 : ms / double(x.size());
    double denom = std::sqrt(ms + eps);
    if (denom == 0.0) {
        std::fill(out.begin(), out.end(), 0.0);
        return;
    }
    double inv = 1.0 / denom;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * gain[i] * inv;
}

std::vector<double> rms_norm(std::span<const double> x, std::span<const double> gain, double eps) {
    std::vector<double> out(x.size());
    rms_norm_into(x, gain, eps, out);
    return out;
}

void matvec(const Matrix& w, std::span<const double> x, std::span<double> out) {
    if (w.cols != x.size() || w.rows != out.size()) {
        throw std::invalid_argument("matvec: shape mismatch " + w.shape_str() + " * vec(" +
                                    std::to_string(x.size()) + ")");
    }
    for (std::size_t r = 0; r < w.rows; ++r) {
        const double* row = w.row(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < w.cols; ++c) acc += row[c] * x[c];
        out[r] = acc;
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

void assert_finite(std::span<const double> v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw std::runtime_error(std::string("non-finite value in ") + what);
        }
    }
}

}  // namespace ocrsn::nn
