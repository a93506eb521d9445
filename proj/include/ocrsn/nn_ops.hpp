#pragma once

#include <span>
#include <vector>

#include "ocrsn/matrix.hpp"

namespace ocrsn::nn {

// Standard product a(r x k) * b(k x c). Throws on dimension mismatch,
// reporting both shapes.
Matrix matmul(const Matrix& a, const Matrix& b);

// x * sigmoid(x), evaluated in the overflow-safe branch form.
double silu(double x);
std::vector<double> silu(std::span<const double> x);

// Max-shifted softmax; empty input is rejected.
std::vector<double> softmax(std::span<const double> logits);
void softmax_inplace(std::span<double> v);

// x_i * gain_i / sqrt(mean(x^2) + eps). Zero input with eps > 0 maps to
// the zero vector; a zero denominator also maps to zeros.
std::vector<double> rms_norm(std::span<const double> x, std::span<const double> gain,
                             double eps = 1e-5);
void rms_norm_into(std::span<const double> x, std::span<const double> gain, double eps,
                   std::span<double> out);

// out = W x, with W rows x cols and |x| = cols.
void matvec(const Matrix& w, std::span<const double> x, std::span<double> out);

double dot(std::span<const double> a, std::span<const double> b);

// Throws if any entry is NaN or infinite; `what` names the offending buffer.
void assert_finite(std::span<const double> v, const char* what);

}  // namespace ocrsn::nn
