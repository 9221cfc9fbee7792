#include "tsae/numerics.hpp"

#include <numbers>

namespace tsae {

template <typename T>
void matmul_acc(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + a.shape() + " x " + b.shape());
  }
  if (out.rows() != a.rows() || out.cols() != b.cols()) {
    throw DimensionError("matmul: output shape " + out.shape() + " for " + a.shape() + " x " +
                         b.shape());
  }
  const std::size_t n = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* ar = a.data() + i * n;
    T* o = out.data() + i * m;
    for (std::size_t k = 0; k < n; ++k) {
      const T av = ar[k];
      if (av == T{0}) continue;
      const T* br = b.data() + k * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + a.shape() + " x " + b.shape());
  }
  BasicMatrix<T> out(a.rows(), b.cols());
  matmul_acc(a, b, out);
  return out;
}

template <typename T>
void matmul_tn_acc(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: row counts differ " + a.shape() + " vs " + b.shape());
  }
  if (out.rows() != a.cols() || out.cols() != b.cols()) {
    throw DimensionError("matmul_tn: output shape " + out.shape());
  }
  const std::size_t n = a.cols(), m = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const T* ar = a.data() + r * n;
    const T* br = b.data() + r * m;
    for (std::size_t i = 0; i < n; ++i) {
      const T av = ar[i];
      if (av == T{0}) continue;
      T* o = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

template <typename T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  BasicMatrix<T> out(a.cols(), b.cols());
  matmul_tn_acc(a, b, out);
  return out;
}

template <typename T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: column counts differ " + a.shape() + " vs " + b.shape());
  }
  // Same per-element summation order as the direct dot-product form.
  return matmul(a, transpose(b));
}

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
  BasicMatrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
T norm2(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

template <typename T>
T cosine(std::span<const T> a, std::span<const T> b) {
  const T na = norm2(a), nb = norm2(b);
  if (na == T{0} || nb == T{0}) return T{0};
  T c = dot(a, b) / (na * nb);
  return std::clamp(c, T{-1}, T{1});
}

template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y) {
  if (x.size() != y.size()) throw DimensionError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

template <typename T>
void adam_step(BasicMatrix<T>& param, const BasicMatrix<T>& grad, AdamState<T>& state,
               double lr) {
  require_same_shape(param, grad, "adam_step(param, grad)");
  if (!state.m.same_shape(param) || !state.v.same_shape(param)) {
    throw DimensionError("adam_step: optimizer state " + state.m.shape() +
                         " does not match parameter " + param.shape());
  }
  if (!(lr > 0.0)) throw RangeError("adam_step: learning rate must be positive");
  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  T* p = param.data();
  T* m = state.m.data();
  T* v = state.v.data();
  const T* g = grad.data();
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double gi = g[i];
    if (gi == 0.0) continue;
    const double mi = b1 * m[i] + (1.0 - b1) * gi;
    const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / c1;
    const double vhat = vi / c2;
    p[i] = static_cast<T>(p[i] - lr * mhat / (std::sqrt(vhat) + state.eps));
  }
}

double lr_at(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) throw RangeError("lr_at: total_steps must be positive");
  if (step > total_steps) {
    throw RangeError("lr_at: step " + std::to_string(step) + " exceeds total " +
                     std::to_string(total_steps));
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

#define TSAE_INSTANTIATE(T)                                                                    \
  template BasicMatrix<T> matmul(const BasicMatrix<T>&, const BasicMatrix<T>&);              \
  template BasicMatrix<T> matmul_tn(const BasicMatrix<T>&, const BasicMatrix<T>&);           \
  template BasicMatrix<T> matmul_nt(const BasicMatrix<T>&, const BasicMatrix<T>&);           \
  template void matmul_acc(const BasicMatrix<T>&, const BasicMatrix<T>&, BasicMatrix<T>&);   \
  template void matmul_tn_acc(const BasicMatrix<T>&, const BasicMatrix<T>&, BasicMatrix<T>&); \
  template BasicMatrix<T> transpose(const BasicMatrix<T>&);                                  \
  template T dot(std::span<const T>, std::span<const T>);                                    \
  template T norm2(std::span<const T>);                                                      \
  template T cosine(std::span<const T>, std::span<const T>);                                 \
  template void axpy(T, std::span<const T>, std::span<T>);                                   \
  template void adam_step(BasicMatrix<T>&, const BasicMatrix<T>&, AdamState<T>&, double);

TSAE_INSTANTIATE(float)
TSAE_INSTANTIATE(double)
#undef TSAE_INSTANTIATE

}  // namespace tsae
