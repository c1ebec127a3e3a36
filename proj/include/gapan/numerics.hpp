#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gapan/errors.hpp"
#include "gapan/random.hpp"

namespace gapan {

template <class T>
using Vec = std::vector<T>;

// Row-major dense matrix.
template <class T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), values(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  std::span<T> row(std::size_t r) { return {values.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <class T>
T norm2(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

template <class T>
T max_abs(std::span<const T> a) {
  T m = 0;
  for (T v : a) m = std::max(m, std::abs(v));
  return m;
}

template <class T>
void axpy(T alpha, std::span<const T> x, std::span<T> y) {
  if (x.size() != y.size()) throw ShapeError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

template <class T>
bool all_finite(std::span<const T> a) {
  return std::all_of(a.begin(), a.end(), [](T v) { return std::isfinite(v); });
}

/// Shift-stable log(sum(exp(xs))). Throws ArgumentError on empty input.
template <class T>
T logsumexp(std::span<const T> xs) {
  if (xs.empty()) throw ArgumentError("logsumexp: empty input");
  const T m = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(m)) return m;
  T s = 0;
  for (T x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

template <class T>
Vec<T> softmax(std::span<const T> xs) {
  const T lse = logsumexp(xs);
  Vec<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = std::exp(xs[i] - lse);
  return out;
}

// ---------------------------------------------------------------------------
// Parameter traversal
//
// Every trainable type exposes
//   template <class Self, class F> static void visit_params(Self&, const std::string& prefix, F&&)
// calling f(name, dims, values, decay) once per tensor, where `values` is a
// (possibly const) std::vector<T>&. The helpers below are written once against it.

template <class M, class F>
void for_each_parameter(M& model, F&& f, const std::string& prefix = "") {
  std::remove_const_t<M>::visit_params(model, prefix, std::forward<F>(f));
}

template <class M>
std::size_t parameter_count(const M& model) {
  std::size_t n = 0;
  for_each_parameter(model, [&](const std::string&, const auto&, const auto& v, bool) { n += v.size(); });
  return n;
}

template <class M>
M zeros_like(const M& model) {
  M out = model;
  for_each_parameter(out, [](const std::string&, const auto&, auto& v, bool) {
    std::fill(v.begin(), v.end(), 0);
  });
  return out;
}

template <class M>
auto flatten(const M& model) {
  using T = typename M::value_type;
  std::vector<T> out;
  out.reserve(parameter_count(model));
  for_each_parameter(model, [&](const std::string&, const auto&, const auto& v, bool) {
    out.insert(out.end(), v.begin(), v.end());
  });
  return out;
}

template <class M, class T>
void assign_flat(M& model, std::span<const T> flat) {
  if (flat.size() != parameter_count(model)) throw ShapeError("assign_flat: parameter count mismatch");
  std::size_t off = 0;
  for_each_parameter(model, [&](const std::string&, const auto&, auto& v, bool) {
    std::copy(flat.begin() + off, flat.begin() + off + v.size(), v.begin());
    off += v.size();
  });
}

template <class M>
void randomize_parameters(M& model, Rng& rng, double scale) {
  for_each_parameter(model, [&](const std::string&, const auto&, auto& v, bool) {
    for (auto& x : v) x = static_cast<typename M::value_type>(uniform(rng, -scale, scale));
  });
}

template <class M>
std::vector<std::vector<typename M::value_type>*> parameter_tensors(M& model) {
  std::vector<std::vector<typename M::value_type>*> out;
  for_each_parameter(model, [&](const std::string&, const auto&, auto& v, bool) { out.push_back(&v); });
  return out;
}

/// dst += scale * src, tensor by tensor. Shapes must agree.
template <class M, class T>
void add_scaled(M& dst, const M& src, T scale) {
  auto d = parameter_tensors(dst);
  std::vector<const std::vector<typename M::value_type>*> s;
  for_each_parameter(src, [&](const std::string&, const auto&, const auto& v, bool) { s.push_back(&v); });
  if (d.size() != s.size()) throw ShapeError("add_scaled: tensor count mismatch");
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i]->size() != s[i]->size()) throw ShapeError("add_scaled: tensor shape mismatch");
    for (std::size_t j = 0; j < d[i]->size(); ++j) (*d[i])[j] += static_cast<typename M::value_type>(scale) * (*s[i])[j];
  }
}

template <class M, class T>
void scale_all(M& model, T scale) {
  for_each_parameter(model, [&](const std::string&, const auto&, auto& v, bool) {
    for (auto& x : v) x *= scale;
  });
}

// ---------------------------------------------------------------------------
// Mlp: tanh hidden layers, identity output.

template <class T>
struct Mlp {
  using value_type = T;

  std::vector<std::size_t> layer_sizes;
  std::vector<Matrix<T>> weights;  // weights[l] is layer_sizes[l+1] x layer_sizes[l]
  std::vector<Vec<T>> biases;

  Mlp() = default;
  explicit Mlp(std::vector<std::size_t> sizes) : layer_sizes(std::move(sizes)) {
    if (layer_sizes.size() < 2) throw ShapeError("Mlp: need at least input and output sizes");
    for (std::size_t s : layer_sizes)
      if (s == 0) throw ShapeError("Mlp: layer sizes must be positive");
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
      weights.emplace_back(layer_sizes[l + 1], layer_sizes[l]);
      biases.emplace_back(layer_sizes[l + 1], T(0));
    }
  }

  std::size_t num_layers() const { return weights.size(); }
  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < self.weights.size(); ++l) {
      const std::string idx = std::to_string(l);
      f(prefix + "W" + idx, std::vector<std::size_t>{self.weights[l].rows, self.weights[l].cols},
        self.weights[l].values, true);
      f(prefix + "b" + idx, std::vector<std::size_t>{self.biases[l].size()}, self.biases[l], false);
    }
  }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases. With
/// `zero_final` the last layer's weights are zero as well.
template <class T>
Mlp<T> make_mlp(std::vector<std::size_t> sizes, Rng& rng, bool zero_final = false) {
  Mlp<T> net(std::move(sizes));
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    if (zero_final && l + 1 == net.num_layers()) break;
    const double bound = 1.0 / std::sqrt(static_cast<double>(net.weights[l].cols));
    for (auto& w : net.weights[l].values) w = static_cast<T>(uniform(rng, -bound, bound));
  }
  return net;
}

// Activations of every layer for one input; activations[0] is the input.
template <class T>
struct MlpTrace {
  std::vector<Vec<T>> activations;
  const Vec<T>& output() const { return activations.back(); }
};

template <class T>
MlpTrace<T> mlp_trace(const Mlp<T>& net, std::span<const T> x) {
  if (x.size() != net.input_dim())
    throw ShapeError("mlp_forward: input dim " + std::to_string(x.size()) + " != " +
                     std::to_string(net.input_dim()));
  MlpTrace<T> tr;
  tr.activations.reserve(net.num_layers() + 1);
  tr.activations.emplace_back(x.begin(), x.end());
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const Matrix<T>& w = net.weights[l];
    const Vec<T>& in = tr.activations.back();
    Vec<T> out(net.biases[l]);
    for (std::size_t r = 0; r < w.rows; ++r) {
      const T* wr = w.values.data() + r * w.cols;
      T s = 0;
      for (std::size_t c = 0; c < w.cols; ++c) s += wr[c] * in[c];
      out[r] += s;
    }
    if (l + 1 < net.num_layers())
      for (auto& v : out) v = std::tanh(v);
    tr.activations.push_back(std::move(out));
  }
  return tr;
}

template <class T>
Vec<T> mlp_forward(const Mlp<T>& net, std::span<const T> x) {
  return std::move(mlp_trace(net, x).activations.back());
}

/// Accumulates d(upstream . output)/d(params) into `grad` and returns the
/// gradient with respect to the traced input.
template <class T>
Vec<T> mlp_backward_accumulate(const Mlp<T>& net, const MlpTrace<T>& tr, std::span<const T> upstream,
                               Mlp<T>& grad) {
  if (upstream.size() != net.output_dim()) throw ShapeError("mlp_backward: upstream dim mismatch");
  Vec<T> delta(upstream.begin(), upstream.end());
  for (std::size_t l = net.num_layers(); l-- > 0;) {
    const Matrix<T>& w = net.weights[l];
    const Vec<T>& in = tr.activations[l];
    Matrix<T>& gw = grad.weights[l];
    Vec<T>& gb = grad.biases[l];
    Vec<T> din(w.cols, T(0));
    for (std::size_t r = 0; r < w.rows; ++r) {
      const T d = delta[r];
      if (d == T(0)) continue;
      gb[r] += d;
      T* gwr = gw.values.data() + r * w.cols;
      const T* wr = w.values.data() + r * w.cols;
      for (std::size_t c = 0; c < w.cols; ++c) {
        gwr[c] += d * in[c];
        din[c] += d * wr[c];
      }
    }
    if (l > 0)
      for (std::size_t c = 0; c < din.size(); ++c) din[c] *= T(1) - in[c] * in[c];
    delta = std::move(din);
  }
  return delta;
}

template <class T>
std::pair<Mlp<T>, Vec<T>> mlp_backward(const Mlp<T>& net, std::span<const T> x, std::span<const T> upstream) {
  Mlp<T> grad = zeros_like(net);
  const MlpTrace<T> tr = mlp_trace(net, x);
  Vec<T> gx = mlp_backward_accumulate(net, tr, upstream, grad);
  return {std::move(grad), std::move(gx)};
}

/// Central-difference gradient of `f` at `p`.
template <class T, class F>
Vec<T> finite_diff_grad(F&& f, std::span<const T> p, T step) {
  if (!(step > T(0))) throw ArgumentError("finite_diff_grad: step must be positive");
  Vec<T> work(p.begin(), p.end());
  Vec<T> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T orig = work[i];
    work[i] = orig + step;
    const T fp = f(std::span<const T>(work));
    work[i] = orig - step;
    const T fm = f(std::span<const T>(work));
    work[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_grad: non-finite function value at coordinate " + std::to_string(i));
    g[i] = (fp - fm) / (T(2) * step);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), with an absolute floor so two near-zero
/// gradients compare as equal.
template <class T>
T relative_error(std::span<const T> a, std::span<const T> b, T floor = T(1e-8)) {
  if (a.size() != b.size()) throw ShapeError("relative_error: length mismatch");
  T diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const T denom = std::max({std::sqrt(na), std::sqrt(nb), floor});
  return std::sqrt(diff) / denom;
}

}  // namespace gapan
