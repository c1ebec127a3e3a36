#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gapan/numerics.hpp"

namespace gapan {

// Which coordinates a coupling layer transforms (active) and which it
// conditions on (passive).
struct PartitionSpec {
  std::size_t dim = 0;
  std::vector<std::size_t> active;
  std::vector<std::size_t> passive;

  // Layer 0 conditions on the first ceil(C/2) coordinates and transforms the
  // rest; odd layers swap the roles.
  static PartitionSpec alternating(std::size_t dim, std::size_t layer_index) {
    if (dim < 2) throw ArgumentError("PartitionSpec: coupling needs dim >= 2");
    PartitionSpec p;
    p.dim = dim;
    const std::size_t head = (dim + 1) / 2;
    std::vector<std::size_t> first, second;
    for (std::size_t i = 0; i < dim; ++i) (i < head ? first : second).push_back(i);
    if (layer_index % 2 == 0) {
      p.passive = std::move(first);
      p.active = std::move(second);
    } else {
      p.passive = std::move(second);
      p.active = std::move(first);
    }
    return p;
  }

  bool valid() const {
    if (active.empty() || passive.empty() || active.size() + passive.size() != dim) return false;
    std::vector<bool> seen(dim, false);
    for (auto idx : {&active, &passive})
      for (std::size_t i : *idx) {
        if (i >= dim || seen[i]) return false;
        seen[i] = true;
      }
    return true;
  }
};

template <class T>
struct CouplingLayer {
  using value_type = T;

  PartitionSpec partition;
  Mlp<T> scale_net;      // |passive| -> |active|
  Mlp<T> translate_net;  // |passive| -> |active|
  T scale_clamp = T(5);

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F&& f) {
    Mlp<T>::visit_params(self.scale_net, prefix + "scale/", f);
    Mlp<T>::visit_params(self.translate_net, prefix + "translate/", f);
  }
};

template <class T>
struct FlowModel {
  using value_type = T;

  std::size_t dim = 0;
  std::vector<CouplingLayer<T>> layers;

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < self.layers.size(); ++l)
      CouplingLayer<T>::visit_params(self.layers[l], prefix + "L" + std::to_string(l) + "/", f);
  }
};

/// Stack of `num_layers` alternating coupling layers whose subnets have one
/// tanh hidden layer of width `hidden`. With `identity_init` the final layer
/// of every subnet is zero, so the flow starts as the identity map.
template <class T>
FlowModel<T> make_flow(std::size_t dim, std::size_t num_layers, std::size_t hidden, Rng& rng,
                       T scale_clamp = T(5), bool identity_init = true) {
  if (num_layers < 1) throw ArgumentError("make_flow: need at least one coupling layer");
  if (!(scale_clamp > T(0))) throw ArgumentError("make_flow: scale_clamp must be positive");
  FlowModel<T> flow;
  flow.dim = dim;
  for (std::size_t l = 0; l < num_layers; ++l) {
    CouplingLayer<T> layer;
    layer.partition = PartitionSpec::alternating(dim, l);
    const std::size_t np = layer.partition.passive.size(), na = layer.partition.active.size();
    layer.scale_net = make_mlp<T>({np, hidden, na}, rng, identity_init);
    layer.translate_net = make_mlp<T>({np, hidden, na}, rng, identity_init);
    layer.scale_clamp = scale_clamp;
    flow.layers.push_back(std::move(layer));
  }
  return flow;
}

template <class T>
struct CouplingTrace {
  Vec<T> input;
  MlpTrace<T> scale;
  MlpTrace<T> translate;
  Vec<T> log_scale;  // squashed scale exponent per active coordinate
};

template <class T>
struct FlowResult {
  Vec<T> z;
  T logdet = 0;
};

namespace detail {

template <class T>
Vec<T> gather(std::span<const T> x, const std::vector<std::size_t>& idx) {
  Vec<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x[idx[i]];
  return out;
}

template <class T>
T squash(T raw, T clamp) {
  return clamp * std::tanh(raw / clamp);
}

template <class T>
void check_finite(std::span<const T> v, const char* op, std::size_t layer) {
  if (!all_finite(v))
    throw NumericError(std::string(op) + ": non-finite output at coupling layer " + std::to_string(layer));
}

inline void check_dim(std::size_t got, std::size_t want, const char* op) {
  if (got != want)
    throw ShapeError(std::string(op) + ": dim " + std::to_string(got) + " != " + std::to_string(want));
}

}  // namespace detail

template <class T>
FlowResult<T> coupling_forward_traced(const CouplingLayer<T>& layer, std::span<const T> x, CouplingTrace<T>* trace,
                                      std::size_t layer_index = 0) {
  const auto& part = layer.partition;
  detail::check_dim(x.size(), part.dim, "coupling_forward");
  const Vec<T> xp = detail::gather(x, part.passive);
  MlpTrace<T> st = mlp_trace(layer.scale_net, std::span<const T>(xp));
  MlpTrace<T> tt = mlp_trace(layer.translate_net, std::span<const T>(xp));
  FlowResult<T> out;
  out.z.assign(x.begin(), x.end());
  Vec<T> s(part.active.size());
  for (std::size_t i = 0; i < part.active.size(); ++i) {
    s[i] = detail::squash(st.output()[i], layer.scale_clamp);
    const std::size_t a = part.active[i];
    out.z[a] = x[a] * std::exp(s[i]) + tt.output()[i];
    out.logdet += s[i];
  }
  detail::check_finite(std::span<const T>(out.z), "coupling_forward", layer_index);
  if (trace) {
    trace->input.assign(x.begin(), x.end());
    trace->scale = std::move(st);
    trace->translate = std::move(tt);
    trace->log_scale = std::move(s);
  }
  return out;
}

template <class T>
FlowResult<T> coupling_forward(const CouplingLayer<T>& layer, std::span<const T> x, std::size_t layer_index = 0) {
  return coupling_forward_traced<T>(layer, x, nullptr, layer_index);
}

template <class T>
Vec<T> coupling_inverse(const CouplingLayer<T>& layer, std::span<const T> y, std::size_t layer_index = 0) {
  const auto& part = layer.partition;
  detail::check_dim(y.size(), part.dim, "coupling_inverse");
  const Vec<T> yp = detail::gather(y, part.passive);
  const Vec<T> raw = mlp_forward(layer.scale_net, std::span<const T>(yp));
  const Vec<T> t = mlp_forward(layer.translate_net, std::span<const T>(yp));
  Vec<T> x(y.begin(), y.end());
  for (std::size_t i = 0; i < part.active.size(); ++i) {
    const std::size_t a = part.active[i];
    x[a] = (y[a] - t[i]) * std::exp(-detail::squash(raw[i], layer.scale_clamp));
  }
  detail::check_finite(std::span<const T>(x), "coupling_inverse", layer_index);
  return x;
}

/// Reverse-mode step through one coupling layer. Accumulates parameter
/// gradients of (gy . y + g_logdet * logdet) into `grad`; returns d/dx.
template <class T>
Vec<T> coupling_backward_accumulate(const CouplingLayer<T>& layer, const CouplingTrace<T>& tr,
                                    std::span<const T> gy, T g_logdet, CouplingLayer<T>& grad) {
  const auto& part = layer.partition;
  detail::check_dim(gy.size(), part.dim, "coupling_backward");
  const std::size_t na = part.active.size();
  Vec<T> g_raw(na), g_t(na);
  Vec<T> gx(gy.begin(), gy.end());
  for (std::size_t i = 0; i < na; ++i) {
    const std::size_t a = part.active[i];
    const T e = std::exp(tr.log_scale[i]);
    const T g_s = gy[a] * tr.input[a] * e + g_logdet;
    const T ratio = tr.log_scale[i] / layer.scale_clamp;
    g_raw[i] = g_s * (T(1) - ratio * ratio);
    g_t[i] = gy[a];
    gx[a] = gy[a] * e;
  }
  const Vec<T> gp1 = mlp_backward_accumulate(layer.scale_net, tr.scale, std::span<const T>(g_raw), grad.scale_net);
  const Vec<T> gp2 =
      mlp_backward_accumulate(layer.translate_net, tr.translate, std::span<const T>(g_t), grad.translate_net);
  for (std::size_t i = 0; i < part.passive.size(); ++i) gx[part.passive[i]] += gp1[i] + gp2[i];
  return gx;
}

/// Reverse-mode step through one inverse coupling evaluated at `y`.
/// Accumulates parameter gradients of (gx . coupling_inverse(y)) into `grad`; returns d/dy.
template <class T>
Vec<T> coupling_inverse_backward_accumulate(const CouplingLayer<T>& layer, std::span<const T> y,
                                            std::span<const T> gx, CouplingLayer<T>& grad) {
  const auto& part = layer.partition;
  detail::check_dim(y.size(), part.dim, "coupling_inverse_backward");
  detail::check_dim(gx.size(), part.dim, "coupling_inverse_backward");
  const Vec<T> yp = detail::gather(y, part.passive);
  const MlpTrace<T> st = mlp_trace(layer.scale_net, std::span<const T>(yp));
  const MlpTrace<T> tt = mlp_trace(layer.translate_net, std::span<const T>(yp));
  const std::size_t na = part.active.size();
  Vec<T> g_raw(na), g_t(na);
  Vec<T> gy(gx.begin(), gx.end());
  for (std::size_t i = 0; i < na; ++i) {
    const std::size_t a = part.active[i];
    const T s = detail::squash(st.output()[i], layer.scale_clamp);
    const T inv_e = std::exp(-s);
    const T xa = (y[a] - tt.output()[i]) * inv_e;
    const T ratio = s / layer.scale_clamp;
    g_raw[i] = -gx[a] * xa * (T(1) - ratio * ratio);
    gy[a] = gx[a] * inv_e;
    g_t[i] = -gy[a];
  }
  const Vec<T> gp1 = mlp_backward_accumulate(layer.scale_net, st, std::span<const T>(g_raw), grad.scale_net);
  const Vec<T> gp2 = mlp_backward_accumulate(layer.translate_net, tt, std::span<const T>(g_t), grad.translate_net);
  for (std::size_t i = 0; i < part.passive.size(); ++i) gy[part.passive[i]] += gp1[i] + gp2[i];
  return gy;
}

template <class T>
FlowResult<T> flow_forward_traced(const FlowModel<T>& model, std::span<const T> v,
                                  std::vector<CouplingTrace<T>>* traces) {
  detail::check_dim(v.size(), model.dim, "flow_forward");
  FlowResult<T> out;
  out.z.assign(v.begin(), v.end());
  if (traces) traces->resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    FlowResult<T> step =
        coupling_forward_traced<T>(model.layers[l], out.z, traces ? &(*traces)[l] : nullptr, l);
    out.z = std::move(step.z);
    out.logdet += step.logdet;
  }
  return out;
}

/// z = F(v) and log|det dF/dv|.
template <class T>
FlowResult<T> flow_forward(const FlowModel<T>& model, std::span<const T> v) {
  return flow_forward_traced<T>(model, v, nullptr);
}

template <class T>
Vec<T> flow_inverse(const FlowModel<T>& model, std::span<const T> z) {
  detail::check_dim(z.size(), model.dim, "flow_inverse");
  Vec<T> x(z.begin(), z.end());
  for (std::size_t l = model.layers.size(); l-- > 0;) x = coupling_inverse<T>(model.layers[l], x, l);
  return x;
}

template <class T>
Vec<T> flow_backward_accumulate(const FlowModel<T>& model, const std::vector<CouplingTrace<T>>& traces,
                                std::span<const T> upstream_z, T upstream_logdet, FlowModel<T>& grad) {
  detail::check_dim(upstream_z.size(), model.dim, "flow_backward");
  Vec<T> g(upstream_z.begin(), upstream_z.end());
  for (std::size_t l = model.layers.size(); l-- > 0;)
    g = coupling_backward_accumulate<T>(model.layers[l], traces[l], g, upstream_logdet, grad.layers[l]);
  return g;
}

/// Exact gradients of (upstream_z . z + upstream_logdet * logdet) with
/// respect to the flow parameters and to v.
template <class T>
std::pair<FlowModel<T>, Vec<T>> flow_backward(const FlowModel<T>& model, std::span<const T> v,
                                              std::span<const T> upstream_z, T upstream_logdet) {
  std::vector<CouplingTrace<T>> traces;
  flow_forward_traced<T>(model, v, &traces);
  FlowModel<T> grad = zeros_like(model);
  Vec<T> gv = flow_backward_accumulate<T>(model, traces, upstream_z, upstream_logdet, grad);
  return {std::move(grad), std::move(gv)};
}

/// Gradients of (upstream_v . flow_inverse(z)): accumulates into `grad`,
/// returns d/dz.
template <class T>
Vec<T> flow_inverse_backward_accumulate(const FlowModel<T>& model, std::span<const T> z,
                                        std::span<const T> upstream_v, FlowModel<T>& grad) {
  detail::check_dim(z.size(), model.dim, "flow_inverse_backward");
  const std::size_t n = model.layers.size();
  // inputs[l] is the value entering inverse layer l (inputs[n] = z).
  std::vector<Vec<T>> inputs(n + 1);
  inputs[n].assign(z.begin(), z.end());
  for (std::size_t l = n; l-- > 0;) inputs[l] = coupling_inverse<T>(model.layers[l], inputs[l + 1], l);
  Vec<T> g(upstream_v.begin(), upstream_v.end());
  for (std::size_t l = 0; l < n; ++l)
    g = coupling_inverse_backward_accumulate<T>(model.layers[l], inputs[l + 1], g, grad.layers[l]);
  return g;
}

}  // namespace gapan
