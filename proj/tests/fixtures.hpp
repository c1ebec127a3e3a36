#pragma once

#include <span>
#include <vector>

#include "gapan/gapan.hpp"

namespace fixtures {

using namespace gapan;

inline FlowModel<double> random_flow(std::size_t dim, std::size_t layers, std::uint64_t seed, double scale = 0.4,
                                     std::size_t hidden = 6) {
  Rng rng(seed);
  FlowModel<double> flow = make_flow<double>(dim, layers, hidden, rng, 5.0, false);
  randomize_parameters(flow, rng, scale);
  return flow;
}

inline ClassPriorSet<double> random_priors(std::size_t k, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  ClassPriorSet<double> p(k, dim);
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < dim; ++j) {
      p.means[c][j] = uniform(rng, -2, 2);
      p.log_variances[c][j] = uniform(rng, -1, 1);
    }
  return p;
}

inline Vec<double> random_vec(std::size_t dim, Rng& rng, double scale = 1.0) {
  Vec<double> v(dim);
  for (auto& x : v) x = scale * standard_normal(rng);
  return v;
}

inline std::span<const double> cs(const Vec<double>& v) { return std::span<const double>(v); }

// Coupling layer on C=2 with constant squashed scale `s_hat` and shift `t`.
inline CouplingLayer<double> constant_layer(std::size_t dim, std::size_t layer_index, double s_hat, double t) {
  CouplingLayer<double> layer;
  layer.partition = PartitionSpec::alternating(dim, layer_index);
  const std::size_t np = layer.partition.passive.size(), na = layer.partition.active.size();
  layer.scale_net = Mlp<double>({np, 3, na});
  layer.translate_net = Mlp<double>({np, 3, na});
  const double raw = layer.scale_clamp * std::atanh(s_hat / layer.scale_clamp);
  for (auto& b : layer.scale_net.biases[1]) b = raw;
  for (auto& b : layer.translate_net.biases[1]) b = t;
  return layer;
}

}  // namespace fixtures
