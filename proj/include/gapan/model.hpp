#pragma once

#include <string>

#include "gapan/flow.hpp"
#include "gapan/prior.hpp"
#include "gapan/retrieval.hpp"

namespace gapan {

// Every trainable part of the pipeline. Also used as the gradient container:
// a zeros_like(Network) holds one gradient tensor per parameter tensor.
template <class T>
struct Network {
  using value_type = T;

  RetrievalHead<T> head;
  FlowModel<T> flow;
  ClassPriorSet<T> priors;

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F&& f) {
    RetrievalHead<T>::visit_params(self.head, prefix + "head/", f);
    FlowModel<T>::visit_params(self.flow, prefix + "flow/", f);
    ClassPriorSet<T>::visit_params(self.priors, prefix + "prior/", f);
  }
};

struct NetworkShape {
  std::size_t feature_dim = 32;
  std::size_t embedding_dim = kDefaultEmbeddingDim;
  std::size_t num_classes = 1;
  std::size_t flow_layers = 8;
  std::size_t flow_hidden = 512;
  double scale_clamp = 5.0;
};

/// Fresh network: random linear head, identity-initialized flow, zero-mean
/// unit-variance priors (replaced by class statistics before they are used).
template <class T>
Network<T> make_network(const NetworkShape& shape, Rng& rng) {
  Network<T> net;
  net.head = make_head<T>(shape.feature_dim, shape.embedding_dim, rng);
  net.flow = make_flow<T>(shape.feature_dim, shape.flow_layers, shape.flow_hidden, rng,
                          static_cast<T>(shape.scale_clamp), true);
  net.priors = ClassPriorSet<T>(shape.num_classes, shape.feature_dim);
  return net;
}

}  // namespace gapan
