#pragma once

#include <vector>

#include "gapan/model.hpp"

namespace gapan {

template <class T>
struct Anchor {
  std::size_t class_index = 0;
  Vec<T> latent;    // S, inside the truncation ball of its class prior
  Vec<T> whitened;  // (S - mean) / stddev
  Vec<T> feature;   // V_aug = F^-1(S)
  Vec<T> embedding; // H(V_aug)
};

// Anchors grouped by class index; classes that were not requested are empty.
template <class T>
struct AnchorSet {
  std::vector<std::vector<Anchor<T>>> by_class;
  std::size_t fallbacks = 0;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& c : by_class) n += c.size();
    return n;
  }
};

/// For each class in `class_set`: n_s truncated latent draws, mapped back to
/// feature space by the inverse flow and projected by the shared head. Class k
/// draws from derive_stream(seed, k, step) so generation order does not matter.
template <class T>
AnchorSet<T> generate_anchors(const FlowModel<T>& flow, const ClassPriorSet<T>& priors, const RetrievalHead<T>& head,
                              std::span<const std::size_t> class_set, std::size_t n_s, const TruncationSpec& spec,
                              std::uint64_t seed, std::uint64_t step) {
  if (n_s < 1) throw ArgumentError("generate_anchors: n_s must be >= 1");
  AnchorSet<T> out;
  out.by_class.resize(priors.num_classes());
  for (std::size_t k : class_set) {
    detail::check_class(priors, k);
    Rng rng = derive_stream(seed, k, step);
    TruncatedSamples<T> ts = sample_truncated(priors, k, spec, n_s, rng);
    out.fallbacks += ts.fallbacks;
    auto& bucket = out.by_class[k];
    bucket.clear();
    for (std::size_t i = 0; i < n_s; ++i) {
      Anchor<T> a;
      a.class_index = k;
      a.feature = flow_inverse(flow, std::span<const T>(ts.samples[i]));
      a.embedding = embed(head, std::span<const T>(a.feature));
      a.latent = std::move(ts.samples[i]);
      a.whitened = std::move(ts.whitened[i]);
      bucket.push_back(std::move(a));
    }
  }
  return out;
}

template <class T>
AnchorSet<T> generate_anchors(const Network<T>& net, std::span<const std::size_t> class_set, std::size_t n_s,
                              const TruncationSpec& spec, std::uint64_t seed, std::uint64_t step) {
  return generate_anchors(net.flow, net.priors, net.head, class_set, n_s, spec, seed, step);
}

}  // namespace gapan
