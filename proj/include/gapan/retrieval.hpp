#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "gapan/numerics.hpp"

namespace gapan {

inline constexpr std::size_t kDefaultEmbeddingDim = 128;

// Retrieval head: a single linear projection C -> C'.
template <class T>
struct RetrievalHead {
  using value_type = T;

  Mlp<T> projector;

  std::size_t input_dim() const { return projector.input_dim(); }
  std::size_t output_dim() const { return projector.output_dim(); }

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F&& f) {
    Mlp<T>::visit_params(self.projector, prefix, f);
  }
};

template <class T>
RetrievalHead<T> make_head(std::size_t feature_dim, std::size_t embedding_dim, Rng& rng) {
  return RetrievalHead<T>{make_mlp<T>({feature_dim, embedding_dim}, rng)};
}

template <class T>
Vec<T> embed(const RetrievalHead<T>& head, std::span<const T> v) {
  return mlp_forward(head.projector, v);
}

template <class T>
T cosine_sim(std::span<const T> a, std::span<const T> b) {
  const T na = norm2(a), nb = norm2(b);
  if (!(na > T(0)) || !(nb > T(0))) throw DegenerateEmbeddingError("cosine_sim: zero-norm embedding");
  return dot(a, b) / (na * nb);
}

// d sim(a, b) / d a, accumulated with weight `w` into ga (and symmetrically gb).
template <class T>
void cosine_sim_backward(std::span<const T> a, std::span<const T> b, T w, std::span<T> ga, std::span<T> gb) {
  const T na = norm2(a), nb = norm2(b);
  if (!(na > T(0)) || !(nb > T(0))) throw DegenerateEmbeddingError("cosine_sim: zero-norm embedding");
  const T inv = T(1) / (na * nb);
  const T s = dot(a, b) * inv;
  const T ca = s / (na * na), cb = s / (nb * nb);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ga[i] += w * (b[i] * inv - ca * a[i]);
    gb[i] += w * (a[i] * inv - cb * b[i]);
  }
}

/// Recall@k for every k in `ks`: each item queries all other items ranked by
/// cosine similarity (ties by ascending index) and scores 1 when a same-label
/// item is among the first k. Queries whose label is a singleton score 0.
template <class T>
std::vector<double> recall_at_k(const std::vector<Vec<T>>& embeddings, std::span<const std::size_t> labels,
                                std::span<const std::size_t> ks) {
  const std::size_t n = embeddings.size();
  if (n == 0) throw ArgumentError("recall_at_k: empty input");
  if (labels.size() != n) throw ShapeError("recall_at_k: labels/embeddings length mismatch");
  if (n < 2) throw ArgumentError("recall_at_k: need at least two items");
  for (std::size_t k : ks)
    if (k == 0) throw ArgumentError("recall_at_k: k must be positive");

  std::vector<std::size_t> hits(ks.size(), 0);
  std::vector<T> sims(n);
  std::vector<std::size_t> order;
  order.reserve(n - 1);
  for (std::size_t q = 0; q < n; ++q) {
    order.clear();
    for (std::size_t m = 0; m < n; ++m) {
      if (m == q) continue;
      sims[m] = cosine_sim(std::span<const T>(embeddings[q]), std::span<const T>(embeddings[m]));
      order.push_back(m);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sims[x] > sims[y]; });
    std::size_t first_hit = n;
    for (std::size_t r = 0; r < order.size(); ++r)
      if (labels[order[r]] == labels[q]) {
        first_hit = r;
        break;
      }
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (first_hit < ks[i]) ++hits[i];
  }
  std::vector<double> out(ks.size());
  for (std::size_t i = 0; i < ks.size(); ++i) out[i] = static_cast<double>(hits[i]) / static_cast<double>(n);
  return out;
}

}  // namespace gapan
