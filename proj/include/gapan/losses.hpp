#pragma once

#include <cmath>
#include <vector>

#include "gapan/anchorgen.hpp"
#include "gapan/model.hpp"

namespace gapan {

struct LossWeights {
  double alpha = 0.5;  // likelihood
  double beta = 0.3;   // posterior calibration
  double gamma = 0.4;  // prior-guided alignment
  double tau = 0.09;   // shared contrastive temperature
};

// Two instances from each of N categories; positive_index pairs them.
template <class T>
struct Batch {
  std::vector<Vec<T>> features;
  std::vector<std::size_t> labels;          // dense class indices
  std::vector<std::size_t> positive_index;  // p(i) != i, labels[p(i)] == labels[i]
  std::vector<std::size_t> rows;            // source rows in the dataset, if any

  std::size_t size() const { return features.size(); }
};

template <class T>
struct LossResult {
  T value = 0;
  Network<T> grad;
};

// Value plus gradients with respect to the embeddings it was given.
template <class T>
struct EmbeddingLoss {
  T value = 0;
  std::vector<Vec<T>> d_embeddings;
};

template <class T>
struct AlignmentLoss {
  T value = 0;
  std::vector<Vec<T>> d_instances;
  std::vector<std::vector<Vec<T>>> d_anchors;  // [class][anchor]
};

namespace detail {

template <class T>
void check_batch(const Batch<T>& batch, std::size_t num_classes) {
  if (batch.size() == 0) throw ArgumentError("loss: empty batch");
  if (batch.labels.size() != batch.size()) throw ShapeError("loss: labels/features length mismatch");
  for (std::size_t y : batch.labels)
    if (y >= num_classes) throw ArgumentError("loss: label " + std::to_string(y) + " out of range");
}

}  // namespace detail

/// Batch-pair contrastive loss: for each i, -log softmax over m != i of
/// sim(R_i, R_m) / tau, evaluated at the positive p(i).
template <class T>
EmbeddingLoss<T> contrastive_aux(const std::vector<Vec<T>>& emb, std::span<const std::size_t> positive_index, T tau) {
  const std::size_t n = emb.size();
  if (n < 4) throw ArgumentError("contrastive_aux: batch must hold at least 4 embeddings");
  if (positive_index.size() != n) throw ShapeError("contrastive_aux: positive_index length mismatch");
  if (!(tau > T(0))) throw ArgumentError("contrastive_aux: tau must be positive");
  EmbeddingLoss<T> out;
  out.d_embeddings.assign(n, Vec<T>(emb.front().size(), T(0)));
  std::vector<T> logits(n - 1);
  std::vector<std::size_t> idx(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t p = positive_index[i];
    if (p == i || p >= n) throw ArgumentError("contrastive_aux: invalid positive index");
    std::size_t pos_slot = 0;
    for (std::size_t m = 0, s = 0; m < n; ++m) {
      if (m == i) continue;
      logits[s] = cosine_sim(std::span<const T>(emb[i]), std::span<const T>(emb[m])) / tau;
      idx[s] = m;
      if (m == p) pos_slot = s;
      ++s;
    }
    const T lse = logsumexp(std::span<const T>(logits));
    out.value += lse - logits[pos_slot];
    for (std::size_t s = 0; s < n - 1; ++s) {
      const T w = (std::exp(logits[s] - lse) - (s == pos_slot ? T(1) : T(0))) / (tau * static_cast<T>(n));
      cosine_sim_backward(std::span<const T>(emb[i]), std::span<const T>(emb[idx[s]]), w,
                          std::span<T>(out.d_embeddings[i]), std::span<T>(out.d_embeddings[idx[s]]));
    }
  }
  out.value /= static_cast<T>(n);
  return out;
}

/// Prior-guided alignment: each instance against all anchors of the allowed
/// classes, with its own class's anchors as positives. `allowed_negatives`
/// (size K, optional) restricts which other classes enter the denominator.
template <class T>
AlignmentLoss<T> prior_alignment(const std::vector<Vec<T>>& emb, std::span<const std::size_t> labels,
                                 const std::vector<std::vector<Vec<T>>>& anchor_emb, T tau,
                                 const std::vector<bool>* allowed_negatives = nullptr) {
  const std::size_t n = emb.size();
  const std::size_t num_classes = anchor_emb.size();
  if (n == 0) throw ArgumentError("prior_alignment: empty batch");
  if (labels.size() != n) throw ShapeError("prior_alignment: labels length mismatch");
  if (!(tau > T(0))) throw ArgumentError("prior_alignment: tau must be positive");
  const std::size_t n_s = num_classes ? anchor_emb.front().size() : 0;
  if (n_s == 0) throw ArgumentError("prior_alignment: no anchors");
  for (const auto& c : anchor_emb)
    if (c.size() != n_s) throw ArgumentError("prior_alignment: every class needs the same number of anchors");

  AlignmentLoss<T> out;
  const std::size_t dim = emb.front().size();
  out.d_instances.assign(n, Vec<T>(dim, T(0)));
  out.d_anchors.assign(num_classes, std::vector<Vec<T>>(n_s, Vec<T>(dim, T(0))));
  std::vector<T> logits;
  std::vector<std::size_t> cls;
  for (std::size_t m = 0; m < n; ++m) {
    const std::size_t y = labels[m];
    if (y >= num_classes) throw ArgumentError("prior_alignment: label out of range");
    logits.clear();
    cls.clear();
    T pos_sum = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (c != y && allowed_negatives && !(*allowed_negatives)[c]) continue;
      for (std::size_t j = 0; j < n_s; ++j) {
        const T l = cosine_sim(std::span<const T>(emb[m]), std::span<const T>(anchor_emb[c][j])) / tau;
        logits.push_back(l);
        cls.push_back(c);
        if (c == y) pos_sum += l;
      }
    }
    const T lse = logsumexp(std::span<const T>(logits));
    out.value += lse - pos_sum / static_cast<T>(n_s);
    std::size_t s = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (c != y && allowed_negatives && !(*allowed_negatives)[c]) continue;
      for (std::size_t j = 0; j < n_s; ++j, ++s) {
        const T target = c == y ? T(1) / static_cast<T>(n_s) : T(0);
        const T w = (std::exp(logits[s] - lse) - target) / (tau * static_cast<T>(n));
        cosine_sim_backward(std::span<const T>(emb[m]), std::span<const T>(anchor_emb[c][j]), w,
                            std::span<T>(out.d_instances[m]), std::span<T>(out.d_anchors[c][j]));
      }
    }
  }
  out.value /= static_cast<T>(n);
  return out;
}

/// Negative log-likelihood of the batch under its class priors pushed
/// through the flow. Gradients over flow and priors.
template <class T>
LossResult<T> loss_nf(const Network<T>& net, const Batch<T>& batch) {
  detail::check_batch(batch, net.priors.num_classes());
  LossResult<T> out{T(0), zeros_like(net)};
  const T inv_b = T(1) / static_cast<T>(batch.size());
  std::vector<CouplingTrace<T>> traces;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t y = batch.labels[i];
    const FlowResult<T> fr = flow_forward_traced(net.flow, std::span<const T>(batch.features[i]), &traces);
    const PriorDensityGrad<T> pg = log_prior_density_grad(net.priors, std::span<const T>(fr.z), y);
    out.value -= (pg.value + fr.logdet) * inv_b;
    Vec<T> gz(pg.d_latent.size());
    for (std::size_t j = 0; j < gz.size(); ++j) {
      gz[j] = -pg.d_latent[j] * inv_b;
      out.grad.priors.means[y][j] -= pg.d_mean[j] * inv_b;
      out.grad.priors.log_variances[y][j] -= pg.d_log_variance[j] * inv_b;
    }
    flow_backward_accumulate(net.flow, traces, std::span<const T>(gz), -inv_b, out.grad.flow);
  }
  return out;
}

/// Cross-entropy of the latent class posterior against the labels.
template <class T>
LossResult<T> loss_ca(const Network<T>& net, const Batch<T>& batch) {
  const std::size_t num_classes = net.priors.num_classes();
  detail::check_batch(batch, num_classes);
  LossResult<T> out{T(0), zeros_like(net)};
  const T inv_b = T(1) / static_cast<T>(batch.size());
  std::vector<CouplingTrace<T>> traces;
  std::vector<PriorDensityGrad<T>> pg(num_classes);
  Vec<T> lp(num_classes);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t y = batch.labels[i];
    const FlowResult<T> fr = flow_forward_traced(net.flow, std::span<const T>(batch.features[i]), &traces);
    for (std::size_t k = 0; k < num_classes; ++k) {
      pg[k] = log_prior_density_grad(net.priors, std::span<const T>(fr.z), k);
      lp[k] = pg[k].value;
    }
    const T lse = logsumexp(std::span<const T>(lp));
    out.value += (lse - lp[y]) * inv_b;
    Vec<T> gz(fr.z.size(), T(0));
    for (std::size_t k = 0; k < num_classes; ++k) {
      const T w = (std::exp(lp[k] - lse) - (k == y ? T(1) : T(0))) * inv_b;
      if (w == T(0)) continue;
      for (std::size_t j = 0; j < gz.size(); ++j) {
        gz[j] += w * pg[k].d_latent[j];
        out.grad.priors.means[k][j] += w * pg[k].d_mean[j];
        out.grad.priors.log_variances[k][j] += w * pg[k].d_log_variance[j];
      }
    }
    flow_backward_accumulate(net.flow, traces, std::span<const T>(gz), T(0), out.grad.flow);
  }
  return out;
}

/// Auxiliary pairwise contrastive loss on head embeddings of the batch.
template <class T>
LossResult<T> loss_aux(const Network<T>& net, const Batch<T>& batch, T tau) {
  if (batch.positive_index.size() != batch.size()) throw ShapeError("loss_aux: positive_index length mismatch");
  std::vector<MlpTrace<T>> traces;
  std::vector<Vec<T>> emb;
  for (const auto& v : batch.features) {
    traces.push_back(mlp_trace(net.head.projector, std::span<const T>(v)));
    emb.push_back(traces.back().output());
  }
  const EmbeddingLoss<T> el = contrastive_aux(emb, std::span<const std::size_t>(batch.positive_index), tau);
  LossResult<T> out{el.value, zeros_like(net)};
  for (std::size_t i = 0; i < emb.size(); ++i)
    mlp_backward_accumulate(net.head.projector, traces[i], std::span<const T>(el.d_embeddings[i]),
                            out.grad.head.projector);
  return out;
}

struct AlignmentOptions {
  // Only classes present in the batch contribute negatives.
  bool batch_negatives_only = false;
  // Differentiate through the anchors into flow and priors (reparameterized
  // through the stored whitened draws). Off: anchors are constants past V_aug.
  bool pass_through = false;
};

/// Prior-guided alignment of batch embeddings with the anchors. Anchor
/// embeddings are recomputed with the current head, so gradients reach the
/// head through both instances and anchors.
template <class T>
LossResult<T> loss_ali(const Network<T>& net, const Batch<T>& batch, const AnchorSet<T>& anchors, T tau,
                       const AlignmentOptions& opts = {}) {
  const std::size_t num_classes = net.priors.num_classes();
  detail::check_batch(batch, num_classes);
  if (anchors.by_class.size() != num_classes) throw ArgumentError("loss_ali: anchor set / prior class count mismatch");

  std::vector<MlpTrace<T>> traces;
  std::vector<Vec<T>> emb;
  for (const auto& v : batch.features) {
    traces.push_back(mlp_trace(net.head.projector, std::span<const T>(v)));
    emb.push_back(traces.back().output());
  }
  std::vector<std::vector<Vec<T>>> latents(num_classes), features(num_classes), anchor_emb(num_classes);
  std::vector<std::vector<MlpTrace<T>>> anchor_traces(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (anchors.by_class[c].empty()) throw ArgumentError("loss_ali: no anchors for class " + std::to_string(c));
    for (const auto& a : anchors.by_class[c]) {
      Vec<T> feat = a.feature;
      if (opts.pass_through) {
        Vec<T> s = detail::dewhiten(net.priors, c, std::span<const T>(a.whitened));
        feat = flow_inverse(net.flow, std::span<const T>(s));
        latents[c].push_back(std::move(s));
      }
      anchor_traces[c].push_back(mlp_trace(net.head.projector, std::span<const T>(feat)));
      anchor_emb[c].push_back(anchor_traces[c].back().output());
      features[c].push_back(std::move(feat));
    }
  }
  std::vector<bool> allowed;
  if (opts.batch_negatives_only) {
    allowed.assign(num_classes, false);
    for (std::size_t y : batch.labels) allowed[y] = true;
  }
  const AlignmentLoss<T> al = prior_alignment(emb, std::span<const std::size_t>(batch.labels), anchor_emb, tau,
                                              opts.batch_negatives_only ? &allowed : nullptr);
  LossResult<T> out{al.value, zeros_like(net)};
  for (std::size_t i = 0; i < emb.size(); ++i)
    mlp_backward_accumulate(net.head.projector, traces[i], std::span<const T>(al.d_instances[i]),
                            out.grad.head.projector);
  for (std::size_t c = 0; c < num_classes; ++c)
    for (std::size_t j = 0; j < anchor_emb[c].size(); ++j) {
      const Vec<T> d_feat = mlp_backward_accumulate(net.head.projector, anchor_traces[c][j],
                                                    std::span<const T>(al.d_anchors[c][j]), out.grad.head.projector);
      if (!opts.pass_through) continue;
      const Vec<T> d_lat = flow_inverse_backward_accumulate(net.flow, std::span<const T>(latents[c][j]),
                                                            std::span<const T>(d_feat), out.grad.flow);
      const auto& w = anchors.by_class[c][j].whitened;
      for (std::size_t d = 0; d < d_lat.size(); ++d) {
        out.grad.priors.means[c][d] += d_lat[d];
        out.grad.priors.log_variances[c][d] +=
            d_lat[d] * T(0.5) * std::exp(T(0.5) * net.priors.log_variances[c][d]) * w[d];
      }
    }
  return out;
}

/// aux + alpha * nf + beta * ca + gamma * ali, values and gradients alike.
template <class T>
LossResult<T> loss_total(const LossWeights& w, const LossResult<T>& aux, const LossResult<T>& nf,
                         const LossResult<T>& ca, const LossResult<T>& ali) {
  LossResult<T> out{T(0), aux.grad};
  out.value = aux.value + static_cast<T>(w.alpha) * nf.value + static_cast<T>(w.beta) * ca.value +
              static_cast<T>(w.gamma) * ali.value;
  add_scaled(out.grad, nf.grad, w.alpha);
  add_scaled(out.grad, ca.grad, w.beta);
  add_scaled(out.grad, ali.grad, w.gamma);
  return out;
}

}  // namespace gapan
