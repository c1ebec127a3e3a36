#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gapan/anchorgen.hpp"
#include "gapan/config.hpp"
#include "gapan/data.hpp"
#include "gapan/losses.hpp"
#include "gapan/model.hpp"

namespace gapan {

/// Momentum SGD with L2 weight decay on tensors flagged for decay:
/// g' = g + wd * p, buf = momentum * buf + g', p -= lr * buf.
template <class M>
void sgd_step(M& params, const M& grads, M& buffers, double lr, double momentum, double weight_decay) {
  using T = typename M::value_type;
  std::vector<std::vector<T>*> p;
  std::vector<bool> decay;
  for_each_parameter(params, [&](const std::string&, const auto&, auto& v, bool d) {
    p.push_back(&v);
    decay.push_back(d);
  });
  std::vector<const std::vector<T>*> g;
  for_each_parameter(grads, [&](const std::string&, const auto&, const auto& v, bool) { g.push_back(&v); });
  auto b = parameter_tensors(buffers);
  if (p.size() != g.size() || p.size() != b.size()) throw ShapeError("sgd_step: tensor count mismatch");
  const T tlr = static_cast<T>(lr), tm = static_cast<T>(momentum), twd = static_cast<T>(weight_decay);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i]->size() != g[i]->size() || p[i]->size() != b[i]->size()) throw ShapeError("sgd_step: tensor shape mismatch");
    auto& pv = *p[i];
    auto& bv = *b[i];
    const auto& gv = *g[i];
    for (std::size_t j = 0; j < pv.size(); ++j) {
      const T gj = decay[i] ? gv[j] + twd * pv[j] : gv[j];
      bv[j] = tm * bv[j] + gj;
      pv[j] -= tlr * bv[j];
    }
  }
}

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  int phase = 1;
  std::optional<double> loss_aux, loss_nf, loss_ca, loss_ali, loss_total;
  double lr = 0;
  std::vector<std::pair<std::size_t, double>> recall;
  double wall_seconds = 0;
  std::size_t anchor_fallbacks = 0;

  // Equality of everything except wall-clock time.
  bool same_values(const EpochMetrics& o) const {
    return epoch == o.epoch && phase == o.phase && loss_aux == o.loss_aux && loss_nf == o.loss_nf &&
           loss_ca == o.loss_ca && loss_ali == o.loss_ali && loss_total == o.loss_total && lr == o.lr &&
           recall == o.recall && anchor_fallbacks == o.anchor_fallbacks;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    j["epoch"] = epoch;
    j["phase"] = phase;
    j["loss_aux"] = opt(loss_aux);
    j["loss_nf"] = opt(loss_nf);
    j["loss_ca"] = opt(loss_ca);
    j["loss_ali"] = opt(loss_ali);
    j["loss_total"] = opt(loss_total);
    j["lr"] = lr;
    for (const auto& [k, r] : recall) j["recall@" + std::to_string(k)] = r;
    j["wall_seconds"] = wall_seconds;
    j["anchor_fallbacks"] = anchor_fallbacks;
    return j;
  }
};

// Full training state; a checkpoint is exactly this.
template <class T = double>
struct TrainerState {
  RunConfig run;
  Network<T> net;
  Network<T> momentum;                     // SGD buffers, congruent with net
  std::vector<std::uint32_t> class_labels; // dense class index -> dataset label
  std::size_t epochs_done = 0;
  std::uint64_t step = 0;
  bool priors_initialized = false;
  Rng rng;

  const TrainConfig& config() const { return run.train; }
  NetworkShape shape() const {
    NetworkShape s;
    s.feature_dim = net.flow.dim;
    s.embedding_dim = run.train.embedding_dim;
    s.num_classes = class_labels.size();
    s.flow_layers = run.train.flow_layers;
    s.flow_hidden = run.train.flow_hidden;
    s.scale_clamp = run.train.scale_clamp;
    return s;
  }
};

using Checkpoint = TrainerState<double>;

template <class T = double>
TrainerState<T> init_trainer(const RunConfig& run, const FeatureDataset& train) {
  run.train.validate();
  train.validate();
  TrainerState<T> st;
  st.run = run;
  st.class_labels = train.classes();
  NetworkShape shape;
  shape.feature_dim = train.dim;
  shape.embedding_dim = run.train.embedding_dim;
  shape.num_classes = st.class_labels.size();
  shape.flow_layers = run.train.flow_layers;
  shape.flow_hidden = run.train.flow_hidden;
  shape.scale_clamp = run.train.scale_clamp;
  Rng init_rng = derive_stream(run.train.seed, 0x1417, 0);
  st.net = make_network<T>(shape, init_rng);
  st.momentum = zeros_like(st.net);
  st.rng = Rng(run.train.seed);
  return st;
}

template <class T>
std::size_t batch_categories(const TrainerState<T>& st) {
  return std::min(st.config().batch_categories, st.class_labels.size());
}

template <class T>
std::size_t steps_per_epoch(const TrainerState<T>& st, const FeatureDataset& train) {
  if (st.config().steps_per_epoch > 0) return st.config().steps_per_epoch;
  const std::size_t b = 2 * batch_categories(st);
  return std::max<std::size_t>(1, (train.count() + b - 1) / b);
}

/// Class priors from the flow-mapped training features (per-class mean and
/// floored variance).
template <class T>
void initialize_priors(TrainerState<T>& st, const FeatureDataset& train) {
  std::vector<Vec<T>> latents;
  latents.reserve(train.count());
  for (std::size_t i = 0; i < train.count(); ++i) {
    const Vec<T> v = train.row_as<T>(i);
    latents.push_back(flow_forward(st.net.flow, std::span<const T>(v)).z);
  }
  const auto dense = train.dense_labels();
  st.net.priors = init_priors_from_latents(latents, std::span<const std::size_t>(dense), st.class_labels.size());
  st.momentum.priors = zeros_like(st.net.priors);
  st.priors_initialized = true;
}

namespace detail {

template <class M>
double global_norm(const M& m) {
  double s = 0;
  for_each_parameter(m, [&](const std::string&, const auto&, const auto& v, bool) {
    for (auto x : v) s += static_cast<double>(x) * static_cast<double>(x);
  });
  return std::sqrt(s);
}

template <class M>
void check_finite_params(const M& m, const char* what) {
  for_each_parameter(m, [&](const std::string& name, const auto&, const auto& v, bool) {
    for (auto x : v)
      if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value in " + name);
  });
}

struct LossAccumulator {
  double aux = 0, nf = 0, ca = 0, ali = 0, total = 0;
  std::size_t n = 0;
};

}  // namespace detail

/// Warm-up epoch: auxiliary contrastive loss only, head parameters only.
template <class T>
EpochMetrics train_epoch_phase1(TrainerState<T>& st, const FeatureDataset& train) {
  const auto& cfg = st.config();
  const std::size_t epoch = st.epochs_done + 1;
  const double lr = lr_at(cfg, epoch - 1);
  const std::size_t steps = steps_per_epoch(st, train);
  detail::LossAccumulator acc;
  for (std::size_t s = 0; s < steps; ++s) {
    const Batch<T> batch = sample_batch<T>(train, batch_categories(st), st.rng);
    LossResult<T> aux = loss_aux(st.net, batch, static_cast<T>(cfg.weights.tau));
    if (!std::isfinite(aux.value)) throw NumericError("phase 1: non-finite auxiliary loss");
    if (cfg.grad_clip > 0) {
      const double g = detail::global_norm(aux.grad.head);
      if (g > cfg.grad_clip) scale_all(aux.grad.head, static_cast<T>(cfg.grad_clip / g));
    }
    sgd_step(st.net.head, aux.grad.head, st.momentum.head, lr * cfg.lr_mult_head, cfg.momentum, cfg.weight_decay);
    acc.aux += static_cast<double>(aux.value);
    acc.total += static_cast<double>(aux.value);
    ++acc.n;
    ++st.step;
  }
  ++st.epochs_done;
  EpochMetrics m;
  m.epoch = epoch;
  m.phase = 1;
  m.lr = lr;
  m.loss_aux = acc.aux / static_cast<double>(acc.n);
  m.loss_total = acc.total / static_cast<double>(acc.n);
  return m;
}

/// Joint epoch: all four losses, head + flow + priors updated together.
/// Anchors are regenerated every step.
template <class T>
EpochMetrics train_epoch_phase2(TrainerState<T>& st, const FeatureDataset& train) {
  if (!st.priors_initialized) initialize_priors(st, train);
  const auto& cfg = st.config();
  const std::size_t epoch = st.epochs_done + 1;
  const double lr = lr_at(cfg, epoch - 1);
  const std::size_t steps = steps_per_epoch(st, train);
  const T tau = static_cast<T>(cfg.weights.tau);
  std::vector<std::size_t> all_classes(st.class_labels.size());
  std::iota(all_classes.begin(), all_classes.end(), std::size_t{0});
  AlignmentOptions opts;
  opts.batch_negatives_only = cfg.batch_negatives_only;
  opts.pass_through = cfg.anchor_pass_through;
  detail::LossAccumulator acc;
  std::size_t fallbacks = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    const Batch<T> batch = sample_batch<T>(train, batch_categories(st), st.rng);
    const LossResult<T> aux = loss_aux(st.net, batch, tau);
    const LossResult<T> nf = loss_nf(st.net, batch);
    const LossResult<T> ca = loss_ca(st.net, batch);
    const AnchorSet<T> anchors = generate_anchors(st.net, std::span<const std::size_t>(all_classes), cfg.n_s,
                                                  cfg.truncation, cfg.seed, st.step);
    fallbacks += anchors.fallbacks;
    const LossResult<T> ali = loss_ali(st.net, batch, anchors, tau, opts);
    LossResult<T> total = loss_total(cfg.weights, aux, nf, ca, ali);
    if (!std::isfinite(total.value)) throw NumericError("phase 2: non-finite total loss at step " + std::to_string(st.step));
    if (cfg.grad_clip > 0) {
      const double g = detail::global_norm(total.grad);
      if (g > cfg.grad_clip) scale_all(total.grad, static_cast<T>(cfg.grad_clip / g));
    }
    sgd_step(st.net.head, total.grad.head, st.momentum.head, lr * cfg.lr_mult_head, cfg.momentum, cfg.weight_decay);
    sgd_step(st.net.flow, total.grad.flow, st.momentum.flow, lr * cfg.lr_mult_flow, cfg.momentum, cfg.weight_decay);
    sgd_step(st.net.priors, total.grad.priors, st.momentum.priors, lr * cfg.lr_mult_prior, cfg.momentum,
             cfg.weight_decay);
    apply_variance_floor(st.net.priors);
    acc.aux += static_cast<double>(aux.value);
    acc.nf += static_cast<double>(nf.value);
    acc.ca += static_cast<double>(ca.value);
    acc.ali += static_cast<double>(ali.value);
    acc.total += static_cast<double>(total.value);
    ++acc.n;
    ++st.step;
  }
  detail::check_finite_params(st.net, "phase 2");
  ++st.epochs_done;
  const double n = static_cast<double>(acc.n);
  EpochMetrics m;
  m.epoch = epoch;
  m.phase = 2;
  m.lr = lr;
  m.loss_aux = acc.aux / n;
  m.loss_nf = acc.nf / n;
  m.loss_ca = acc.ca / n;
  m.loss_ali = acc.ali / n;
  m.loss_total = acc.total / n;
  m.anchor_fallbacks = fallbacks;
  return m;
}

template <class T>
std::vector<Vec<T>> embed_all(const RetrievalHead<T>& head, const FeatureDataset& ds) {
  std::vector<Vec<T>> out;
  out.reserve(ds.count());
  for (std::size_t i = 0; i < ds.count(); ++i) {
    const Vec<T> v = ds.row_as<T>(i);
    out.push_back(embed(head, std::span<const T>(v)));
  }
  return out;
}

/// Recall@k of the head's embeddings over `ds` (every item queries the rest).
template <class T>
std::vector<std::pair<std::size_t, double>> evaluate_recall(const RetrievalHead<T>& head, const FeatureDataset& ds,
                                                            std::span<const std::size_t> ks) {
  const auto emb = embed_all(head, ds);
  std::vector<std::size_t> labels(ds.labels.begin(), ds.labels.end());
  const auto r = recall_at_k(emb, std::span<const std::size_t>(labels), ks);
  std::vector<std::pair<std::size_t, double>> out;
  for (std::size_t i = 0; i < ks.size(); ++i) out.emplace_back(ks[i], r[i]);
  return out;
}

/// Mean over `ds` of log p(v | class of v). Labels are mapped through the
/// state's class table; rows whose label is unknown are rejected.
template <class T>
double mean_log_feature_density(const TrainerState<T>& st, const FeatureDataset& ds) {
  double s = 0;
  for (std::size_t i = 0; i < ds.count(); ++i) {
    const auto it = std::lower_bound(st.class_labels.begin(), st.class_labels.end(), ds.labels[i]);
    if (it == st.class_labels.end() || *it != ds.labels[i])
      throw ArgumentError("mean_log_feature_density: label " + std::to_string(ds.labels[i]) + " not a training class");
    const Vec<T> v = ds.row_as<T>(i);
    s += static_cast<double>(log_feature_density(st.net.priors, st.net.flow, std::span<const T>(v),
                                                 static_cast<std::size_t>(it - st.class_labels.begin())));
  }
  return s / static_cast<double>(ds.count());
}

/// Fraction of rows whose latent class posterior peaks at their own class.
template <class T>
double posterior_accuracy(const TrainerState<T>& st, const FeatureDataset& ds) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.count(); ++i) {
    const Vec<T> v = ds.row_as<T>(i);
    const Vec<T> p = class_posterior(st.net.priors, st.net.flow, std::span<const T>(v));
    const std::size_t arg = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    if (st.class_labels[arg] == ds.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ds.count());
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Runs epochs epochs_done+1 .. until_epoch (1-based; epoch t <= warmup is
/// phase 1), evaluating Recall@K on `test` after each one.
template <class T>
std::vector<EpochMetrics> run_epochs(TrainerState<T>& st, const FeatureDataset& train, const FeatureDataset& test,
                                     std::size_t until_epoch, const EpochCallback& on_epoch = {}) {
  std::vector<EpochMetrics> history;
  until_epoch = std::min(until_epoch, st.config().epochs);
  while (st.epochs_done < until_epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t epoch = st.epochs_done + 1;
    EpochMetrics m = epoch <= st.config().warmup_epochs ? train_epoch_phase1(st, train) : train_epoch_phase2(st, train);
    m.recall = evaluate_recall(st.net.head, test, std::span<const std::size_t>(st.config().eval_ks));
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_epoch) on_epoch(m);
    history.push_back(std::move(m));
  }
  return history;
}

template <class T = double>
std::pair<TrainerState<T>, std::vector<EpochMetrics>> train(const RunConfig& run, const FeatureDataset& train_set,
                                                            const FeatureDataset& test_set,
                                                            const EpochCallback& on_epoch = {}) {
  check_disjoint(train_set, test_set);
  test_set.validate();
  if (test_set.dim != train_set.dim) throw DatasetError("train/test feature dimensions differ");
  TrainerState<T> st = init_trainer<T>(run, train_set);
  auto history = run_epochs(st, train_set, test_set, run.train.epochs, on_epoch);
  return {std::move(st), std::move(history)};
}

// ---------------------------------------------------------------------------
// Checkpoint: "GAPC" | u32 version | u32 len + canonical config text |
// u32 dim | u32 K + K u32 labels | u64 epochs_done | u64 step | u8 priors_initialized |
// u32 n + n tensors | u32 n + n momentum tensors | u32 len + rng state text.
// Tensor: u32 name length | name | u32 rank | rank u32 dims | f64 values.

inline constexpr char kCheckpointMagic[4] = {'G', 'A', 'P', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class M>
void put_tensors(std::string& out, const M& m) {
  std::uint32_t n = 0;
  for_each_parameter(m, [&](const std::string&, const auto&, const auto&, bool) { ++n; });
  io::put_u32(out, n);
  for_each_parameter(m, [&](const std::string& name, const std::vector<std::size_t>& dims, const auto& v, bool) {
    io::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    io::put_u32(out, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) io::put_u32(out, static_cast<std::uint32_t>(d));
    for (auto x : v) io::put_f64(out, static_cast<double>(x));
  });
}

template <class M>
void get_tensors(io::Reader& r, M& m) {
  std::vector<std::tuple<std::string, std::vector<std::size_t>, std::vector<typename M::value_type>*>> slots;
  for_each_parameter(m, [&](const std::string& name, const std::vector<std::size_t>& dims, auto& v, bool) {
    slots.emplace_back(name, dims, &v);
  });
  const std::size_t at = r.offset();
  const std::uint32_t n = r.u32("tensor count");
  if (n != slots.size())
    throw FormatError("checkpoint: expected " + std::to_string(slots.size()) + " tensors, found " + std::to_string(n), at);
  for (auto& [name, dims, values] : slots) {
    const std::size_t name_at = r.offset();
    const std::string got = r.bytes(r.u32("tensor name length"), "tensor name");
    if (got != name) throw FormatError("checkpoint: expected tensor '" + name + "', found '" + got + "'", name_at);
    const std::uint32_t rank = r.u32("tensor rank");
    std::vector<std::size_t> got_dims(rank);
    for (auto& d : got_dims) d = r.u32("tensor dims");
    if (got_dims != dims) throw FormatError("checkpoint: shape mismatch for tensor '" + name + "'", name_at);
    for (auto& x : *values) x = static_cast<typename M::value_type>(r.f64("tensor values"));
  }
}

}  // namespace detail

template <class T>
std::string encode_checkpoint(const TrainerState<T>& st) {
  std::string out(kCheckpointMagic, 4);
  io::put_u32(out, kCheckpointVersion);
  const std::string cfg = canonical_text(st.run);
  io::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  io::put_u32(out, static_cast<std::uint32_t>(st.net.flow.dim));
  io::put_u32(out, static_cast<std::uint32_t>(st.class_labels.size()));
  for (auto y : st.class_labels) io::put_u32(out, y);
  io::put_u64(out, st.epochs_done);
  io::put_u64(out, st.step);
  out.push_back(st.priors_initialized ? 1 : 0);
  detail::put_tensors(out, st.net);
  detail::put_tensors(out, st.momentum);
  const std::string rs = rng_state(st.rng);
  io::put_u32(out, static_cast<std::uint32_t>(rs.size()));
  out += rs;
  return out;
}

template <class T = double>
TrainerState<T> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic (expected \"GAPC\")", 0);
  io::Reader r(bytes, "checkpoint");
  r.bytes(4, "magic");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")",
                      version_at);
  TrainerState<T> st;
  st.run = parse_run_config(r.bytes(r.u32("config length"), "config text"));
  const std::uint32_t dim = r.u32("dim");
  st.class_labels.resize(r.u32("class count"));
  for (auto& y : st.class_labels) y = r.u32("class labels");
  st.epochs_done = r.u64("epoch");
  st.step = r.u64("step");
  st.priors_initialized = r.bytes(1, "prior flag")[0] != 0;
  NetworkShape shape;
  shape.feature_dim = dim;
  shape.embedding_dim = st.run.train.embedding_dim;
  shape.num_classes = st.class_labels.size();
  shape.flow_layers = st.run.train.flow_layers;
  shape.flow_hidden = st.run.train.flow_hidden;
  shape.scale_clamp = st.run.train.scale_clamp;
  Rng scratch(0);
  st.net = make_network<T>(shape, scratch);
  st.momentum = zeros_like(st.net);
  detail::get_tensors(r, st.net);
  detail::get_tensors(r, st.momentum);
  restore_rng_state(st.rng, r.bytes(r.u32("rng state length"), "rng state"));
  r.expect_end();
  return st;
}

template <class T>
void save_checkpoint(const TrainerState<T>& st, const std::string& path) {
  io::write_file(path, encode_checkpoint(st));
}

template <class T = double>
TrainerState<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(io::read_file(path));
}

}  // namespace gapan
