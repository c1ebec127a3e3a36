#pragma once

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gapan/data.hpp"
#include "gapan/losses.hpp"
#include "gapan/prior.hpp"

namespace gapan {

// Every training hyperparameter. Defaults are the published full-scale
// protocol; desk-scale runs override lr (or the per-group multipliers),
// flow_hidden, and batch_categories.
struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t warmup_epochs = 5;
  double lr = 1e-5;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_decay_factor = 0.9;
  std::size_t lr_decay_every = 5;
  LossWeights weights;
  std::size_t flow_layers = 8;
  std::size_t flow_hidden = 512;
  double scale_clamp = 5.0;
  std::size_t embedding_dim = kDefaultEmbeddingDim;
  std::size_t n_s = 6;
  TruncationSpec truncation;
  std::size_t batch_categories = 16;
  std::size_t steps_per_epoch = 0;  // 0: ceil(train size / batch size)
  std::vector<std::size_t> eval_ks = {1, 2, 4, 8};
  std::uint64_t seed = 0;
  double lr_mult_head = 1.0;
  double lr_mult_flow = 1.0;
  double lr_mult_prior = 1.0;
  double grad_clip = 0.0;  // global L2 norm clip per step; 0 disables
  bool batch_negatives_only = false;
  bool anchor_pass_through = false;

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0)) throw ArgumentError(std::string("config: ") + name + " must be positive");
    };
    if (epochs == 0) throw ArgumentError("config: epochs must be positive");
    if (warmup_epochs >= epochs) throw ArgumentError("config: warmup_epochs must be < epochs");
    positive(lr, "lr");
    positive(weights.tau, "tau");
    positive(lr_decay_factor, "lr_decay_factor");
    positive(scale_clamp, "scale_clamp");
    if (lr_decay_every == 0) throw ArgumentError("config: lr_decay_every must be positive");
    if (momentum < 0 || weight_decay < 0) throw ArgumentError("config: momentum and weight_decay must be >= 0");
    if (weights.alpha < 0 || weights.beta < 0 || weights.gamma < 0)
      throw ArgumentError("config: loss weights must be >= 0");
    if (lr_mult_head < 0 || lr_mult_flow < 0 || lr_mult_prior < 0 || grad_clip < 0)
      throw ArgumentError("config: lr multipliers and grad_clip must be >= 0");
    if (flow_layers == 0 || flow_hidden == 0 || embedding_dim == 0 || n_s == 0 || batch_categories == 0)
      throw ArgumentError("config: flow_layers, flow_hidden, embedding_dim, n_s, batch_categories must be positive");
    if (eval_ks.empty()) throw ArgumentError("config: eval_ks must not be empty");
    for (auto k : eval_ks)
      if (k == 0) throw ArgumentError("config: eval_ks entries must be positive");
    truncation.validate();
  }
};

/// lr * decay_factor ^ floor(epoch / decay_every), epoch counted from 0.
inline double lr_at(const TrainConfig& cfg, std::size_t epoch) {
  return cfg.lr * std::pow(cfg.lr_decay_factor, static_cast<double>(epoch / cfg.lr_decay_every));
}

// Everything a run reads from a config file: training, synthesis, paths.
struct RunConfig {
  TrainConfig train;
  SyntheticSpec synth;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ArgumentError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ArgumentError("config: key '" + key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ArgumentError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

// Key table shared by the reader and the canonical writer.
struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto num = [&f](std::string key, auto member_ptr_get) {
      f.push_back({key,
                   [member_ptr_get](const RunConfig& c) {
                     using V = std::remove_cvref_t<decltype(member_ptr_get(const_cast<RunConfig&>(c)))>;
                     const V& v = member_ptr_get(const_cast<RunConfig&>(c));
                     if constexpr (std::is_same_v<V, bool>) return std::string(v ? "true" : "false");
                     else if constexpr (std::is_floating_point_v<V>) return fmt_double(v);
                     else return std::to_string(v);
                   },
                   [member_ptr_get, key](RunConfig& c, const std::string& s) {
                     auto& v = member_ptr_get(c);
                     using V = std::remove_cvref_t<decltype(v)>;
                     if constexpr (std::is_same_v<V, bool>) v = parse_bool(key, s);
                     else if constexpr (std::is_floating_point_v<V>) v = parse_double(key, s);
                     else v = static_cast<V>(parse_uint(key, s));
                   }});
    };
    num("epochs", [](RunConfig& c) -> auto& { return c.train.epochs; });
    num("warmup_epochs", [](RunConfig& c) -> auto& { return c.train.warmup_epochs; });
    num("lr", [](RunConfig& c) -> auto& { return c.train.lr; });
    num("momentum", [](RunConfig& c) -> auto& { return c.train.momentum; });
    num("weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; });
    num("lr_decay_factor", [](RunConfig& c) -> auto& { return c.train.lr_decay_factor; });
    num("lr_decay_every", [](RunConfig& c) -> auto& { return c.train.lr_decay_every; });
    num("alpha", [](RunConfig& c) -> auto& { return c.train.weights.alpha; });
    num("beta", [](RunConfig& c) -> auto& { return c.train.weights.beta; });
    num("gamma", [](RunConfig& c) -> auto& { return c.train.weights.gamma; });
    num("tau", [](RunConfig& c) -> auto& { return c.train.weights.tau; });
    num("flow_layers", [](RunConfig& c) -> auto& { return c.train.flow_layers; });
    num("flow_hidden", [](RunConfig& c) -> auto& { return c.train.flow_hidden; });
    num("scale_clamp", [](RunConfig& c) -> auto& { return c.train.scale_clamp; });
    num("embedding_dim", [](RunConfig& c) -> auto& { return c.train.embedding_dim; });
    num("n_s", [](RunConfig& c) -> auto& { return c.train.n_s; });
    num("d", [](RunConfig& c) -> auto& { return c.train.truncation.radius; });
    f.push_back({"truncation_mode",
                 [](const RunConfig& c) {
                   return std::string(c.train.truncation.mode == TruncationMode::Absolute ? "absolute" : "scaled");
                 },
                 [](RunConfig& c, const std::string& s) {
                   if (s == "absolute") c.train.truncation.mode = TruncationMode::Absolute;
                   else if (s == "scaled") c.train.truncation.mode = TruncationMode::ScaledBySqrtDim;
                   else throw ArgumentError("config: truncation_mode must be 'absolute' or 'scaled', got '" + s + "'");
                 }});
    num("max_rejection_attempts", [](RunConfig& c) -> auto& { return c.train.truncation.max_rejection_attempts; });
    num("batch_categories", [](RunConfig& c) -> auto& { return c.train.batch_categories; });
    num("steps_per_epoch", [](RunConfig& c) -> auto& { return c.train.steps_per_epoch; });
    f.push_back({"eval_ks",
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.train.eval_ks.size(); ++i)
                     s += (i ? "," : "") + std::to_string(c.train.eval_ks[i]);
                   return s;
                 },
                 [](RunConfig& c, const std::string& s) {
                   std::vector<std::size_t> ks;
                   std::stringstream ss(s);
                   std::string item;
                   while (std::getline(ss, item, ',')) ks.push_back(parse_uint("eval_ks", trim(item)));
                   c.train.eval_ks = std::move(ks);
                 }});
    num("seed", [](RunConfig& c) -> auto& { return c.train.seed; });
    num("lr_mult_head", [](RunConfig& c) -> auto& { return c.train.lr_mult_head; });
    num("lr_mult_flow", [](RunConfig& c) -> auto& { return c.train.lr_mult_flow; });
    num("lr_mult_prior", [](RunConfig& c) -> auto& { return c.train.lr_mult_prior; });
    num("grad_clip", [](RunConfig& c) -> auto& { return c.train.grad_clip; });
    num("batch_negatives_only", [](RunConfig& c) -> auto& { return c.train.batch_negatives_only; });
    num("anchor_pass_through", [](RunConfig& c) -> auto& { return c.train.anchor_pass_through; });
    num("synth.dim", [](RunConfig& c) -> auto& { return c.synth.dim; });
    num("synth.seen_classes", [](RunConfig& c) -> auto& { return c.synth.seen_classes; });
    num("synth.unseen_classes", [](RunConfig& c) -> auto& { return c.synth.unseen_classes; });
    num("synth.instances_per_class", [](RunConfig& c) -> auto& { return c.synth.instances_per_class; });
    num("synth.class_separation", [](RunConfig& c) -> auto& { return c.synth.class_separation; });
    num("synth.intra_class_scale", [](RunConfig& c) -> auto& { return c.synth.intra_class_scale; });
    num("synth.nuisance_dims", [](RunConfig& c) -> auto& { return c.synth.nuisance_dims; });
    num("synth.nuisance_scale", [](RunConfig& c) -> auto& { return c.synth.nuisance_scale; });
    num("synth.seed", [](RunConfig& c) -> auto& { return c.synth.seed; });
    return f;
  }();
  return table;
}

}  // namespace detail

/// Applies one `key=value` assignment. Unknown keys are rejected.
inline void apply_setting(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ArgumentError("config: expected key=value, got '" + assignment + "'");
  const std::string key = detail::trim(assignment.substr(0, eq));
  const std::string value = detail::trim(assignment.substr(eq + 1));
  for (const auto& f : detail::fields())
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  throw ArgumentError("config: unknown key '" + key + "'");
}

/// Parses key=value lines ('#' starts a comment) on top of `base`.
inline RunConfig parse_run_config(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    apply_setting(base, line);
  }
  return base;
}

/// One `key=value` line per known key, fixed order; parse_run_config inverts it.
inline std::string canonical_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + "=" + f.get(cfg) + "\n";
  return out;
}

}  // namespace gapan
