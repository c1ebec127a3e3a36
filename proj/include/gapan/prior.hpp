#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "gapan/flow.hpp"
#include "gapan/numerics.hpp"

namespace gapan {

inline constexpr double kVarianceFloor = 1e-4;

// Per-class diagonal Gaussians N(mean_k, diag(exp(log_variance_k))) in latent space.
template <class T>
struct ClassPriorSet {
  using value_type = T;

  std::vector<Vec<T>> means;
  std::vector<Vec<T>> log_variances;

  ClassPriorSet() = default;
  ClassPriorSet(std::size_t num_classes, std::size_t dim)
      : means(num_classes, Vec<T>(dim, T(0))), log_variances(num_classes, Vec<T>(dim, T(0))) {}

  std::size_t num_classes() const { return means.size(); }
  std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }

  T variance(std::size_t k, std::size_t j) const { return std::exp(log_variances[k][j]); }

  template <class Self, class F>
  static void visit_params(Self& self, const std::string& prefix, F&& f) {
    for (std::size_t k = 0; k < self.means.size(); ++k)
      f(prefix + "mean/" + std::to_string(k), std::vector<std::size_t>{self.means[k].size()}, self.means[k], false);
    for (std::size_t k = 0; k < self.log_variances.size(); ++k)
      f(prefix + "logvar/" + std::to_string(k), std::vector<std::size_t>{self.log_variances[k].size()},
        self.log_variances[k], false);
  }
};

enum class TruncationMode { Absolute, ScaledBySqrtDim };

struct TruncationSpec {
  double radius = 1.0;
  TruncationMode mode = TruncationMode::ScaledBySqrtDim;
  std::size_t max_rejection_attempts = 1000;

  void validate() const {
    if (!(radius > 0.0) || !std::isfinite(radius)) throw ArgumentError("truncation radius must be positive");
    if (max_rejection_attempts < 1) throw ArgumentError("max_rejection_attempts must be >= 1");
  }

  double effective_radius(std::size_t dim) const {
    return mode == TruncationMode::Absolute ? radius : radius * std::sqrt(static_cast<double>(dim));
  }
};

namespace detail {

template <class T>
void check_class(const ClassPriorSet<T>& priors, std::size_t k) {
  if (k >= priors.num_classes())
    throw ArgumentError("class index " + std::to_string(k) + " out of range [0, " +
                        std::to_string(priors.num_classes()) + ")");
}

}  // namespace detail

/// log N(z | mean_k, diag(var_k)).
template <class T>
T log_prior_density(const ClassPriorSet<T>& priors, std::span<const T> z, std::size_t k) {
  detail::check_class(priors, k);
  detail::check_dim(z.size(), priors.dim(), "log_prior_density");
  const auto& mu = priors.means[k];
  const auto& lv = priors.log_variances[k];
  T quad = 0, logdet = 0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    const T d = z[j] - mu[j];
    quad += d * d * std::exp(-lv[j]);
    logdet += lv[j];
  }
  return T(-0.5) * (static_cast<T>(z.size()) * std::log(T(2) * T(M_PI)) + logdet + quad);
}

template <class T>
struct PriorDensityGrad {
  T value = 0;
  Vec<T> d_latent;
  Vec<T> d_mean;
  Vec<T> d_log_variance;
};

template <class T>
PriorDensityGrad<T> log_prior_density_grad(const ClassPriorSet<T>& priors, std::span<const T> z, std::size_t k) {
  PriorDensityGrad<T> g;
  g.value = log_prior_density(priors, z, k);
  const auto& mu = priors.means[k];
  const auto& lv = priors.log_variances[k];
  const std::size_t c = z.size();
  g.d_latent.resize(c);
  g.d_mean.resize(c);
  g.d_log_variance.resize(c);
  for (std::size_t j = 0; j < c; ++j) {
    const T inv = std::exp(-lv[j]);
    const T d = z[j] - mu[j];
    g.d_latent[j] = -d * inv;
    g.d_mean[j] = d * inv;
    g.d_log_variance[j] = T(-0.5) + T(0.5) * d * d * inv;
  }
  return g;
}

template <class T>
Vec<T> latent_log_densities(const ClassPriorSet<T>& priors, std::span<const T> z) {
  Vec<T> out(priors.num_classes());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = log_prior_density(priors, z, k);
  return out;
}

/// log p(v | k) = log N(F(v) | mean_k, var_k) + log|det dF/dv|.
template <class T>
T log_feature_density(const ClassPriorSet<T>& priors, const FlowModel<T>& model, std::span<const T> v,
                      std::size_t k) {
  detail::check_class(priors, k);
  const FlowResult<T> fr = flow_forward(model, v);
  return log_prior_density(priors, std::span<const T>(fr.z), k) + fr.logdet;
}

/// Softmax over classes of the latent Gaussian log densities at F(v). The
/// flow's Jacobian term is shared by every class and cancels.
template <class T>
Vec<T> class_posterior(const ClassPriorSet<T>& priors, const FlowModel<T>& model, std::span<const T> v) {
  const FlowResult<T> fr = flow_forward(model, v);
  const Vec<T> lp = latent_log_densities(priors, std::span<const T>(fr.z));
  return softmax(std::span<const T>(lp));
}

template <class T>
T mahalanobis(const ClassPriorSet<T>& priors, std::span<const T> z, std::size_t k) {
  detail::check_class(priors, k);
  detail::check_dim(z.size(), priors.dim(), "mahalanobis");
  T q = 0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    const T d = z[j] - priors.means[k][j];
    q += d * d * std::exp(-priors.log_variances[k][j]);
  }
  return std::sqrt(q);
}

template <class T>
struct TruncatedSamples {
  std::vector<Vec<T>> samples;
  // Standardized coordinates (sample - mean) / stddev, one per sample.
  std::vector<Vec<T>> whitened;
  std::size_t attempts = 0;
  std::size_t fallbacks = 0;
};

namespace detail {

template <class T>
Vec<T> dewhiten(const ClassPriorSet<T>& priors, std::size_t k, std::span<const T> eps) {
  Vec<T> s(eps.size());
  for (std::size_t j = 0; j < eps.size(); ++j)
    s[j] = priors.means[k][j] + std::exp(T(0.5) * priors.log_variances[k][j]) * eps[j];
  return s;
}

// Radius of a standard normal in `dim` dimensions conditioned on radius <= r_max.
inline double truncated_chi_radius(std::size_t dim, double r_max, Rng& rng) {
  const double a = 0.5 * static_cast<double>(dim);
  const double p_max = boost::math::gamma_p(a, 0.5 * r_max * r_max);
  if (!(p_max > 0.0)) return 0.0;
  const double u = uniform01(rng) * p_max;
  if (!(u > 0.0)) return 0.0;
  const double r = std::sqrt(2.0 * boost::math::gamma_p_inv(a, u));
  return std::min(r, r_max);
}

}  // namespace detail

/// Draws n latents from N(mean_k, var_k) restricted to the Mahalanobis ball of
/// radius spec.effective_radius(C). Each draw is first attempted by plain
/// rejection; after max_rejection_attempts misses the draw is built directly
/// as (uniform direction) x (truncated chi radius), which has the same law.
template <class T>
TruncatedSamples<T> sample_truncated(const ClassPriorSet<T>& priors, std::size_t k, const TruncationSpec& spec,
                                     std::size_t n, Rng& rng) {
  detail::check_class(priors, k);
  spec.validate();
  if (n < 1) throw ArgumentError("sample_truncated: n must be >= 1");
  const std::size_t c = priors.dim();
  if (!all_finite(std::span<const T>(priors.means[k])) || !all_finite(std::span<const T>(priors.log_variances[k])))
    throw NumericError("sample_truncated: non-finite prior parameters for class " + std::to_string(k));
  const T bound = static_cast<T>(spec.effective_radius(c));
  TruncatedSamples<T> out;
  Vec<T> eps(c);
  for (std::size_t s = 0; s < n; ++s) {
    bool accepted = false;
    Vec<T> sample;
    for (std::size_t a = 0; a < spec.max_rejection_attempts && !accepted; ++a) {
      ++out.attempts;
      for (auto& e : eps) e = static_cast<T>(standard_normal(rng));
      sample = detail::dewhiten(priors, k, std::span<const T>(eps));
      accepted = mahalanobis(priors, std::span<const T>(sample), k) <= bound;
    }
    if (!accepted) {
      ++out.fallbacks;
      double norm = 0;
      for (auto& e : eps) {
        e = static_cast<T>(standard_normal(rng));
        norm += static_cast<double>(e) * static_cast<double>(e);
      }
      norm = std::sqrt(norm);
      double r = detail::truncated_chi_radius(c, static_cast<double>(bound), rng);
      Vec<T> dir = eps;
      for (int shrink = 0;; ++shrink) {
        if (shrink == 60) r = 0.0;
        for (std::size_t j = 0; j < c; ++j) eps[j] = norm > 0 ? static_cast<T>(r * dir[j] / norm) : T(0);
        sample = detail::dewhiten(priors, k, std::span<const T>(eps));
        if (shrink == 60 || mahalanobis(priors, std::span<const T>(sample), k) <= bound) break;
        // rounding put the point a hair outside the ball
        r *= 1.0 - std::ldexp(1e-15, shrink);
      }
    }
    Vec<T> w(c);
    for (std::size_t j = 0; j < c; ++j)
      w[j] = (sample[j] - priors.means[k][j]) * std::exp(T(-0.5) * priors.log_variances[k][j]);
    out.whitened.push_back(std::move(w));
    out.samples.push_back(std::move(sample));
  }
  return out;
}

/// Fraction of raw Gaussian draws from class k that land inside the
/// truncation ball, over `attempts` draws.
template <class T>
double rejection_acceptance_rate(const ClassPriorSet<T>& priors, std::size_t k, const TruncationSpec& spec,
                                 std::size_t attempts, Rng& rng) {
  detail::check_class(priors, k);
  spec.validate();
  if (attempts == 0) throw ArgumentError("rejection_acceptance_rate: attempts must be positive");
  const std::size_t c = priors.dim();
  const T bound = static_cast<T>(spec.effective_radius(c));
  Vec<T> eps(c);
  std::size_t hits = 0;
  for (std::size_t a = 0; a < attempts; ++a) {
    for (auto& e : eps) e = static_cast<T>(standard_normal(rng));
    const Vec<T> s = detail::dewhiten(priors, k, std::span<const T>(eps));
    if (mahalanobis(priors, std::span<const T>(s), k) <= bound) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(attempts);
}

template <class T>
void apply_variance_floor(ClassPriorSet<T>& priors, double floor = kVarianceFloor) {
  const T lf = static_cast<T>(std::log(floor));
  for (auto& lv : priors.log_variances)
    for (auto& x : lv) x = std::max(x, lf);
}

/// Per-class mean and population variance (floored) of the given latents.
template <class T>
ClassPriorSet<T> init_priors_from_latents(const std::vector<Vec<T>>& latents, std::span<const std::size_t> labels,
                                          std::size_t num_classes, double floor = kVarianceFloor) {
  if (latents.size() != labels.size()) throw ShapeError("init_priors_from_latents: latents/labels length mismatch");
  if (latents.empty() || num_classes == 0) throw ArgumentError("init_priors_from_latents: empty input");
  const std::size_t c = latents.front().size();
  std::vector<std::size_t> counts(num_classes, 0);
  ClassPriorSet<T> priors(num_classes, c);
  std::vector<Vec<double>> sum(num_classes, Vec<double>(c, 0.0)), sumsq(num_classes, Vec<double>(c, 0.0));
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const std::size_t k = labels[i];
    if (k >= num_classes) throw ArgumentError("init_priors_from_latents: label out of range");
    if (latents[i].size() != c) throw ShapeError("init_priors_from_latents: ragged latents");
    ++counts[k];
    for (std::size_t j = 0; j < c; ++j) sum[k][j] += static_cast<double>(latents[i][j]);
  }
  for (std::size_t k = 0; k < num_classes; ++k)
    if (counts[k] < 2)
      throw ArgumentError("init_priors_from_latents: class " + std::to_string(k) + " has " +
                          std::to_string(counts[k]) + " samples, need >= 2");
  for (std::size_t k = 0; k < num_classes; ++k)
    for (std::size_t j = 0; j < c; ++j) sum[k][j] /= static_cast<double>(counts[k]);
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const std::size_t k = labels[i];
    for (std::size_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(latents[i][j]) - sum[k][j];
      sumsq[k][j] += d * d;
    }
  }
  for (std::size_t k = 0; k < num_classes; ++k)
    for (std::size_t j = 0; j < c; ++j) {
      priors.means[k][j] = static_cast<T>(sum[k][j]);
      const double var = std::max(sumsq[k][j] / static_cast<double>(counts[k]), floor);
      priors.log_variances[k][j] = static_cast<T>(std::log(var));
    }
  return priors;
}

}  // namespace gapan
