#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gapan/anchorgen.hpp"
#include "gapan/losses.hpp"
#include "gapan/model.hpp"

namespace gapan {

/// Central-difference Jacobian of f: R^n -> R^m, as an m x n matrix.
template <class T, class F>
Matrix<T> numerical_jacobian(F&& f, std::span<const T> x, T step) {
  Vec<T> work(x.begin(), x.end());
  const std::size_t m = f(std::span<const T>(work)).size();
  Matrix<T> jac(m, x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const T orig = work[j];
    work[j] = orig + step;
    const Vec<T> fp = f(std::span<const T>(work));
    work[j] = orig - step;
    const Vec<T> fm = f(std::span<const T>(work));
    work[j] = orig;
    for (std::size_t i = 0; i < m; ++i) jac(i, j) = (fp[i] - fm[i]) / (T(2) * step);
  }
  return jac;
}

/// log|det A| by Gaussian elimination with partial pivoting.
template <class T>
T log_abs_det(Matrix<T> a) {
  if (a.rows != a.cols) throw ShapeError("log_abs_det: matrix is not square");
  const std::size_t n = a.rows;
  T acc = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a(r, c)) > std::abs(a(piv, c))) piv = r;
    if (a(piv, c) == T(0)) return -std::numeric_limits<T>::infinity();
    if (piv != c)
      for (std::size_t k = 0; k < n; ++k) std::swap(a(c, k), a(piv, k));
    acc += std::log(std::abs(a(c, c)));
    for (std::size_t r = c + 1; r < n; ++r) {
      const T f = a(r, c) / a(c, c);
      for (std::size_t k = c; k < n; ++k) a(r, k) -= f * a(c, k);
    }
  }
  return acc;
}

struct GradcheckEntry {
  std::string component;
  double max_rel_error = 0;
  bool passed = true;
};

struct GradcheckOptions {
  std::size_t seeds = 20;
  std::uint64_t base_seed = 0;
  double tolerance = 1e-4;
  double step = 1e-5;
  std::size_t dim = 4;
  std::size_t num_classes = 3;
  std::size_t flow_layers = 2;
  std::size_t flow_hidden = 5;
  std::size_t embedding_dim = 3;
  std::size_t n_s = 2;
  // Test hook: the named component's analytic gradient is perturbed before comparison.
  std::string corrupt;
};

/// Random small problem for gradient verification: a network with every
/// parameter randomized (flow not at identity), a two-per-class batch and anchors.
struct GradcheckProblem {
  Network<double> net;
  Batch<double> batch;
  AnchorSet<double> anchors;
};

inline GradcheckProblem make_gradcheck_problem(const GradcheckOptions& o, std::uint64_t seed) {
  Rng rng(splitmix64(seed) ^ 0x6772616463686bULL);
  NetworkShape shape;
  shape.feature_dim = o.dim;
  shape.embedding_dim = o.embedding_dim;
  shape.num_classes = o.num_classes;
  shape.flow_layers = o.flow_layers;
  shape.flow_hidden = o.flow_hidden;
  GradcheckProblem p;
  p.net = make_network<double>(shape, rng);
  randomize_parameters(p.net.head, rng, 0.8);
  randomize_parameters(p.net.flow, rng, 0.4);
  for (auto& mu : p.net.priors.means)
    for (auto& x : mu) x = uniform(rng, -1.0, 1.0);
  for (auto& lv : p.net.priors.log_variances)
    for (auto& x : lv) x = uniform(rng, -0.5, 0.5);
  for (std::size_t k = 0; k < o.num_classes; ++k)
    for (int r = 0; r < 2; ++r) {
      Vec<double> v(o.dim);
      for (auto& x : v) x = standard_normal(rng);
      p.batch.features.push_back(std::move(v));
      p.batch.labels.push_back(k);
    }
  for (std::size_t i = 0; i < p.batch.size(); ++i) p.batch.positive_index.push_back(i ^ 1u);
  std::vector<std::size_t> classes(o.num_classes);
  std::iota(classes.begin(), classes.end(), std::size_t{0});
  TruncationSpec spec;
  spec.radius = 1.0;
  p.anchors = generate_anchors(p.net, std::span<const std::size_t>(classes), o.n_s, spec, seed, 0);
  return p;
}

namespace detail {

inline double check_network_gradient(const Network<double>& net, const Network<double>& analytic,
                                     const std::function<double(const Network<double>&)>& loss, double step,
                                     bool corrupt) {
  Vec<double> a = flatten(analytic);
  if (corrupt) a[a.size() / 2] += 1.0 + std::abs(a[a.size() / 2]);
  const Vec<double> p0 = flatten(net);
  Network<double> work = net;
  const Vec<double> numeric = finite_diff_grad<double>(
      [&](std::span<const double> p) {
        assign_flat(work, p);
        return loss(work);
      },
      std::span<const double>(p0), step);
  return relative_error(std::span<const double>(a), std::span<const double>(numeric));
}

}  // namespace detail

/// Compares every analytic gradient against central differences over
/// `o.seeds` random problems; reports the worst relative error per component.
inline std::vector<GradcheckEntry> run_gradcheck(const GradcheckOptions& o) {
  std::vector<GradcheckEntry> report = {{"flow_backward"}, {"flow_inverse_backward"}, {"flow_logdet_jacobian"},
                                        {"loss_nf"},       {"loss_ca"},               {"loss_ali"},
                                        {"loss_ali_pass_through"}, {"loss_aux"},      {"loss_total"}};
  auto record = [&](const std::string& name, double err) {
    for (auto& e : report)
      if (e.component == name) e.max_rel_error = std::max(e.max_rel_error, std::isfinite(err) ? err : 1e300);
  };
  const double tau = 0.09;
  const LossWeights weights{0.5, 0.3, 0.4, tau};
  for (std::size_t s = 0; s < o.seeds; ++s) {
    const std::uint64_t seed = o.base_seed + s;
    const GradcheckProblem p = make_gradcheck_problem(o, seed);
    const Network<double>& net = p.net;
    Rng rng(seed + 991);

    // flow_backward: random upstream on z and logdet.
    {
      Vec<double> v(o.dim), uz(o.dim);
      for (auto& x : v) x = standard_normal(rng);
      for (auto& x : uz) x = standard_normal(rng);
      const double ul = standard_normal(rng);
      auto [g, gv] = flow_backward(net.flow, std::span<const double>(v), std::span<const double>(uz), ul);
      auto scalar = [&](const FlowModel<double>& f, std::span<const double> x) {
        const FlowResult<double> r = flow_forward(f, x);
        return dot(std::span<const double>(uz), std::span<const double>(r.z)) + ul * r.logdet;
      };
      Vec<double> a = flatten(g);
      a.insert(a.end(), gv.begin(), gv.end());
      if (o.corrupt == "flow_backward") a[0] += 1.0 + std::abs(a[0]);
      Vec<double> p0 = flatten(net.flow);
      const std::size_t np = p0.size();
      p0.insert(p0.end(), v.begin(), v.end());
      FlowModel<double> work = net.flow;
      const Vec<double> num = finite_diff_grad<double>(
          [&](std::span<const double> q) {
            assign_flat(work, q.first(np));
            return scalar(work, q.subspan(np));
          },
          std::span<const double>(p0), o.step);
      record("flow_backward", relative_error(std::span<const double>(a), std::span<const double>(num)));
    }
    // flow_inverse_backward.
    {
      Vec<double> z(o.dim), uv(o.dim);
      for (auto& x : z) x = standard_normal(rng);
      for (auto& x : uv) x = standard_normal(rng);
      FlowModel<double> g = zeros_like(net.flow);
      const Vec<double> gz =
          flow_inverse_backward_accumulate(net.flow, std::span<const double>(z), std::span<const double>(uv), g);
      Vec<double> a = flatten(g);
      a.insert(a.end(), gz.begin(), gz.end());
      if (o.corrupt == "flow_inverse_backward") a[0] += 1.0 + std::abs(a[0]);
      Vec<double> p0 = flatten(net.flow);
      const std::size_t np = p0.size();
      p0.insert(p0.end(), z.begin(), z.end());
      FlowModel<double> work = net.flow;
      const Vec<double> num = finite_diff_grad<double>(
          [&](std::span<const double> q) {
            assign_flat(work, q.first(np));
            const Vec<double> x = flow_inverse(work, q.subspan(np));
            return dot(std::span<const double>(uv), std::span<const double>(x));
          },
          std::span<const double>(p0), o.step);
      record("flow_inverse_backward", relative_error(std::span<const double>(a), std::span<const double>(num)));
    }
    // Analytic logdet against log|det| of the numerical Jacobian (C <= 6).
    if (o.dim <= 6) {
      Vec<double> v(o.dim);
      for (auto& x : v) x = standard_normal(rng);
      double logdet = flow_forward(net.flow, std::span<const double>(v)).logdet;
      if (o.corrupt == "flow_logdet_jacobian") logdet += 1.0;
      const Matrix<double> jac = numerical_jacobian<double>(
          [&](std::span<const double> x) { return flow_forward(net.flow, x).z; }, std::span<const double>(v), 1e-6);
      const double ref = log_abs_det(jac);
      record("flow_logdet_jacobian", std::abs(logdet - ref) / std::max(std::abs(ref), 1.0));
    }

    const auto& b = p.batch;
    const auto& anchors = p.anchors;
    AlignmentOptions through;
    through.pass_through = true;
    auto nf = [&](const Network<double>& n) { return loss_nf(n, b).value; };
    auto ca = [&](const Network<double>& n) { return loss_ca(n, b).value; };
    auto ali = [&](const Network<double>& n) { return loss_ali(n, b, anchors, tau).value; };
    auto ali_pt = [&](const Network<double>& n) { return loss_ali(n, b, anchors, tau, through).value; };
    auto aux = [&](const Network<double>& n) { return loss_aux(n, b, tau).value; };
    const LossResult<double> r_nf = loss_nf(net, b), r_ca = loss_ca(net, b), r_ali = loss_ali(net, b, anchors, tau),
                             r_aux = loss_aux(net, b, tau);
    record("loss_nf", detail::check_network_gradient(net, r_nf.grad, nf, o.step, o.corrupt == "loss_nf"));
    record("loss_ca", detail::check_network_gradient(net, r_ca.grad, ca, o.step, o.corrupt == "loss_ca"));
    record("loss_ali", detail::check_network_gradient(net, r_ali.grad, ali, o.step, o.corrupt == "loss_ali"));
    record("loss_ali_pass_through",
           detail::check_network_gradient(net, loss_ali(net, b, anchors, tau, through).grad, ali_pt, o.step,
                                          o.corrupt == "loss_ali_pass_through"));
    record("loss_aux", detail::check_network_gradient(net, r_aux.grad, aux, o.step, o.corrupt == "loss_aux"));
    const LossResult<double> total = loss_total(weights, r_aux, r_nf, r_ca, r_ali);
    record("loss_total", detail::check_network_gradient(
                             net, total.grad,
                             [&](const Network<double>& n) {
                               return aux(n) + weights.alpha * nf(n) + weights.beta * ca(n) + weights.gamma * ali(n);
                             },
                             o.step, o.corrupt == "loss_total"));
  }
  for (auto& e : report) e.passed = e.max_rel_error <= o.tolerance;
  return report;
}

}  // namespace gapan
