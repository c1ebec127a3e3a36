// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <string>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace gapan;
using fixtures::cs;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1. Flow round trip and log-determinant.
Outcome flow_correctness() {
  const std::size_t dims[] = {2, 8, 32};
  const std::size_t layers[] = {1, 4, 8};
  double worst_trip = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto flow = fixtures::random_flow(dims[i % 3], layers[(i / 3) % 3], 1000 + i, 0.4, 16);
    Rng rng(i);
    for (int r = 0; r < 10; ++r) {
      const Vec<double> v = fixtures::random_vec(flow.dim, rng, 2.0);
      const Vec<double> z = flow_forward(flow, cs(v)).z;
      const Vec<double> back = flow_inverse(flow, cs(z));
      for (std::size_t j = 0; j < v.size(); ++j) worst_trip = std::max(worst_trip, std::abs(back[j] - v[j]));
    }
  }
  double worst_logdet = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const std::size_t dim = 2 + i % 5;  // 2..6
    const auto flow = fixtures::random_flow(dim, layers[i % 3], 5000 + i, 0.4, 16);
    Rng rng(i);
    const Vec<double> v = fixtures::random_vec(dim, rng);
    const double analytic = flow_forward(flow, cs(v)).logdet;
    const auto jac = oracle::jacobian([&](const oracle::Vec& x) { return flow_forward(flow, cs(x)).z; }, v);
    const double fd = std::log(std::abs(oracle::determinant(jac)));
    worst_logdet = std::max(worst_logdet, std::abs(analytic - fd) / std::max(std::abs(fd), 1e-8));
  }
  return {worst_trip <= 1e-6 && worst_logdet <= 1e-4,
          fmt("max round-trip |dv| %.2e (tol 1e-6), max logdet rel err %.2e (tol 1e-4)", worst_trip, worst_logdet)};
}

// 2. Analytic gradients against finite differences, library and CLI.
Outcome gradient_exactness() {
  GradcheckOptions o;
  o.seeds = 20;
  const auto report = run_gradcheck(o);
  double worst = 0;
  bool ok = true;
  std::string failed;
  for (const auto& e : report) {
    worst = std::max(worst, e.max_rel_error);
    if (!e.passed || e.max_rel_error > 1e-4) {
      ok = false;
      failed += " " + e.component;
    }
  }
  const std::string cmd = std::string(GAPAN_CLI_PATH) + " gradcheck --seeds 20 >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return {ok && report.size() == 9 && code == 0,
          fmt("%zu components x 20 seeds, max rel err %.2e (tol 1e-4), cli exit %d%s", report.size(), worst, code,
              failed.empty() ? "" : (" failed:" + failed).c_str())};
}

// 3. Posterior normalisation, acceptance rate and sample bounds.
Outcome probability_laws() {
  double worst_sum = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto flow = fixtures::random_flow(4, 3, seed);
    const auto priors = fixtures::random_priors(5, 4, seed);
    Rng rng(seed);
    for (int r = 0; r < 20; ++r) {
      const Vec<double> v = fixtures::random_vec(4, rng, 1.0 + 3.0 * r);
      const auto post = class_posterior(priors, flow, cs(v));
      double s = 0;
      for (double p : post) s += p;
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }
  }
  ClassPriorSet<double> unit(1, 2);
  Rng rng(2024);
  const double rate = rejection_acceptance_rate(unit, 0, TruncationSpec{1.0, TruncationMode::Absolute, 1000}, 100000, rng);
  const double expected = 1.0 - std::exp(-0.5);

  std::size_t checked = 0, violations = 0, fallbacks = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const std::size_t dim = 2 + seed % 31;
    const auto priors = fixtures::random_priors(3, dim, seed);
    const double radii[] = {0.05, 0.5, 1.0, 2.0};
    for (auto mode : {TruncationMode::Absolute, TruncationMode::ScaledBySqrtDim}) {
      const TruncationSpec spec{radii[seed % 4], mode, 20};
      Rng srng(seed * 7 + 1);
      const auto ts = sample_truncated(priors, seed % 3, spec, 25, srng);
      fallbacks += ts.fallbacks;
      for (const auto& z : ts.samples) {
        ++checked;
        if (!(mahalanobis(priors, cs(z), seed % 3) <= spec.effective_radius(dim))) ++violations;
      }
    }
  }
  return {worst_sum <= 1e-12 && std::abs(rate - expected) <= 0.01 && violations == 0,
          fmt("max |sum-1| %.1e (tol 1e-12), acceptance %.4f vs %.4f (tol 0.01), %zu/%zu samples outside bound "
              "(%zu via fallback)",
              worst_sum, rate, expected, violations, checked, fallbacks)};
}

// Two curved classes in 2-D: x2 follows a parabola in x1.
FeatureDataset banana(std::size_t per_class, std::uint64_t seed, Split split) {
  Rng rng(seed);
  FeatureDataset ds;
  ds.dim = 2;
  ds.split = split;
  for (std::uint32_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < per_class; ++i) {
      const double x1 = (k ? 2.5 : -2.5) + 0.7 * standard_normal(rng);
      const double x2 = 0.5 * x1 * x1 + 0.1 * standard_normal(rng);
      ds.features.push_back(static_cast<float>(x1));
      ds.features.push_back(static_cast<float>(x2));
      ds.labels.push_back(k);
    }
  return ds;
}

// 4. Joint training raises held-out density.
Outcome density_learning() {
  RunConfig c;
  c.train.flow_hidden = 16;
  c.train.flow_layers = 8;
  c.train.embedding_dim = 8;
  c.train.batch_categories = 2;
  c.train.lr = 0.001;
  c.train.epochs = 40;
  c.train.warmup_epochs = 2;
  c.train.steps_per_epoch = 50;
  c.train.grad_clip = 5;
  const auto train_set = banana(200, 1, Split::Train);
  const auto held_out = banana(200, 2, Split::Test);
  auto st = init_trainer(c, train_set);
  run_epochs(st, train_set, held_out, c.train.warmup_epochs);
  initialize_priors(st, train_set);
  const double before = mean_log_feature_density(st, held_out);
  run_epochs(st, train_set, held_out, c.train.epochs);
  const double after = mean_log_feature_density(st, held_out);
  const double acc = posterior_accuracy(st, held_out);
  return {after - before >= 1.0 && acc >= 0.95,
          fmt("held-out log density %.3f -> %.3f, gain %.3f nats (min 1.0), posterior accuracy %.1f%% (min 95%%)",
              before, after, after - before, 100 * acc)};
}

// 5. Ablation ordering on the confounded synthetic benchmark.
Outcome ablation_trend() {
  RunConfig base;
  base.train.flow_hidden = 32;
  base.train.embedding_dim = 128;
  base.train.batch_categories = 8;
  base.train.lr = 0.0005;
  base.train.lr_mult_flow = 0.1;
  base.train.lr_mult_prior = 0.1;
  double mean[3] = {0, 0, 0};
  std::string rows;
  for (std::uint64_t s = 0; s < 5; ++s) {
    RunConfig rc = base;
    rc.synth.seed = base.synth.seed + s;
    rc.train.seed = base.train.seed + s;
    const auto [train_set, test_set] = gen_synthetic(rc.synth);
    double r[3];
    for (int arm = 0; arm < 3; ++arm) {
      RunConfig c = rc;
      if (arm == 0) c.train.weights.alpha = c.train.weights.beta = 0;
      if (arm <= 1) c.train.weights.gamma = 0;
      r[arm] = 100 * train(c, train_set, test_set).second.back().recall.front().second;
      mean[arm] += r[arm] / 5;
    }
    rows += fmt(" [%.1f %.1f %.1f]", r[0], r[1], r[2]);
  }
  const bool ordered = mean[0] <= mean[1] && mean[1] <= mean[2];
  return {ordered && mean[2] - mean[0] >= 2.0,
          fmt("mean R@1 aux %.2f <= +nf+ca %.2f <= full %.2f, full-aux %+.2f (min +2.0); per seed%s", mean[0], mean[1],
              mean[2], mean[2] - mean[0], rows.c_str())};
}

// 6. Protocol defaults.
Outcome protocol_fidelity() {
  const TrainConfig t;
  const bool ok = t.weights.tau == 0.09 && t.flow_layers == 8 && t.n_s == 6 && t.truncation.radius == 1.0 &&
                  t.warmup_epochs == 5 && t.weights.alpha == 0.5 && t.weights.beta == 0.3 && t.weights.gamma == 0.4 &&
                  t.lr == 1e-5 && t.momentum == 0.9 && t.weight_decay == 1e-4 && t.lr_decay_factor == 0.9 &&
                  t.lr_decay_every == 5 && t.epochs == 50;
  const double lr5 = lr_at(t, 5);
  const bool lr_ok = std::abs(lr5 - 9e-6) <= 1e-20;
  return {ok && lr_ok, fmt("defaults %s, lr_at(5) = %.17g (expected 9e-6)", ok ? "match" : "DIFFER", lr5)};
}

// 7. Recall@K against the brute-force oracle.
Outcome recall_oracle() {
  std::size_t mismatches = 0, ties = 0;
  const std::size_t ks[] = {1, 2, 4, 8};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed + 31337);
    const std::size_t n = 2 + uniform_index(rng, 63);
    const std::size_t classes = 1 + uniform_index(rng, std::max<std::size_t>(1, n / 2));
    const bool coarse = seed % 3 == 0;
    std::vector<Vec<double>> emb;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < n; ++i) {
      Vec<double> e(4);
      do {
        for (auto& x : e) x = coarse ? static_cast<double>(uniform_index(rng, 3)) - 1.0 : standard_normal(rng);
      } while (e[0] == 0 && e[1] == 0 && e[2] == 0 && e[3] == 0);
      emb.push_back(e);
      labels.push_back(uniform_index(rng, classes));
    }
    ties += coarse;
    const auto got = recall_at_k(emb, std::span<const std::size_t>(labels), std::span<const std::size_t>(ks));
    for (int i = 0; i < 4; ++i)
      if (got[i] != oracle::recall_at_k(emb, labels, ks[i])) ++mismatches;
  }
  return {mismatches == 0, fmt("%zu mismatches over 200 instances x 4 k (%zu tie-heavy instances)", mismatches, ties)};
}

// 8. Determinism and persistence.
Outcome determinism() {
  RunConfig c;
  c.synth.dim = 8;
  c.synth.nuisance_dims = 2;
  c.synth.seen_classes = 4;
  c.synth.unseen_classes = 4;
  c.synth.instances_per_class = 10;
  c.train.epochs = 6;
  c.train.warmup_epochs = 3;
  c.train.lr = 0.01;
  c.train.flow_layers = 2;
  c.train.flow_hidden = 8;
  c.train.embedding_dim = 8;
  c.train.batch_categories = 4;
  c.train.seed = 11;
  const auto [train_set, test_set] = gen_synthetic(c.synth);

  const auto [st_a, hist_a] = train(c, train_set, test_set);
  const auto [st_b, hist_b] = train(c, train_set, test_set);
  bool same_history = hist_a.size() == hist_b.size();
  for (std::size_t i = 0; same_history && i < hist_a.size(); ++i) same_history = hist_a[i].same_values(hist_b[i]);

  auto st = init_trainer(c, train_set);
  run_epochs(st, train_set, test_set, 4);
  auto resumed = decode_checkpoint(encode_checkpoint(st));
  run_epochs(resumed, train_set, test_set, c.train.epochs);
  const bool same_params = flatten(resumed.net) == flatten(st_a.net) && resumed.step == st_a.step;

  const std::string gapf = encode_feature_file(train_set);
  const bool gapf_ok = encode_feature_file(decode_feature_file(gapf)) == gapf;
  const std::string gapc = encode_checkpoint(st_a);
  const bool gapc_ok = encode_checkpoint(decode_checkpoint(gapc)) == gapc;
  return {same_history && same_params && gapf_ok && gapc_ok,
          fmt("history identical: %s, resume bit-identical: %s, GAPF round trip: %s, checkpoint round trip: %s",
              same_history ? "yes" : "no", same_params ? "yes" : "no", gapf_ok ? "yes" : "no",
              gapc_ok ? "yes" : "no")};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    double cpu_budget;
    std::function<Outcome()> run;
  };
  const Criterion criteria[] = {
      {"flow correctness", 30, flow_correctness},
      {"gradient exactness", 60, gradient_exactness},
      {"probability laws", 0, probability_laws},
      {"density learning", 120, density_learning},
      {"ablation trend", 600, ablation_trend},
      {"protocol fidelity", 0, protocol_fidelity},
      {"recall@k oracle", 0, recall_oracle},
      {"determinism and persistence", 0, determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < std::size(criteria); ++i) {
    const auto& c = criteria[i];
    const std::clock_t t0 = std::clock();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double cpu = static_cast<double>(std::clock() - t0) / CLOCKS_PER_SEC;
    std::string budget;
    if (c.cpu_budget > 0) {
      budget = fmt(" (budget %.0f s)", c.cpu_budget);
      if (cpu > c.cpu_budget) o.pass = false;
    }
    if (!o.pass) ++failures;
    std::printf("%s criterion %zu %s: %s [%.1f s cpu%s]\n", o.pass ? "PASS" : "FAIL", i + 1, c.name, o.detail.c_str(),
                cpu, budget.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria failed\n", failures, std::size(criteria));
  return failures == 0 ? 0 : 1;
}
