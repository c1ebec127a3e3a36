#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace gapan;
using fixtures::cs;

namespace {

template <class F>
double param_grad_error(const Network<double>& net, const Network<double>& analytic, F&& value) {
  const Vec<double> theta = flatten(net);
  Network<double> work = net;
  const Vec<double> fd = finite_diff_grad<double>(
      [&](std::span<const double> p) {
        assign_flat(work, p);
        return value(work);
      },
      cs(theta), 1e-5);
  return relative_error(cs(flatten(analytic)), cs(fd));
}

GradcheckProblem problem(std::uint64_t seed) {
  GradcheckOptions o;
  return make_gradcheck_problem(o, seed);
}

Network<double> identity_network(std::size_t dim, std::size_t classes) {
  NetworkShape shape;
  shape.feature_dim = dim;
  shape.embedding_dim = dim;
  shape.num_classes = classes;
  shape.flow_layers = 2;
  shape.flow_hidden = 3;
  Rng rng(0);
  return make_network<double>(shape, rng);
}

std::vector<Vec<double>> embeddings(const Network<double>& net, const Batch<double>& b) {
  std::vector<Vec<double>> out;
  for (const auto& v : b.features) out.push_back(embed(net.head, cs(v)));
  return out;
}

}  // namespace

TEST(LossNf, StandardNormalAtOrigin) {
  const auto net = identity_network(2, 1);
  Batch<double> b{{{0, 0}}, {0}, {}, {}};
  EXPECT_NEAR(loss_nf(net, b).value, std::log(2 * M_PI), 1e-15);
}

TEST(LossNf, DuplicatedBatchHasSameMean) {
  const auto p = problem(3);
  Batch<double> twice = p.batch;
  twice.features.insert(twice.features.end(), p.batch.features.begin(), p.batch.features.end());
  twice.labels.insert(twice.labels.end(), p.batch.labels.begin(), p.batch.labels.end());
  EXPECT_NEAR(loss_nf(p.net, twice).value, loss_nf(p.net, p.batch).value, 1e-13);
}

TEST(LossNf, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto p = problem(seed);
    const auto r = loss_nf(p.net, p.batch);
    EXPECT_LE(param_grad_error(p.net, r.grad, [&](const Network<double>& n) { return loss_nf(n, p.batch).value; }),
              1e-4);
  }
}

TEST(LossNf, LeavesHeadUntouched) {
  const auto p = problem(1);
  for (double g : flatten(loss_nf(p.net, p.batch).grad.head)) EXPECT_EQ(g, 0.0);
}

TEST(LossCa, OneHotPosteriorGivesZero) {
  auto net = identity_network(2, 2);
  net.priors.means[0] = {-50, 0};
  net.priors.means[1] = {50, 0};
  Batch<double> b{{{-50, 0.3}, {50, -0.2}}, {0, 1}, {}, {}};
  EXPECT_NEAR(loss_ca(net, b).value, 0.0, 1e-300);
}

TEST(LossCa, IdenticalPriorsGiveLogK) {
  auto p = problem(4);
  for (std::size_t k = 1; k < p.net.priors.num_classes(); ++k) {
    p.net.priors.means[k] = p.net.priors.means[0];
    p.net.priors.log_variances[k] = p.net.priors.log_variances[0];
  }
  EXPECT_NEAR(loss_ca(p.net, p.batch).value, std::log(3.0), 1e-14);
}

TEST(LossCa, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto p = problem(seed + 10);
    const auto r = loss_ca(p.net, p.batch);
    EXPECT_LE(param_grad_error(p.net, r.grad, [&](const Network<double>& n) { return loss_ca(n, p.batch).value; }),
              1e-4);
  }
}

TEST(LossAli, SingleAnchorSingleClassIsZero) {
  const std::vector<Vec<double>> emb = {{1, 2}, {-1, 0.5}};
  const std::vector<std::size_t> labels = {0, 0};
  const std::vector<std::vector<Vec<double>>> anchors = {{{0.3, 0.7}}};
  EXPECT_EQ(prior_alignment(emb, std::span<const std::size_t>(labels), anchors, 0.09).value, 0.0);
}

TEST(LossAli, UniformSimilaritiesGiveLogOfAnchorCount) {
  const std::vector<Vec<double>> emb = {{1, 1}, {1, 1}, {1, 1}};
  const std::vector<std::size_t> labels = {0, 2, 1};
  const std::vector<std::vector<Vec<double>>> anchors(3, std::vector<Vec<double>>(4, Vec<double>{2, 2}));
  EXPECT_NEAR(prior_alignment(emb, std::span<const std::size_t>(labels), anchors, 0.09).value, std::log(12.0),
              1e-12);
}

TEST(LossAli, MatchesTripleSumOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    std::vector<Vec<double>> emb;
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < 6; ++i) {
      emb.push_back(fixtures::random_vec(4, rng));
      labels.push_back(i % 3);
    }
    std::vector<std::vector<Vec<double>>> anchors(3);
    for (auto& c : anchors)
      for (int j = 0; j < 2; ++j) c.push_back(fixtures::random_vec(4, rng));
    const double got = prior_alignment(emb, std::span<const std::size_t>(labels), anchors, 0.09).value;
    EXPECT_NEAR(got, oracle::alignment_loss(emb, labels, anchors, 0.09), 1e-10);
  }
}

TEST(LossAli, NetworkValueMatchesOracle) {
  const auto p = problem(2);
  std::vector<std::vector<Vec<double>>> anchor_emb;
  for (const auto& cls : p.anchors.by_class) {
    anchor_emb.emplace_back();
    for (const auto& a : cls) anchor_emb.back().push_back(embed(p.net.head, cs(a.feature)));
  }
  EXPECT_NEAR(loss_ali(p.net, p.batch, p.anchors, 0.09).value,
              oracle::alignment_loss(embeddings(p.net, p.batch), p.batch.labels, anchor_emb, 0.09), 1e-10);
}

TEST(LossAli, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto p = problem(seed + 20);
    const auto r = loss_ali(p.net, p.batch, p.anchors, 0.09);
    EXPECT_LE(param_grad_error(p.net, r.grad,
                               [&](const Network<double>& n) { return loss_ali(n, p.batch, p.anchors, 0.09).value; }),
              1e-4);
    for (double g : flatten(r.grad.flow)) EXPECT_EQ(g, 0.0);
  }
}

TEST(LossAli, PassThroughGradientMatchesFiniteDifferences) {
  AlignmentOptions opts;
  opts.pass_through = true;
  const auto p = problem(31);
  const auto r = loss_ali(p.net, p.batch, p.anchors, 0.09, opts);
  EXPECT_EQ(r.value, loss_ali(p.net, p.batch, p.anchors, 0.09).value);
  EXPECT_LE(param_grad_error(p.net, r.grad,
                             [&](const Network<double>& n) { return loss_ali(n, p.batch, p.anchors, 0.09, opts).value; }),
            1e-4);
}

TEST(LossAli, BatchNegativesOnlyDropsAbsentClasses) {
  auto p = problem(5);
  // Restrict the batch to class 0 so the only negatives would come from absent classes.
  Batch<double> b;
  for (std::size_t i = 0; i < p.batch.size(); ++i)
    if (p.batch.labels[i] == 0) {
      b.features.push_back(p.batch.features[i]);
      b.labels.push_back(0);
    }
  AlignmentOptions opts;
  opts.batch_negatives_only = true;
  std::vector<std::vector<Vec<double>>> own(1);
  for (const auto& a : p.anchors.by_class[0]) own[0].push_back(embed(p.net.head, cs(a.feature)));
  EXPECT_NEAR(loss_ali(p.net, b, p.anchors, 0.09, opts).value,
              oracle::alignment_loss(embeddings(p.net, b), b.labels, own, 0.09), 1e-12);
}

TEST(LossAli, Errors) {
  const std::vector<std::size_t> labels = {0};
  EXPECT_THROW(prior_alignment<double>({{1, 0}}, std::span<const std::size_t>(labels), {{{1, 0}}, {}}, 0.1),
               ArgumentError);
  EXPECT_THROW(prior_alignment<double>({{1, 0}}, std::span<const std::size_t>(labels), {{{1, 0}}}, 0.0),
               ArgumentError);
  const std::vector<std::size_t> bad = {3};
  EXPECT_THROW(prior_alignment<double>({{1, 0}}, std::span<const std::size_t>(bad), {{{1, 0}}}, 0.1), ArgumentError);
}

TEST(LossAux, IdenticalEmbeddingsGiveLogThree) {
  const std::vector<Vec<double>> emb(4, Vec<double>{0.2, -1});
  const std::vector<std::size_t> pos = {1, 0, 3, 2};
  EXPECT_NEAR(contrastive_aux(emb, std::span<const std::size_t>(pos), 0.09).value, std::log(3.0), 1e-14);
}

TEST(LossAux, DominantPositiveDrivesLossToZero) {
  const std::vector<Vec<double>> emb = {{1, 0}, {1, 0}, {0, 1}, {0, 1}};
  const std::vector<std::size_t> pos = {1, 0, 3, 2};
  double prev = 1e9;
  for (double tau : {1.0, 0.1, 0.01}) {
    const double v = contrastive_aux(emb, std::span<const std::size_t>(pos), tau).value;
    EXPECT_NEAR(v, std::log1p(2 * std::exp(-1 / tau)), 1e-14);
    EXPECT_LT(v, prev);
    prev = v;
  }
  EXPECT_LT(prev, 1e-40);
}

TEST(LossAux, MatchesDoubleSumOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    std::vector<Vec<double>> emb;
    for (int i = 0; i < 6; ++i) emb.push_back(fixtures::random_vec(3, rng));
    const std::vector<std::size_t> pos = {1, 0, 3, 2, 5, 4};
    EXPECT_NEAR(contrastive_aux(emb, std::span<const std::size_t>(pos), 0.09).value,
                oracle::aux_loss(emb, pos, 0.09), 1e-10);
  }
}

TEST(LossAux, EmbeddingGradientMatchesFiniteDifferences) {
  Rng rng(12);
  std::vector<Vec<double>> emb;
  for (int i = 0; i < 6; ++i) emb.push_back(fixtures::random_vec(3, rng));
  const std::vector<std::size_t> pos = {1, 0, 3, 2, 5, 4};
  const auto r = contrastive_aux(emb, std::span<const std::size_t>(pos), 0.09);
  Vec<double> flat, analytic;
  for (std::size_t i = 0; i < 6; ++i) {
    flat.insert(flat.end(), emb[i].begin(), emb[i].end());
    analytic.insert(analytic.end(), r.d_embeddings[i].begin(), r.d_embeddings[i].end());
  }
  const auto fd = finite_diff_grad<double>(
      [&](std::span<const double> f) {
        std::vector<Vec<double>> e(6);
        for (std::size_t i = 0; i < 6; ++i) e[i].assign(f.begin() + 3 * i, f.begin() + 3 * i + 3);
        return oracle::aux_loss(e, pos, 0.09);
      },
      cs(flat), 1e-6);
  EXPECT_LE(relative_error(cs(analytic), cs(fd)), 1e-6);
}

TEST(LossAux, NetworkGradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto p = problem(seed + 40);
    const auto r = loss_aux(p.net, p.batch, 0.09);
    EXPECT_LE(param_grad_error(p.net, r.grad, [&](const Network<double>& n) { return loss_aux(n, p.batch, 0.09).value; }),
              1e-4);
  }
}

TEST(LossAux, Errors) {
  const std::vector<Vec<double>> emb(3, Vec<double>{1, 0});
  const std::vector<std::size_t> pos3 = {1, 0, 0};
  EXPECT_THROW(contrastive_aux(emb, std::span<const std::size_t>(pos3), 0.09), ArgumentError);
  const std::vector<Vec<double>> emb4(4, Vec<double>{1, 0});
  const std::vector<std::size_t> self = {0, 0, 3, 2};
  EXPECT_THROW(contrastive_aux(emb4, std::span<const std::size_t>(self), 0.09), ArgumentError);
}

TEST(LossTotal, ZeroWeightsReduceToAux) {
  const auto p = problem(6);
  const auto aux = loss_aux(p.net, p.batch, 0.09), nf = loss_nf(p.net, p.batch), ca = loss_ca(p.net, p.batch),
             ali = loss_ali(p.net, p.batch, p.anchors, 0.09);
  const auto t = loss_total(LossWeights{0, 0, 0, 0.09}, aux, nf, ca, ali);
  EXPECT_EQ(t.value, aux.value);
  EXPECT_EQ(flatten(t.grad), flatten(aux.grad));
}

TEST(LossTotal, DefaultWeightsOnUnitComponents) {
  const auto p = problem(7);
  LossResult<double> one{1.0, zeros_like(p.net)};
  EXPECT_NEAR(loss_total(LossWeights{}, one, one, one, one).value, 2.2, 1e-15);
}

TEST(LossTotal, DoublingAlphaDoublesOnlyTheLikelihoodTerm) {
  const auto p = problem(8);
  const auto aux = loss_aux(p.net, p.batch, 0.09), nf = loss_nf(p.net, p.batch), ca = loss_ca(p.net, p.batch),
             ali = loss_ali(p.net, p.batch, p.anchors, 0.09);
  LossWeights w;
  const double base = loss_total(w, aux, nf, ca, ali).value;
  w.alpha *= 2;
  EXPECT_NEAR(loss_total(w, aux, nf, ca, ali).value - base, 0.5 * nf.value, 1e-12);
}

TEST(LossTotal, GradientMatchesFiniteDifferences) {
  const auto p = problem(9);
  const LossWeights w;
  const auto t = loss_total(w, loss_aux(p.net, p.batch, 0.09), loss_nf(p.net, p.batch), loss_ca(p.net, p.batch),
                            loss_ali(p.net, p.batch, p.anchors, 0.09));
  EXPECT_LE(param_grad_error(p.net, t.grad,
                             [&](const Network<double>& n) {
                               return loss_aux(n, p.batch, 0.09).value + w.alpha * loss_nf(n, p.batch).value +
                                      w.beta * loss_ca(n, p.batch).value +
                                      w.gamma * loss_ali(n, p.batch, p.anchors, 0.09).value;
                             }),
            1e-4);
}
