#include <algorithm>
#include <cmath>
#include <doctest.h>
#include <numeric>

#include "paine/errors.hpp"
#include "paine/ranking.hpp"
#include "test_helpers.hpp"

using namespace paine;
using paine::testing::fd_check;
using paine::testing::random_vec;

namespace {

// Brute-force projection onto the n=2 permutahedron (segment from (1,2) to
// (2,1)) by two-stage grid search over r1.
double qp_grid_rank1(double s1, double s2, double eps) {
  const double z1 = s1 / eps, z2 = s2 / eps;
  auto obj = [&](double r1) {
    const double r2 = 3.0 - r1;
    return (r1 - z1) * (r1 - z1) + (r2 - z2) * (r2 - z2);
  };
  double lo = 1.0, hi = 2.0;
  double best = lo, bestv = obj(lo);
  for (int stage = 0; stage < 4; ++stage) {
    const double step = (hi - lo) / 1000.0;
    for (int i = 0; i <= 1000; ++i) {
      const double r = lo + step * i;
      const double v = obj(r);
      if (v < bestv) {
        bestv = v;
        best = r;
      }
    }
    lo = std::max(1.0, best - step);
    hi = std::min(2.0, best + step);
  }
  return best;
}

std::vector<double> sort_assign_ranks(const std::vector<double>& s) {
  const int n = static_cast<int>(s.size());
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return s[static_cast<size_t>(a)] < s[static_cast<size_t>(b)]; });
  std::vector<double> r(static_cast<size_t>(n));
  int i = 0;
  while (i < n) {
    int j = i;
    while (j + 1 < n &&
           s[static_cast<size_t>(idx[static_cast<size_t>(j + 1)])] == s[static_cast<size_t>(idx[static_cast<size_t>(i)])])
      ++j;
    for (int t = i; t <= j; ++t) r[static_cast<size_t>(idx[static_cast<size_t>(t)])] = 0.5 * (i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

}  // namespace

TEST_SUITE("ranking") {

TEST_CASE("hard rank basics and oracle") {
  CHECK(hard_rank({3, 1, 2}) == std::vector<double>{3, 1, 2});
  CHECK(hard_rank({1, 1}) == std::vector<double>{1.5, 1.5});

  Rng rng(31);
  std::vector<double> s = random_vec(rng, 50);
  s[7] = s[31];  // inject a tie
  CHECK(hard_rank(s) == sort_assign_ranks(s));

  CHECK_THROWS_AS(hard_rank({1.0, std::nan("")}), Error);
}

TEST_CASE("soft rank closed forms") {
  // constant input: centroid by symmetry
  {
    auto r = soft_rank_values({4.2, 4.2, 4.2}, 0.5);
    for (double v : r.ranks) CHECK(v == doctest::Approx(2.0).epsilon(1e-12));
  }
  // hard-rank limit for distinct values
  {
    auto r = soft_rank_values({10, 0, 5}, 1e-6);
    CHECK(std::fabs(r.ranks[0] - 3) < 1e-3);
    CHECK(std::fabs(r.ranks[1] - 1) < 1e-3);
    CHECK(std::fabs(r.ranks[2] - 2) < 1e-3);
  }
  // n=2 worked case
  {
    auto r = soft_rank_values({1, 0}, 2.0);
    CHECK(r.ranks[0] == doctest::Approx(1.75).epsilon(1e-12));
    CHECK(r.ranks[1] == doctest::Approx(1.25).epsilon(1e-12));
  }
  CHECK_THROWS_AS(soft_rank_values({1, 2}, 0.0), Error);
}

TEST_CASE("n=2 closed form matches brute-force grid search") {
  Rng rng(77);
  for (int t = 0; t < 25; ++t) {
    const double s1 = rng.uniform(-3, 3), s2 = rng.uniform(-3, 3);
    const double eps = std::exp(rng.uniform(std::log(0.05), std::log(5.0)));
    const double closed = std::clamp(1.5 + (s1 - s2) / (2.0 * eps), 1.0, 2.0);
    auto r = soft_rank_values({s1, s2}, eps);
    CHECK(std::fabs(r.ranks[0] - closed) < 1e-9);
    CHECK(std::fabs(qp_grid_rank1(s1, s2, eps) - closed) < 1e-6);
  }
}

TEST_CASE("soft rank laws") {
  Rng rng(99);
  for (int t = 0; t < 200; ++t) {
    const int n = 1 + static_cast<int>(rng.below(64));
    std::vector<double> s = random_vec(rng, static_cast<size_t>(n), 2.0);
    const double eps = std::exp(rng.uniform(std::log(1e-3), std::log(10.0)));
    auto r = soft_rank_values(s, eps);

    double acc = 0.0;
    for (double v : r.ranks) {
      acc += v;
      CHECK(v >= 1.0 - 1e-9);
      CHECK(v <= static_cast<double>(n) + 1e-9);
    }
    CHECK(std::fabs(acc - 0.5 * n * (n + 1)) < 1e-9);

    // monotonicity
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (s[static_cast<size_t>(i)] > s[static_cast<size_t>(j)])
          CHECK(r.ranks[static_cast<size_t>(i)] >= r.ranks[static_cast<size_t>(j)] - 1e-12);
  }
}

TEST_CASE("soft rank translation invariance is exact") {
  Rng rng(123);
  for (int t = 0; t < 50; ++t) {
    const int n = 2 + static_cast<int>(rng.below(16));
    // dyadic values so adding an integer shift is exact in binary floating point
    std::vector<double> s(static_cast<size_t>(n));
    for (auto& v : s) v = static_cast<double>(static_cast<int64_t>(rng.below(1 << 20))) * 0x1.0p-20;
    const double c = static_cast<double>(static_cast<int64_t>(rng.below(17)) - 8);
    std::vector<double> shifted = s;
    for (auto& v : shifted) v += c;
    const double eps = std::exp(rng.uniform(std::log(1e-3), std::log(10.0)));
    auto r1 = soft_rank_values(s, eps);
    auto r2 = soft_rank_values(shifted, eps);
    CHECK(r1.ranks == r2.ranks);  // bitwise
  }
}

TEST_CASE("soft rank limit laws at extreme eps") {
  Rng rng(7);
  for (int t = 0; t < 30; ++t) {
    const int n = 2 + static_cast<int>(rng.below(20));
    std::vector<double> s = random_vec(rng, static_cast<size_t>(n), 1.0);
    double lo = s[0], hi = s[0];
    for (double v : s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double range = hi - lo;
    if (range < 1e-3) continue;

    auto rh = soft_rank_values(s, 1e-6 * range);
    const std::vector<double> hard = hard_rank(s);
    bool distinct = true;
    for (int i = 0; i < n && distinct; ++i)
      for (int j = i + 1; j < n; ++j)
        if (s[static_cast<size_t>(i)] == s[static_cast<size_t>(j)]) {
          distinct = false;
          break;
        }
    if (distinct)
      for (int i = 0; i < n; ++i) CHECK(std::fabs(rh.ranks[static_cast<size_t>(i)] - hard[static_cast<size_t>(i)]) < 1e-3);

    auto rc = soft_rank_values(s, 1e6 * range);
    for (double v : rc.ranks) CHECK(std::fabs(v - 0.5 * (n + 1)) < 1e-3);
  }
}

TEST_CASE("soft rank gradient matches finite differences") {
  Rng rng(55);
  for (int t = 0; t < 20; ++t) {
    const int n = 3 + static_cast<int>(rng.below(10));
    std::vector<std::vector<int>> shapes = {{n}};
    const double eps = std::exp(rng.uniform(std::log(0.05), std::log(2.0)));
    Rng wr(600 + static_cast<uint64_t>(t));
    // Coordinates in singleton PAV pools have exactly-zero gradients (the
    // projection sits on a vertex); keep the loss small so finite-difference
    // cancellation noise stays below the relative-error floor there.
    auto build = [&, t, eps](const std::vector<Tensor>& ts) {
      std::vector<double> w(static_cast<size_t>(ts[0].numel()));
      Rng w2(500 + static_cast<uint64_t>(t));
      for (auto& x : w) x = w2.uniform(-1, 1);
      return scale(sum(mul(soft_rank(ts[0], eps), Tensor::from({static_cast<int>(w.size())}, w))),
                   1e-3);
    };
    CHECK(fd_check(shapes, build, random_vec(wr, static_cast<size_t>(n))) < 1e-4);
  }
}

TEST_CASE("srcc_soft agreement and reversal") {
  std::vector<double> t = {0.3, -1.2, 2.0, 0.9, -0.4};
  Tensor p = Tensor::from({5}, t);
  auto s = srcc_soft(p, t, 1e-4);
  REQUIRE(s.has_value());
  CHECK(s->item() >= 0.999);

  std::vector<double> neg(t.size());
  for (size_t i = 0; i < t.size(); ++i) neg[i] = -t[i];
  auto s2 = srcc_soft(Tensor::from({5}, neg), t, 1e-4);
  REQUIRE(s2.has_value());
  CHECK(s2->item() <= -0.999);

  // degenerate: constant targets are skipped
  CHECK_FALSE(srcc_soft(p, {1, 1, 1, 1, 1}, 1e-2).has_value());
  CHECK_FALSE(srcc_soft(Tensor::from({1}, {0.5}), {1.0}, 1e-2).has_value());
}

TEST_CASE("srcc_soft gradient matches finite differences") {
  Rng rng(66);
  for (int t = 0; t < 15; ++t) {
    const int n = 4 + static_cast<int>(rng.below(8));
    std::vector<double> target = random_vec(rng, static_cast<size_t>(n));
    std::vector<std::vector<int>> shapes = {{n}};
    auto build = [&, target](const std::vector<Tensor>& ts) {
      auto s = srcc_soft(ts[0], target, 0.5);
      REQUIRE(s.has_value());
      return scale(*s, 1e-3);
    };
    CHECK(fd_check(shapes, build, random_vec(rng, static_cast<size_t>(n))) < 1e-4);
  }
}

TEST_CASE("srcc_soft is invariant under positive affine target transforms") {
  Rng rng(14);
  std::vector<double> target = random_vec(rng, 8);
  std::vector<double> scaled(target.size());
  for (size_t i = 0; i < target.size(); ++i) scaled[i] = 3.5 * target[i] + 11.0;
  std::vector<double> pred = random_vec(rng, 8);
  auto a = srcc_soft(Tensor::from({8}, pred), target, 0.05);
  auto b = srcc_soft(Tensor::from({8}, pred), scaled, 0.05);
  REQUIRE(a.has_value());
  REQUIRE(b.has_value());
  CHECK(a->item() == b->item());
}

TEST_CASE("mae basics") {
  std::vector<double> t = {1, 2, 3};
  CHECK(mae(Tensor::from({3}, t), t).item() == 0.0);
  CHECK(mae(Tensor::from({3}, {2, 3, 4}), t).item() == doctest::Approx(1.0).epsilon(1e-15));

  Rng rng(4);
  std::vector<double> a = random_vec(rng, 20), b = random_vec(rng, 20);
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += std::fabs(a[i] - b[i]);
  CHECK(mae(Tensor::from({20}, a), b).item() == doctest::Approx(acc / 20).epsilon(1e-14));
}

TEST_CASE("batch_loss srcc variant") {
  LossConfig cfg;
  cfg.soft_rank_eps = 1e-4;

  // perfect predictions, distinct per-group targets
  std::vector<double> targets = {0.1, 0.9, -0.5, 0.4, 1.3, -1.0};
  std::vector<int> groups = {0, 0, 0, 1, 1, 1};
  auto res = batch_loss(Tensor::from({6}, targets), targets, groups, cfg);
  CHECK(res.loss.item() <= 0.001);
  CHECK(res.skipped_groups == 0);

  // single group: loss = mae + (1 - srcc) exactly
  Rng rng(17);
  std::vector<double> p = random_vec(rng, 5), t = random_vec(rng, 5);
  std::vector<int> g1 = {7, 7, 7, 7, 7};
  cfg.soft_rank_eps = 0.3;
  auto r1 = batch_loss(Tensor::from({5}, p), t, g1, cfg);
  const double expected =
      mae(Tensor::from({5}, p), t).item() + 1.0 - srcc_soft(Tensor::from({5}, p), t, 0.3)->item();
  CHECK(r1.loss.item() == doctest::Approx(expected).epsilon(1e-12));

  // two groups: hand assembly of per-group terms
  std::vector<double> p2 = random_vec(rng, 7), t2 = random_vec(rng, 7);
  std::vector<int> g2 = {0, 0, 0, 0, 1, 1, 1};
  auto r2 = batch_loss(Tensor::from({7}, p2), t2, g2, cfg);
  const double s0 = srcc_soft(Tensor::from({4}, {p2[0], p2[1], p2[2], p2[3]}),
                              {t2[0], t2[1], t2[2], t2[3]}, 0.3)
                        ->item();
  const double s1 =
      srcc_soft(Tensor::from({3}, {p2[4], p2[5], p2[6]}), {t2[4], t2[5], t2[6]}, 0.3)->item();
  const double expect2 =
      mae(Tensor::from({7}, p2), t2).item() + 0.5 * ((1.0 - s0) + (1.0 - s1));
  CHECK(r2.loss.item() == doctest::Approx(expect2).epsilon(1e-12));

  CHECK_THROWS_AS(batch_loss(Tensor::from({1}, {0.0}), {}, {}, cfg), Error);
}

TEST_CASE("batch_loss gradient matches finite differences for both variants") {
  Rng rng(88);
  for (int variant = 0; variant < 2; ++variant) {
    LossConfig cfg;
    cfg.variant = variant == 0 ? LossVariant::Srcc : LossVariant::LambdaRank;
    cfg.soft_rank_eps = 0.2;
    for (int t = 0; t < 6; ++t) {
      const int n = 6;
      std::vector<double> target = random_vec(rng, static_cast<size_t>(n));
      std::vector<int> groups = {0, 0, 0, 1, 1, 1};
      std::vector<std::vector<int>> shapes = {{n}};
      auto build = [&, target, groups](const std::vector<Tensor>& ts) {
        return batch_loss(ts[0], target, groups, cfg).loss;
      };
      const double tol = cfg.variant == LossVariant::Srcc ? 1e-4 : 1e10;
      if (cfg.variant == LossVariant::Srcc) {
        CHECK(fd_check(shapes, build, random_vec(rng, static_cast<size_t>(n))) < tol);
      } else {
        // Surrogate: forward is piecewise constant in the ranking part; check
        // only that the backward injects exactly the LambdaRank gradients on
        // top of the MAE subgradient.
        std::vector<double> x = random_vec(rng, static_cast<size_t>(n));
        Tensor preds = Tensor::from({n}, x, true);
        auto res = batch_loss(preds, target, groups, cfg);
        backward(res.loss);
        std::vector<double> expect(static_cast<size_t>(n), 0.0);
        for (int g = 0; g < 2; ++g) {
          std::vector<double> gp, gt;
          for (int i = 0; i < n; ++i)
            if (groups[static_cast<size_t>(i)] == g) {
              gp.push_back(x[static_cast<size_t>(i)]);
              gt.push_back(target[static_cast<size_t>(i)]);
            }
          const auto lg = lambdarank_grads(gp, gt, cfg.ndcg_k, cfg.lambdarank_sigma);
          int slot = 0;
          for (int i = 0; i < n; ++i)
            if (groups[static_cast<size_t>(i)] == g) expect[static_cast<size_t>(i)] += lg[static_cast<size_t>(slot++)];
        }
        for (int i = 0; i < n; ++i) {
          const double sign = x[static_cast<size_t>(i)] > target[static_cast<size_t>(i)] ? 1.0
                              : x[static_cast<size_t>(i)] < target[static_cast<size_t>(i)] ? -1.0
                                                                                           : 0.0;
          expect[static_cast<size_t>(i)] += sign / n;
          CHECK(preds.grad()[static_cast<size_t>(i)] == doctest::Approx(expect[static_cast<size_t>(i)]).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("ndcg_at_k") {
  // pred ordering equals target ordering
  CHECK(ndcg_at_k({0.1, 0.5, 0.9}, {1.0, 2.0, 3.0}, 3) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ndcg_at_k({0.42}, {7.0}, 3) == doctest::Approx(1.0).epsilon(1e-12));

  // reversed prediction over targets scaling to rel = {0, 2.5, 5}
  const std::vector<double> target = {10.0, 12.5, 15.0};
  const std::vector<double> pred = {3.0, 2.0, 1.0};
  const double g0 = std::exp2(0.0) - 1.0;
  const double g1 = std::exp2(2.5) - 1.0;
  const double g2 = std::exp2(5.0) - 1.0;
  const double dcg = g0 / 1.0 + g1 / std::log2(3.0) + g2 / 2.0;
  const double idcg = g2 / 1.0 + g1 / std::log2(3.0) + g0 / 2.0;
  CHECK(ndcg_at_k(pred, target, 3) == doctest::Approx(dcg / idcg).epsilon(1e-12));

  // all-equal targets: rel = 0 everywhere, ideal DCG 0, defined as 1
  CHECK(ndcg_at_k({1.0, 2.0}, {3.0, 3.0}, 3) == 1.0);
  CHECK_THROWS_AS(ndcg_at_k({1.0}, {1.0}, 0), Error);
}

TEST_CASE("lambdarank_grads") {
  // all targets equal: no ordered pairs
  const auto z = lambdarank_grads({1, 2, 3}, {5, 5, 5}, 3, 1.0);
  for (double g : z) CHECK(g == 0.0);

  // two items, correct order, huge margin: saturated logistic
  const auto s = lambdarank_grads({100.0, 0.0}, {1.0, 0.0}, 3, 1.0);
  CHECK(std::fabs(s[0]) < 1e-10);
  CHECK(std::fabs(s[1]) < 1e-10);

  // n=4 random case vs explicit swap-recompute oracle
  Rng rng(21);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> pred = random_vec(rng, 4);
    std::vector<double> target = random_vec(rng, 4);
    const int k = 3;
    const double sigma = 1.0;
    const auto got = lambdarank_grads(pred, target, k, sigma);

    // oracle: enumerate pairs, Delta-NDCG by physically swapping positions
    std::vector<double> expect(4, 0.0);
    const double lo = *std::min_element(target.begin(), target.end());
    const double hi = *std::max_element(target.begin(), target.end());
    std::vector<double> gain(4);
    for (int i = 0; i < 4; ++i)
      gain[static_cast<size_t>(i)] = hi == lo ? 0.0 : std::exp2(5.0 * (target[static_cast<size_t>(i)] - lo) / (hi - lo)) - 1.0;
    std::vector<int> order(4);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return pred[static_cast<size_t>(a)] > pred[static_cast<size_t>(b)]; });
    auto dcg_of = [&](const std::vector<int>& ord) {
      double acc = 0.0;
      for (int pos = 1; pos <= std::min(k, 4); ++pos)
        acc += gain[static_cast<size_t>(ord[static_cast<size_t>(pos - 1)])] / std::log2(pos + 1.0);
      return acc;
    };
    std::vector<double> gsorted = gain;
    std::sort(gsorted.begin(), gsorted.end(), std::greater<>());
    double idcg = 0.0;
    for (int pos = 1; pos <= std::min(k, 4); ++pos) idcg += gsorted[static_cast<size_t>(pos - 1)] / std::log2(pos + 1.0);
    if (idcg == 0.0) continue;
    const double base = dcg_of(order);
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) {
        if (gain[static_cast<size_t>(i)] <= gain[static_cast<size_t>(j)]) continue;
        std::vector<int> swapped = order;
        for (auto& v : swapped) {
          if (v == i)
            v = j;
          else if (v == j)
            v = i;
        }
        const double delta = std::fabs(dcg_of(swapped) - base) / idcg;
        const double lambda =
            -sigma * delta /
            (1.0 + std::exp(sigma * (pred[static_cast<size_t>(i)] - pred[static_cast<size_t>(j)])));
        expect[static_cast<size_t>(i)] += lambda;
        expect[static_cast<size_t>(j)] -= lambda;
      }
    }
    for (int i = 0; i < 4; ++i) CHECK(got[static_cast<size_t>(i)] == doctest::Approx(expect[static_cast<size_t>(i)]).epsilon(1e-10));
  }
}

TEST_CASE("lambdarank gradients sum to zero") {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const int n = 2 + static_cast<int>(rng.below(10));
    const auto g = lambdarank_grads(random_vec(rng, static_cast<size_t>(n)),
                                    random_vec(rng, static_cast<size_t>(n)), 3, 1.0);
    double acc = 0.0;
    for (double v : g) acc += v;
    CHECK(std::fabs(acc) < 1e-12);
  }
}

TEST_CASE("pearson and spearman") {
  std::vector<double> x = {1, 2, 3, 4, 5};
  CHECK(pearson(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<double> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] = -2.0 * x[i] + 3.0;
  CHECK(pearson(x, y) == doctest::Approx(-1.0).epsilon(1e-12));

  Rng rng(2);
  std::vector<double> a = random_vec(rng, 100), b = random_vec(rng, 100);
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= 100;
  mb /= 100;
  double sab = 0, saa = 0, sbb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  CHECK(std::fabs(pearson(a, b) - sab / std::sqrt(saa * sbb)) < 1e-12);
  CHECK_THROWS_AS(pearson({1, 1, 1}, {1, 2, 3}), Error);

  // monotone transform invariance
  std::vector<double> mono(a.size());
  for (size_t i = 0; i < a.size(); ++i) mono[i] = std::exp(a[i]);
  CHECK(spearman(a, mono) == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<double> rev(a.size());
  for (size_t i = 0; i < a.size(); ++i) rev[i] = -a[i];
  CHECK(spearman(a, rev) == doctest::Approx(-1.0).epsilon(1e-12));

  // tie-aware: matches pearson of averaged ranks
  std::vector<double> tx = {1, 2, 2, 3, 5, 5, 5};
  std::vector<double> ty = {2, 1, 4, 4, 6, 7, 7};
  CHECK(spearman(tx, ty) == doctest::Approx(pearson(hard_rank(tx), hard_rank(ty))).epsilon(1e-14));
}

TEST_CASE("spearman approximates srcc_soft at tiny eps") {
  Rng rng(44);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> p = random_vec(rng, 12), q = random_vec(rng, 12);
    double lo = p[0], hi = p[0];
    for (double v : p) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    auto s = srcc_soft(Tensor::from({12}, p), q, 1e-6 * (hi - lo));
    REQUIRE(s.has_value());
    CHECK(std::fabs(s->item() - spearman(p, q)) < 0.01);
  }
}

}  // TEST_SUITE
