#include "paine/ranking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "paine/errors.hpp"

namespace paine {

void LossConfig::validate() const {
  if (soft_rank_eps <= 0.0) throw_config("loss: soft_rank_eps must be positive");
  if (ndcg_k < 1) throw_config("loss: ndcg_k must be at least 1");
  if (lambdarank_sigma <= 0.0) throw_config("loss: lambdarank_sigma must be positive");
}

std::vector<double> hard_rank(const std::vector<double>& s) {
  if (s.empty()) throw_usage("hard_rank: empty input");
  ensure_all_finite(s, "hard_rank");
  const int n = static_cast<int>(s.size());
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return s[static_cast<size_t>(a)] < s[static_cast<size_t>(b)]; });
  std::vector<double> r(static_cast<size_t>(n));
  int i = 0;
  while (i < n) {
    int j = i;
    while (j + 1 < n && s[static_cast<size_t>(idx[static_cast<size_t>(j + 1)])] == s[static_cast<size_t>(idx[static_cast<size_t>(i)])]) ++j;
    const double avg = 0.5 * static_cast<double>((i + 1) + (j + 1));
    for (int t = i; t <= j; ++t) r[static_cast<size_t>(idx[static_cast<size_t>(t)])] = avg;
    i = j + 1;
  }
  return r;
}

SoftRankResult soft_rank_values(const std::vector<double>& s, double eps) {
  if (s.empty()) throw_usage("soft_rank: empty input");
  if (eps <= 0.0) throw_config("soft_rank: eps must be positive");
  ensure_all_finite(s, "soft_rank");
  const int n = static_cast<int>(s.size());

  // Pivot on the first maximum so the result depends on s only through
  // pairwise differences (exact translation invariance).
  double pivot = s[0];
  for (double v : s) pivot = std::max(pivot, v);
  std::vector<double> z(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) z[static_cast<size_t>(i)] = (s[static_cast<size_t>(i)] - pivot) / eps;

  SoftRankResult res;
  res.sorted_idx.resize(static_cast<size_t>(n));
  std::iota(res.sorted_idx.begin(), res.sorted_idx.end(), 0);
  std::stable_sort(res.sorted_idx.begin(), res.sorted_idx.end(),
                   [&](int a, int b) { return z[static_cast<size_t>(a)] > z[static_cast<size_t>(b)]; });

  // PAV nonincreasing fit of y = z_sorted - (n, n-1, ..., 1).
  std::vector<double> block_sum(static_cast<size_t>(n));
  std::vector<int> block_len(static_cast<size_t>(n));
  std::vector<int> block_start(static_cast<size_t>(n));
  int nblocks = 0;
  for (int pos = 0; pos < n; ++pos) {
    const double y = z[static_cast<size_t>(res.sorted_idx[static_cast<size_t>(pos)])] - static_cast<double>(n - pos);
    block_sum[static_cast<size_t>(nblocks)] = y;
    block_len[static_cast<size_t>(nblocks)] = 1;
    block_start[static_cast<size_t>(nblocks)] = pos;
    ++nblocks;
    while (nblocks > 1 &&
           block_sum[static_cast<size_t>(nblocks - 2)] * block_len[static_cast<size_t>(nblocks - 1)] <=
               block_sum[static_cast<size_t>(nblocks - 1)] * block_len[static_cast<size_t>(nblocks - 2)]) {
      block_sum[static_cast<size_t>(nblocks - 2)] += block_sum[static_cast<size_t>(nblocks - 1)];
      block_len[static_cast<size_t>(nblocks - 2)] += block_len[static_cast<size_t>(nblocks - 1)];
      --nblocks;
    }
  }

  res.ranks.resize(static_cast<size_t>(n));
  res.block_starts.reserve(static_cast<size_t>(nblocks) + 1);
  for (int b = 0; b < nblocks; ++b) {
    res.block_starts.push_back(block_start[static_cast<size_t>(b)]);
    const double v = block_sum[static_cast<size_t>(b)] / block_len[static_cast<size_t>(b)];
    const int end = b + 1 < nblocks ? block_start[static_cast<size_t>(b + 1)] : n;
    for (int pos = block_start[static_cast<size_t>(b)]; pos < end; ++pos) {
      const int orig = res.sorted_idx[static_cast<size_t>(pos)];
      res.ranks[static_cast<size_t>(orig)] = z[static_cast<size_t>(orig)] - v;
    }
  }
  res.block_starts.push_back(n);
  return res;
}

Tensor soft_rank(const Tensor& s, double eps) {
  if (!s.node || s.shape().size() != 1) throw_dim("soft_rank: rank-1 tensor required");
  auto core = std::make_shared<SoftRankResult>(soft_rank_values(s.values(), eps));
  const int n = s.dim(0);
  Tensor out = Tensor::from({n}, core->ranks);
  if (detail::grad_recording_enabled() && s.node->requires_grad) {
    out.node->requires_grad = true;
    out.node->leaf = false;
    out.node->parents = {s.node};
    detail::Node* ps = s.node.get();
    out.node->backward = [ps, core, eps, n](detail::Node& self) {
      auto& g = detail::ensure_grad(*ps);
      const auto& idx = core->sorted_idx;
      const auto& starts = core->block_starts;
      for (size_t b = 0; b + 1 < starts.size(); ++b) {
        const int b0 = starts[b], b1 = starts[b + 1];
        double m = 0.0;
        for (int pos = b0; pos < b1; ++pos) m += self.grad[static_cast<size_t>(idx[static_cast<size_t>(pos)])];
        m /= static_cast<double>(b1 - b0);
        for (int pos = b0; pos < b1; ++pos) {
          const int orig = idx[static_cast<size_t>(pos)];
          g[static_cast<size_t>(orig)] += (self.grad[static_cast<size_t>(orig)] - m) / eps;
        }
      }
      (void)n;
    };
  }
  return out;
}

std::optional<Tensor> srcc_soft(const Tensor& pred, const std::vector<double>& target, double eps) {
  if (!pred.node || pred.shape().size() != 1) throw_dim("srcc_soft: rank-1 pred required");
  if (static_cast<size_t>(pred.dim(0)) != target.size()) throw_dim("srcc_soft: length mismatch");
  const int n = pred.dim(0);
  if (n < 2) return std::nullopt;
  ensure_all_finite(target, "srcc_soft target");

  const std::vector<double> tr = hard_rank(target);
  const double tmean = 0.5 * static_cast<double>(n + 1);
  std::vector<double> tc(tr.size());
  double tss = 0.0;
  for (size_t i = 0; i < tr.size(); ++i) {
    tc[i] = tr[i] - tmean;
    tss += tc[i] * tc[i];
  }
  if (tss <= 0.0) return std::nullopt;  // constant target ranks

  Tensor r = soft_rank(pred, eps);
  Tensor rc = sub_scalar_node(r, mean(r));
  // Prediction side can degenerate to exactly-equal soft ranks; treat like a
  // degenerate target group rather than dividing by zero.
  {
    double rss = 0.0;
    for (double v : rc.values()) rss += v * v;
    if (rss <= 0.0) return std::nullopt;
  }
  Tensor num = sum(mul(rc, Tensor::from({n}, tc)));
  Tensor den = scale(sqrt_op(sum(mul(rc, rc))), std::sqrt(tss));
  return div(num, den);
}

Tensor mae(const Tensor& pred, const std::vector<double>& target) {
  if (!pred.node || pred.shape().size() != 1) throw_dim("mae: rank-1 pred required");
  if (static_cast<size_t>(pred.dim(0)) != target.size()) throw_dim("mae: length mismatch");
  if (target.empty()) throw_usage("mae: empty input");
  Tensor diff = sub(pred, Tensor::from({pred.dim(0)}, target));
  return mean(abs_op(diff));
}

namespace {

// Discount of a 1-based position under the @k cutoff.
double ndcg_discount(int pos, int k) {
  if (pos > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(pos) + 1.0);
}

std::vector<double> scaled_gains(const std::vector<double>& target) {
  double lo = target[0], hi = target[0];
  for (double t : target) {
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  std::vector<double> gain(target.size());
  if (hi == lo) {
    std::fill(gain.begin(), gain.end(), 0.0);  // rel = 0 everywhere
    return gain;
  }
  for (size_t i = 0; i < target.size(); ++i) {
    const double rel = 5.0 * (target[i] - lo) / (hi - lo);
    gain[i] = std::exp2(rel) - 1.0;
  }
  return gain;
}

// Indices sorted by value descending, ties by lower index.
std::vector<int> desc_order(const std::vector<double>& v) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return v[static_cast<size_t>(a)] > v[static_cast<size_t>(b)]; });
  return idx;
}

double ideal_dcg(const std::vector<double>& gain, int k) {
  std::vector<double> g = gain;
  std::sort(g.begin(), g.end(), std::greater<>());
  double idcg = 0.0;
  const int n = static_cast<int>(g.size());
  for (int pos = 1; pos <= std::min(k, n); ++pos) idcg += g[static_cast<size_t>(pos - 1)] * ndcg_discount(pos, k);
  return idcg;
}

}  // namespace

double ndcg_at_k(const std::vector<double>& pred, const std::vector<double>& target, int k) {
  if (k < 1) throw_config("ndcg_at_k: k must be at least 1");
  if (pred.size() != target.size()) throw_dim("ndcg_at_k: length mismatch");
  if (pred.empty()) throw_usage("ndcg_at_k: empty input");
  ensure_all_finite(pred, "ndcg_at_k pred");
  ensure_all_finite(target, "ndcg_at_k target");
  const std::vector<double> gain = scaled_gains(target);
  const double idcg = ideal_dcg(gain, k);
  if (idcg == 0.0) return 1.0;
  const std::vector<int> order = desc_order(pred);
  double dcg = 0.0;
  const int n = static_cast<int>(pred.size());
  for (int pos = 1; pos <= std::min(k, n); ++pos)
    dcg += gain[static_cast<size_t>(order[static_cast<size_t>(pos - 1)])] * ndcg_discount(pos, k);
  return dcg / idcg;
}

std::vector<double> lambdarank_grads(const std::vector<double>& pred,
                                     const std::vector<double>& target, int k, double sigma) {
  if (pred.size() != target.size()) throw_dim("lambdarank_grads: length mismatch");
  if (pred.size() < 2) throw_usage("lambdarank_grads: need at least two items");
  const int n = static_cast<int>(pred.size());
  std::vector<double> grad(static_cast<size_t>(n), 0.0);
  const std::vector<double> gain = scaled_gains(target);
  const double idcg = ideal_dcg(gain, k);
  if (idcg == 0.0) return grad;  // no ordered pairs

  const std::vector<int> order = desc_order(pred);
  std::vector<int> pos_of(static_cast<size_t>(n));
  for (int p = 0; p < n; ++p) pos_of[static_cast<size_t>(order[static_cast<size_t>(p)])] = p + 1;

  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (gain[static_cast<size_t>(i)] <= gain[static_cast<size_t>(j)]) continue;  // need rel_i > rel_j
      const double delta =
          std::fabs((gain[static_cast<size_t>(i)] - gain[static_cast<size_t>(j)]) *
                    (ndcg_discount(pos_of[static_cast<size_t>(i)], k) - ndcg_discount(pos_of[static_cast<size_t>(j)], k))) /
          idcg;
      const double lambda =
          -sigma * delta / (1.0 + std::exp(sigma * (pred[static_cast<size_t>(i)] - pred[static_cast<size_t>(j)])));
      grad[static_cast<size_t>(i)] += lambda;
      grad[static_cast<size_t>(j)] -= lambda;
    }
  }
  return grad;
}

namespace {

// Custom-gradient surrogate: forward value is 1 - mean per-group NDCG@k,
// backward injects the LambdaRank gradients.
Tensor lambda_surrogate(const Tensor& preds, const std::vector<double>& targets,
                        const std::vector<std::vector<int>>& groups, int k, double sigma) {
  const auto& pv = preds.values();
  double mean_ndcg = 0.0;
  auto grads = std::make_shared<std::vector<double>>(pv.size(), 0.0);
  int counted = 0;
  for (const auto& g : groups) {
    std::vector<double> p(g.size()), t(g.size());
    for (size_t i = 0; i < g.size(); ++i) {
      p[i] = pv[static_cast<size_t>(g[i])];
      t[i] = targets[static_cast<size_t>(g[i])];
    }
    mean_ndcg += ndcg_at_k(p, t, k);
    ++counted;
    if (g.size() < 2) continue;
    const std::vector<double> lg = lambdarank_grads(p, t, k, sigma);
    for (size_t i = 0; i < g.size(); ++i) (*grads)[static_cast<size_t>(g[i])] += lg[i];
  }
  mean_ndcg /= std::max(1, counted);

  Tensor out = Tensor::from({1}, {1.0 - mean_ndcg});
  if (detail::grad_recording_enabled() && preds.node->requires_grad) {
    out.node->requires_grad = true;
    out.node->leaf = false;
    out.node->parents = {preds.node};
    detail::Node* pp = preds.node.get();
    out.node->backward = [pp, grads](detail::Node& self) {
      auto& g = detail::ensure_grad(*pp);
      const double up = self.grad[0];
      for (size_t i = 0; i < g.size(); ++i) g[i] += up * (*grads)[i];
    };
  }
  return out;
}

}  // namespace

BatchLossResult batch_loss(const Tensor& preds, const std::vector<double>& targets,
                           const std::vector<int>& group_ids, const LossConfig& cfg) {
  cfg.validate();
  if (!preds.node || preds.shape().size() != 1) throw_dim("batch_loss: rank-1 preds required");
  const size_t n = static_cast<size_t>(preds.dim(0));
  if (n == 0 || targets.size() != n || group_ids.size() != n)
    throw_usage("batch_loss: empty batch or misaligned inputs");

  // Group sample indices by id, in order of first appearance.
  std::vector<std::vector<int>> groups;
  {
    std::vector<std::pair<int, int>> id_to_slot;
    for (size_t i = 0; i < n; ++i) {
      const int id = group_ids[i];
      int slot = -1;
      for (const auto& [gid, s] : id_to_slot)
        if (gid == id) {
          slot = s;
          break;
        }
      if (slot < 0) {
        slot = static_cast<int>(groups.size());
        id_to_slot.push_back({id, slot});
        groups.emplace_back();
      }
      groups[static_cast<size_t>(slot)].push_back(static_cast<int>(i));
    }
  }

  BatchLossResult res;
  Tensor mae_term = mae(preds, targets);
  res.mae_term = mae_term.item();

  if (cfg.variant == LossVariant::Srcc) {
    std::vector<Tensor> group_terms;
    for (const auto& g : groups) {
      std::vector<Tensor> elems;
      elems.reserve(g.size());
      std::vector<double> t(g.size());
      for (size_t i = 0; i < g.size(); ++i) t[i] = targets[static_cast<size_t>(g[i])];
      // Gather the group's predictions into a vector node.
      Tensor gp;
      if (g.size() == n) {
        gp = preds;  // single group spanning the batch
      } else {
        std::vector<Tensor> parts;
        parts.reserve(g.size());
        for (int gi : g) parts.push_back(take_elem(preds, gi));
        gp = stack_scalars(parts);
      }
      auto s = srcc_soft(gp, t, cfg.soft_rank_eps);
      if (!s) {
        ++res.skipped_groups;
        continue;
      }
      group_terms.push_back(affine(*s, -1.0, 1.0));  // 1 - srcc
    }
    if (group_terms.empty()) {
      res.loss = mae_term;
      res.rank_term = 0.0;
    } else {
      Tensor rank = mean(stack_scalars(group_terms));
      res.rank_term = rank.item();
      res.loss = add(mae_term, rank);
    }
  } else {
    Tensor rank = lambda_surrogate(preds, targets, groups, cfg.ndcg_k, cfg.lambdarank_sigma);
    res.rank_term = rank.item();
    res.loss = add(mae_term, rank);
  }
  return res;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw_dim("pearson: length mismatch");
  if (x.size() < 2) throw_usage("pearson: need at least two points");
  ensure_all_finite(x, "pearson x");
  ensure_all_finite(y, "pearson y");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) throw_numeric("pearson: degenerate variance");
  return sxy / std::sqrt(sxx * syy);
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(hard_rank(x), hard_rank(y));
}

}  // namespace paine
