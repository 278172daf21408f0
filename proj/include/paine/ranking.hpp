#pragma once

#include <optional>
#include <vector>

#include "paine/autograd.hpp"

namespace paine {

enum class LossVariant { Srcc, LambdaRank };

struct LossConfig {
  LossVariant variant = LossVariant::Srcc;
  double soft_rank_eps = 1e-2;
  int ndcg_k = 3;
  double lambdarank_sigma = 1.0;

  void validate() const;
};

// Ascending ranks in 1..n, ties averaged.
std::vector<double> hard_rank(const std::vector<double>& s);

// Euclidean projection of s/eps onto the permutahedron of (1..n), oriented so
// larger values receive larger ranks. Plain-value core shared by the autograd
// node and the tests.
struct SoftRankResult {
  std::vector<double> ranks;
  std::vector<int> sorted_idx;    // descending order of s
  std::vector<int> block_starts;  // PAV pool boundaries over sorted positions (ends with n)
};
SoftRankResult soft_rank_values(const std::vector<double>& s, double eps);

// Differentiable soft rank node.
Tensor soft_rank(const Tensor& s, double eps);

// Pearson correlation between soft_rank(pred, eps) and the hard ranks of
// target. Empty optional when the group is degenerate (n < 2 or constant
// target ranks); callers count skips.
std::optional<Tensor> srcc_soft(const Tensor& pred, const std::vector<double>& target, double eps);

Tensor mae(const Tensor& pred, const std::vector<double>& target);

struct BatchLossResult {
  Tensor loss;
  int skipped_groups = 0;
  double rank_term = 0.0;  // logged value of the ranking part
  double mae_term = 0.0;
};

// Eq-style mixed objective: whole-batch MAE plus the per-group ranking term
// (1 - soft SRCC averaged over groups, or the LambdaRank surrogate).
BatchLossResult batch_loss(const Tensor& preds, const std::vector<double>& targets,
                           const std::vector<int>& group_ids, const LossConfig& cfg);

// NDCG@k with targets min-max scaled onto [0,5] and exp2 gains.
double ndcg_at_k(const std::vector<double>& pred, const std::vector<double>& target, int k);

// LambdaRank loss gradients w.r.t. pred (pairwise logistic weights times
// NDCG@k swap deltas).
std::vector<double> lambdarank_grads(const std::vector<double>& pred,
                                     const std::vector<double>& target, int k, double sigma);

double pearson(const std::vector<double>& x, const std::vector<double>& y);
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace paine
