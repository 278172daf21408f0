#pragma once

#include <string>
#include <vector>

#include "paine/training.hpp"

namespace paine {

struct SelectionRequest {
  PromptEmbedding streams;
  int n = 100;
  int b = 1;
  uint64_t seed = 0;
};

struct SelectionEntry {
  std::vector<double> noise;
  double predicted_score_raw = 0.0;
  int candidate_index = 0;
};

struct SelectionResult {
  std::vector<SelectionEntry> entries;  // nonincreasing by score
  std::string checkpoint_digest;
  uint64_t seed = 0;
  int n = 0;
};

SelectionResult select_noises(const Checkpoint& ck, const SelectionRequest& req,
                              const std::string& checkpoint_digest = "");

struct PriorEstimate {
  double mu_hat = 0.0;  // raw score units
};

// Prior-mode score: the posterior decomposes as mu plus a standardized
// likelihood factor times sigma; only the mu component is modelled here.
PriorEstimate prompt_prior(const Checkpoint& ck, const PromptEmbedding& streams);

struct PromptStats {
  int prompt_id = 0;
  double mean = 0.0;
  double std = 0.0;  // population convention
};

std::vector<PromptStats> distribution_stats(
    const std::vector<std::pair<int, std::vector<double>>>& scores_by_prompt);

struct PccMatrix {
  int n = 0;
  std::vector<double> values;  // row-major n x n
  std::vector<char> defined;   // 0 entries are flagged, not NaN-poisoned

  double at(int i, int j) const { return values[static_cast<size_t>(i) * n + j]; }
  bool ok(int i, int j) const { return defined[static_cast<size_t>(i) * n + j] != 0; }
};

PccMatrix pcc_matrix(const std::vector<std::vector<double>>& series);

struct UpliftReport {
  double mean_selected_true = 0.0;
  double mean_random_true = 0.0;
  double mean_best_true = 0.0;
  double mean_best_pred = 0.0;  // best predicted score among the N candidates
  double recovered_fraction = 0.0;
  double paired_t = 0.0;
  double paired_p = 0.0;  // one-sided, selected > random
  int prompt_trials = 0;
};

// Desk-scale selection benchmark against a random-pick baseline on freshly
// drawn prompts from the same oracle universe. Scorer defaults to the
// checkpoint; tests may substitute e.g. the oracle itself.
UpliftReport selection_uplift(const Checkpoint& ck, const OracleConfig& oracle_cfg,
                              int test_prompts, int n, int b, int trials, uint64_t seed);
UpliftReport selection_uplift_with(const ScorerFn& scorer, const std::string& scorer_oracle_digest,
                                   const OracleConfig& oracle_cfg, int test_prompts, int n, int b,
                                   int trials, uint64_t seed);

// One-sided p-value for mean(diff) > 0 via the normal approximation to the
// paired t statistic.
std::pair<double, double> paired_t_test(const std::vector<double>& diffs);

}  // namespace paine
