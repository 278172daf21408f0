#pragma once

#include <functional>
#include <string>
#include <vector>

#include "paine/data.hpp"
#include "paine/ranking.hpp"

namespace paine {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  int max_epochs = 100;
  double plateau_factor = 0.5;
  int plateau_patience = 5;
  int early_stop_patience = 15;
  LossConfig loss;
  int group_k = 12;
  uint64_t seed = 0;
  double mask_prob = 0.0;  // training-time noise-mask augmentation, off by default
  SplitRatios split;

  void validate() const;
};

struct OptimState {
  std::vector<std::vector<double>> m, v;
  int64_t t = 0;

  void init_like(const std::vector<Tensor>& params);
};

// Bias-corrected Adam update with decoupled weight decay applied before the
// Adam delta.
void adamw_step(std::vector<Tensor>& params, OptimState& state, const TrainConfig& cfg,
                double lr_now);

// Scales all gradients so their joint l2 norm is at most max_norm. Returns
// the applied scale (1 when untouched).
double clip_global_norm(std::vector<Tensor>& params, double max_norm);

struct PlateauState {
  double best = -1e300;
  int bad = 0;
  double lr = 0.0;
};

double plateau_step(PlateauState& st, double val_metric, double factor, int patience);

struct EarlyStopState {
  double best = -1e300;
  int bad = 0;
};

// True when the metric has not strictly improved for `patience` consecutive
// epochs.
bool early_stop_step(EarlyStopState& st, double val_metric, int patience);

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_srcc_global = 0.0;
  double val_srcc_macro = 0.0;
  double val_mae_raw = 0.0;
  double val_ndcg3_macro = 0.0;
  double lr = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> history;
  int best_epoch = -1;
  double best_val_srcc = 0.0;
  std::string stop_reason;
  int skipped_groups = 0;
};

struct Provenance {
  uint64_t seed = 0;
  int best_epoch = -1;
  double best_val_srcc = 0.0;
  std::string dataset_digest;
  std::string oracle_digest;
};

struct Checkpoint {
  PredictorConfig config;
  PainePredictor model;
  NormStats norm;
  Provenance prov;
};

struct MetricBundle {
  double srcc_global = 0.0;
  double srcc_macro = 0.0;
  double mae_raw = 0.0;
  double ndcg3_macro = 0.0;
  int skipped_prompts = 0;
  bool srcc_global_defined = true;
};

struct PriorBundle {
  double srcc = 0.0;
  double mae = 0.0;
  double mape = 0.0;  // percent
};

// Scores one sample: (prompt entry, noise) -> raw-unit prediction.
using ScorerFn = std::function<double(const PromptEntry&, const std::vector<double>&)>;
// Prior estimate for a prompt in raw units.
using PriorFn = std::function<double(const PromptEntry&)>;

ScorerFn checkpoint_scorer(const Checkpoint& ck);
PriorFn checkpoint_prior(const Checkpoint& ck);

MetricBundle evaluate(const ScorerFn& scorer, const Dataset& split);
PriorBundle evaluate_prior(const PriorFn& prior, const Dataset& split);

using MetricSink = std::function<void(const std::string& metric, double value, int epoch)>;

std::pair<Checkpoint, TrainReport> train(const Dataset& dataset, const PredictorConfig& pred_cfg,
                                         const TrainConfig& train_cfg,
                                         const MetricSink& sink = nullptr);

std::string dataset_content_digest(const Dataset& ds);

}  // namespace paine
