#include "paine/training.hpp"

#include <algorithm>
#include <cmath>

#include "paine/digest.hpp"
#include "paine/errors.hpp"

namespace paine {

namespace {
constexpr double kImprovementDelta = 1e-6;  // strict-improvement tolerance
}

void TrainConfig::validate() const {
  if (lr <= 0.0) throw_config("train: lr must be positive");
  if (weight_decay < 0.0) throw_config("train: weight_decay must be nonnegative");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw_config("train: betas must lie in [0,1)");
  if (adam_eps < 0.0) throw_config("train: adam_eps must be nonnegative");
  if (clip_norm <= 0.0) throw_config("train: clip_norm must be positive");
  if (max_epochs < 1) throw_config("train: max_epochs must be positive");
  if (plateau_factor <= 0.0 || plateau_factor >= 1.0)
    throw_config("train: plateau_factor must lie in (0,1)");
  if (plateau_patience < 1 || early_stop_patience < 1)
    throw_config("train: patiences must be at least 1");
  if (group_k < 1) throw_config("train: group_k must be positive");
  if (mask_prob < 0.0 || mask_prob > 1.0) throw_config("train: mask_prob must lie in [0,1]");
  loss.validate();
}

void OptimState::init_like(const std::vector<Tensor>& params) {
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    v.emplace_back(static_cast<size_t>(p.numel()), 0.0);
  }
  t = 0;
}

void adamw_step(std::vector<Tensor>& params, OptimState& state, const TrainConfig& cfg,
                double lr_now) {
  if (state.m.size() != params.size()) throw_usage("adamw_step: state not initialised");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t p = 0; p < params.size(); ++p) {
    auto& theta = params[p].values();
    const auto& g = params[p].grad();
    if (g.size() != theta.size()) throw_dim("adamw_step: gradient shape mismatch");
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (size_t i = 0; i < theta.size(); ++i) {
      theta[i] *= 1.0 - lr_now * cfg.weight_decay;  // decay before the update
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      theta[i] -= lr_now * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw_numeric("clip_global_norm: non-finite gradient");
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return 1.0;
  const double scale = max_norm / norm;
  for (auto& p : params)
    for (auto& g : p.grad()) g *= scale;
  return scale;
}

double plateau_step(PlateauState& st, double val_metric, double factor, int patience) {
  if (val_metric > st.best + kImprovementDelta) {
    st.best = val_metric;
    st.bad = 0;
  } else {
    st.bad += 1;
    if (st.bad >= patience) {
      st.lr *= factor;
      st.bad = 0;
    }
  }
  return st.lr;
}

bool early_stop_step(EarlyStopState& st, double val_metric, int patience) {
  if (val_metric > st.best + kImprovementDelta) {
    st.best = val_metric;
    st.bad = 0;
    return false;
  }
  st.bad += 1;
  return st.bad >= patience;
}

namespace {

uint64_t prompt_content_key(const PromptEntry& p) {
  Fnv1a f;
  int64_t id = p.prompt_id;
  f.update(&id, sizeof(id));
  for (const auto& m : p.streams) f.update(m.v.data(), m.v.size() * sizeof(double));
  return f.value();
}

// One-entry memo over the prompt encoders; scorers usually see a prompt's
// samples consecutively. Not thread-safe (single scoring thread per scorer).
ScorerFn make_cached_scorer(const PainePredictor* model, NormStats norm) {
  struct State {
    uint64_t key = 0;
    bool valid = false;
    std::vector<Tensor> pvecs;
  };
  auto st = std::make_shared<State>();
  return [model, norm, st](const PromptEntry& p, const std::vector<double>& noise) {
    NoGradGuard ng;
    const uint64_t key = prompt_content_key(p);
    if (!st->valid || st->key != key) {
      st->pvecs.clear();
      for (size_t i = 0; i < p.streams.size(); ++i)
        st->pvecs.push_back(
            model->prompt_encode(static_cast<int>(i), model->embedding_to_tensor(p.streams[i])));
      st->key = key;
      st->valid = true;
    }
    Tensor nvec = model->noise_encode(model->noise_to_tensor(noise));
    return zscore_invert(model->score_head(st->pvecs, nvec).item(), norm);
  };
}

}  // namespace

ScorerFn checkpoint_scorer(const Checkpoint& ck) {
  return make_cached_scorer(&ck.model, ck.norm);
}

PriorFn checkpoint_prior(const Checkpoint& ck) {
  const PainePredictor* model = &ck.model;
  const NormStats norm = ck.norm;
  return [model, norm](const PromptEntry& p) {
    return zscore_invert(model->predict(p.embedding(), {}, true), norm);
  };
}

MetricBundle evaluate(const ScorerFn& scorer, const Dataset& split) {
  if (split.samples.empty()) throw_usage("evaluate: empty split");
  MetricBundle out;
  std::vector<double> preds(split.samples.size());
  std::vector<double> targets(split.samples.size());
  for (size_t i = 0; i < split.samples.size(); ++i) {
    const auto& s = split.samples[i];
    preds[i] = scorer(split.prompts[static_cast<size_t>(s.prompt_index)], s.noise);
    targets[i] = s.score_raw;
  }

  auto variance_ok = [](const std::vector<double>& v) {
    for (size_t i = 1; i < v.size(); ++i)
      if (v[i] != v[0]) return true;
    return false;
  };

  if (preds.size() >= 2 && variance_ok(preds) && variance_ok(targets)) {
    out.srcc_global = spearman(preds, targets);
  } else {
    out.srcc_global = 0.0;
    out.srcc_global_defined = false;
  }

  double mae_acc = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) mae_acc += std::fabs(preds[i] - targets[i]);
  out.mae_raw = mae_acc / static_cast<double>(preds.size());

  double macro = 0.0, ndcg = 0.0;
  int counted = 0, ndcg_counted = 0;
  for (int p = 0; p < split.prompt_count(); ++p) {
    std::vector<double> gp, gt;
    for (size_t i = 0; i < split.samples.size(); ++i) {
      if (split.samples[i].prompt_index != p) continue;
      gp.push_back(preds[i]);
      gt.push_back(targets[i]);
    }
    if (!gp.empty()) {
      ndcg += ndcg_at_k(gp, gt, 3);
      ++ndcg_counted;
    }
    if (gp.size() < 2 || !variance_ok(gp) || !variance_ok(gt)) {
      ++out.skipped_prompts;
      continue;
    }
    macro += spearman(gp, gt);
    ++counted;
  }
  out.srcc_macro = counted > 0 ? macro / counted : 0.0;
  out.ndcg3_macro = ndcg_counted > 0 ? ndcg / ndcg_counted : 0.0;
  return out;
}

PriorBundle evaluate_prior(const PriorFn& prior, const Dataset& split) {
  if (split.prompt_count() < 2) throw_usage("evaluate_prior: need at least 2 prompts");
  std::vector<double> pred(static_cast<size_t>(split.prompt_count()), 0.0);
  std::vector<double> truth(static_cast<size_t>(split.prompt_count()), 0.0);
  std::vector<int> counts(static_cast<size_t>(split.prompt_count()), 0);
  for (const auto& s : split.samples) {
    truth[static_cast<size_t>(s.prompt_index)] += s.score_raw;
    counts[static_cast<size_t>(s.prompt_index)] += 1;
  }
  for (int p = 0; p < split.prompt_count(); ++p) {
    truth[static_cast<size_t>(p)] /= counts[static_cast<size_t>(p)];
    pred[static_cast<size_t>(p)] = prior(split.prompts[static_cast<size_t>(p)]);
  }
  PriorBundle out;
  out.srcc = spearman(pred, truth);
  double mae_acc = 0.0, mape_acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    mae_acc += std::fabs(pred[i] - truth[i]);
    mape_acc += std::fabs(pred[i] - truth[i]) / std::fabs(truth[i]);
  }
  out.mae = mae_acc / static_cast<double>(pred.size());
  out.mape = 100.0 * mape_acc / static_cast<double>(pred.size());
  return out;
}

std::string dataset_content_digest(const Dataset& ds) {
  Fnv1a f;
  f.update(ds.oracle_digest);
  auto add_d = [&](double v) { f.update(&v, sizeof(v)); };
  auto add_i = [&](int64_t v) { f.update(&v, sizeof(v)); };
  add_i(ds.prompt_count());
  add_i(ds.sample_count());
  for (const auto& p : ds.prompts) {
    add_i(p.prompt_id);
    for (const auto& m : p.streams)
      for (double x : m.v) add_d(x);
  }
  for (const auto& s : ds.samples) {
    add_i(s.prompt_index);
    add_d(s.score_raw);
    for (double x : s.noise) add_d(x);
  }
  return f.hex();
}

std::pair<Checkpoint, TrainReport> train(const Dataset& dataset, const PredictorConfig& pred_cfg,
                                         const TrainConfig& train_cfg, const MetricSink& sink) {
  pred_cfg.validate();
  train_cfg.validate();
  if (pred_cfg.prompt_streams != dataset.oracle.streams ||
      pred_cfg.noise_shape != dataset.oracle.noise_shape)
    throw_dim("train: predictor config does not match dataset shapes");

  const Splits splits = split_by_prompt(dataset, train_cfg.split, train_cfg.seed);
  const NormStats norm = zscore_fit(splits.train);

  PainePredictor model(pred_cfg, train_cfg.seed);
  std::vector<Tensor> params = model.params();
  OptimState opt;
  opt.init_like(params);

  PlateauState plateau;
  plateau.lr = train_cfg.lr;

  TrainReport report;
  PainePredictor best_model = model.clone();
  double best_srcc = -1e300;
  int best_epoch = -1;
  EarlyStopState early;
  Rng mask_rng(Rng::derive(train_cfg.seed, 0x6d61736bULL));

  const Dataset& tr = splits.train;
  std::vector<double> targets_z(tr.samples.size());
  for (size_t i = 0; i < tr.samples.size(); ++i)
    targets_z[i] = zscore_apply(tr.samples[i].score_raw, norm);

  const ScorerFn val_scorer = make_cached_scorer(&model, norm);

  double lr_now = train_cfg.lr;
  for (int epoch = 1; epoch <= train_cfg.max_epochs; ++epoch) {
    double loss_acc = 0.0;
    int batch_count = 0;
    const auto batches = grouped_batches(tr, train_cfg.group_k, train_cfg.seed, epoch);
    for (const auto& batch : batches) {
      model.zero_grad();
      std::vector<Tensor> sample_preds;
      sample_preds.reserve(batch.size());
      std::vector<double> batch_targets;
      std::vector<int> batch_groups;
      // Prompt-encoder subgraphs are shared across a prompt's samples: the
      // embeddings are identical within a prompt, and the tape is a DAG.
      std::vector<std::vector<Tensor>> prompt_vecs(tr.prompts.size());
      for (int idx : batch) {
        const auto& s = tr.samples[static_cast<size_t>(idx)];
        auto& pvecs = prompt_vecs[static_cast<size_t>(s.prompt_index)];
        if (pvecs.empty()) {
          const auto& prompt = tr.prompts[static_cast<size_t>(s.prompt_index)];
          for (size_t st = 0; st < prompt.streams.size(); ++st)
            pvecs.push_back(model.prompt_encode(static_cast<int>(st),
                                                model.embedding_to_tensor(prompt.streams[st])));
        }
        const bool mask = train_cfg.mask_prob > 0.0 && mask_rng.uniform01() < train_cfg.mask_prob;
        Tensor nvec = mask ? Tensor::zeros({pred_cfg.stage_channels[3]})
                           : model.noise_encode(model.noise_to_tensor(s.noise));
        sample_preds.push_back(model.score_head(pvecs, nvec));
        batch_targets.push_back(targets_z[static_cast<size_t>(idx)]);
        batch_groups.push_back(s.prompt_index);
      }
      Tensor preds = stack_scalars(sample_preds);
      BatchLossResult bl = batch_loss(preds, batch_targets, batch_groups, train_cfg.loss);
      report.skipped_groups += bl.skipped_groups;
      backward(bl.loss);
      clip_global_norm(params, train_cfg.clip_norm);
      adamw_step(params, opt, train_cfg, lr_now);
      loss_acc += bl.loss.item();
      ++batch_count;
    }

    const MetricBundle vm = evaluate(val_scorer, splits.val);

    EpochStats es;
    es.epoch = epoch;
    es.train_loss = loss_acc / std::max(1, batch_count);
    es.val_srcc_global = vm.srcc_global;
    es.val_srcc_macro = vm.srcc_macro;
    es.val_mae_raw = vm.mae_raw;
    es.val_ndcg3_macro = vm.ndcg3_macro;
    es.lr = lr_now;
    report.history.push_back(es);
    if (sink) {
      sink("train_loss", es.train_loss, epoch);
      sink("val_srcc_global", es.val_srcc_global, epoch);
      sink("val_srcc_macro", es.val_srcc_macro, epoch);
      sink("val_mae_raw", es.val_mae_raw, epoch);
      sink("val_ndcg3_macro", es.val_ndcg3_macro, epoch);
      sink("lr", es.lr, epoch);
    }

    // Checkpoint on the exact maximum; the tolerance applies to the
    // plateau/early-stop counters only.
    const double monitored = vm.srcc_global;
    if (best_epoch < 0 || monitored > best_srcc) {
      best_srcc = monitored;
      best_epoch = epoch;
      best_model = model.clone();
    }

    lr_now = plateau_step(plateau, monitored, train_cfg.plateau_factor, train_cfg.plateau_patience);

    if (early_stop_step(early, monitored, train_cfg.early_stop_patience)) {
      report.stop_reason = "early_stop";
      break;
    }
  }
  if (report.stop_reason.empty()) report.stop_reason = "max_epochs";
  report.best_epoch = best_epoch;
  report.best_val_srcc = best_srcc;

  Checkpoint ck;
  ck.config = pred_cfg;
  ck.model = std::move(best_model);
  ck.norm = norm;
  ck.prov.seed = train_cfg.seed;
  ck.prov.best_epoch = best_epoch;
  ck.prov.best_val_srcc = best_srcc;
  ck.prov.dataset_digest = dataset_content_digest(dataset);
  ck.prov.oracle_digest = dataset.oracle_digest;
  return {std::move(ck), std::move(report)};
}

}  // namespace paine
