#include "paine/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "paine/errors.hpp"
#include "paine/ranking.hpp"

namespace paine {

SelectionResult select_noises(const Checkpoint& ck, const SelectionRequest& req,
                              const std::string& checkpoint_digest) {
  if (req.b < 1 || req.n < req.b) throw_usage("select: need N >= B >= 1");
  if (req.streams.streams.size() != ck.config.prompt_streams.size())
    throw_dim("select: stream count does not match checkpoint");
  for (size_t i = 0; i < req.streams.streams.size(); ++i) {
    const auto& spec = ck.config.prompt_streams[i];
    if (req.streams.streams[i].rows != spec.tok || req.streams.streams[i].cols != spec.d_tok)
      throw_dim("select: stream shape does not match checkpoint");
  }

  Rng rng(Rng::derive(req.seed, 0x73656c6563ULL));
  const auto [c, h, w] = ck.config.noise_shape;
  const size_t noise_len = static_cast<size_t>(c) * h * w;

  struct Cand {
    std::vector<double> noise;
    double score;
    int index;
  };
  std::vector<Cand> cands;
  cands.reserve(static_cast<size_t>(req.n));
  for (int i = 0; i < req.n; ++i) {
    Cand cd;
    cd.noise.resize(noise_len);
    for (auto& v : cd.noise) v = rng.normal();
    cd.score = zscore_invert(ck.model.predict(req.streams, cd.noise, false), ck.norm);
    cd.index = i;
    cands.push_back(std::move(cd));
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;  // ties broken by lower candidate index
  });

  SelectionResult res;
  res.checkpoint_digest = checkpoint_digest;
  res.seed = req.seed;
  res.n = req.n;
  res.entries.reserve(static_cast<size_t>(req.b));
  for (int i = 0; i < req.b; ++i) {
    SelectionEntry e;
    e.noise = std::move(cands[static_cast<size_t>(i)].noise);
    e.predicted_score_raw = cands[static_cast<size_t>(i)].score;
    e.candidate_index = cands[static_cast<size_t>(i)].index;
    res.entries.push_back(std::move(e));
  }
  return res;
}

PriorEstimate prompt_prior(const Checkpoint& ck, const PromptEmbedding& streams) {
  if (streams.streams.size() != ck.config.prompt_streams.size())
    throw_dim("prior: stream count does not match checkpoint");
  const double mu = zscore_invert(ck.model.predict(streams, {}, true), ck.norm);
  if (!std::isfinite(mu)) throw_numeric("prior: non-finite estimate");
  return {mu};
}

std::vector<PromptStats> distribution_stats(
    const std::vector<std::pair<int, std::vector<double>>>& scores_by_prompt) {
  if (scores_by_prompt.empty()) throw_usage("distribution_stats: empty input");
  std::vector<PromptStats> out;
  out.reserve(scores_by_prompt.size());
  for (const auto& [id, scores] : scores_by_prompt) {
    if (scores.empty()) throw_usage("distribution_stats: prompt without scores");
    ensure_all_finite(scores, "distribution_stats");
    PromptStats st;
    st.prompt_id = id;
    for (double s : scores) st.mean += s;
    st.mean /= static_cast<double>(scores.size());
    double var = 0.0;
    for (double s : scores) {
      const double d = s - st.mean;
      var += d * d;
    }
    st.std = std::sqrt(var / static_cast<double>(scores.size()));
    out.push_back(st);
  }
  return out;
}

PccMatrix pcc_matrix(const std::vector<std::vector<double>>& series) {
  if (series.size() < 2) throw_usage("pcc_matrix: need at least 2 series");
  const size_t len = series[0].size();
  if (len < 2) throw_usage("pcc_matrix: series too short");
  for (const auto& s : series)
    if (s.size() != len) throw_dim("pcc_matrix: length mismatch");

  const int n = static_cast<int>(series.size());
  PccMatrix m;
  m.n = n;
  m.values.assign(static_cast<size_t>(n) * n, 0.0);
  m.defined.assign(static_cast<size_t>(n) * n, 1);

  auto constant = [](const std::vector<double>& v) {
    for (size_t i = 1; i < v.size(); ++i)
      if (v[i] != v[0]) return false;
    return true;
  };
  std::vector<char> is_const(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) is_const[static_cast<size_t>(i)] = constant(series[static_cast<size_t>(i)]) ? 1 : 0;

  for (int i = 0; i < n; ++i) {
    m.values[static_cast<size_t>(i) * n + i] = 1.0;
    for (int j = i + 1; j < n; ++j) {
      if (is_const[static_cast<size_t>(i)] || is_const[static_cast<size_t>(j)]) {
        m.defined[static_cast<size_t>(i) * n + j] = 0;
        m.defined[static_cast<size_t>(j) * n + i] = 0;
        continue;
      }
      const double r = pearson(series[static_cast<size_t>(i)], series[static_cast<size_t>(j)]);
      m.values[static_cast<size_t>(i) * n + j] = r;
      m.values[static_cast<size_t>(j) * n + i] = r;
    }
  }
  return m;
}

std::pair<double, double> paired_t_test(const std::vector<double>& diffs) {
  if (diffs.size() < 2) throw_usage("paired_t_test: need at least 2 pairs");
  const double n = static_cast<double>(diffs.size());
  double m = 0.0;
  for (double d : diffs) m += d;
  m /= n;
  double var = 0.0;
  for (double d : diffs) var += (d - m) * (d - m);
  var /= (n - 1.0);
  if (var <= 0.0) return {m > 0.0 ? 1e300 : 0.0, m > 0.0 ? 0.0 : 1.0};
  const double t = m / std::sqrt(var / n);
  const double p = 0.5 * std::erfc(t / std::sqrt(2.0));
  return {t, p};
}

UpliftReport selection_uplift_with(const ScorerFn& scorer, const std::string& scorer_oracle_digest,
                                   const OracleConfig& oracle_cfg, int test_prompts, int n, int b,
                                   int trials, uint64_t seed) {
  if (test_prompts < 1 || trials < 1) throw_usage("uplift: prompts and trials must be positive");
  if (b < 1 || n < b) throw_usage("uplift: need N >= B >= 1");
  const std::string cfg_digest = oracle_config_digest(oracle_cfg);
  if (!scorer_oracle_digest.empty() && scorer_oracle_digest != cfg_digest)
    throw_data("uplift: oracle digest mismatch between checkpoint and config");

  const OracleModel oracle(oracle_cfg);
  UpliftReport rep;
  std::vector<double> diffs;
  diffs.reserve(static_cast<size_t>(test_prompts) * trials);
  double sel_acc = 0.0, rnd_acc = 0.0, best_acc = 0.0, best_pred_acc = 0.0;

  for (int p = 0; p < test_prompts; ++p) {
    Rng prompt_rng(Rng::derive(seed, 0x75700000ULL + static_cast<uint64_t>(p)));
    const PromptEntry prompt = oracle.gen_prompt(1000000 + p, prompt_rng);
    for (int t = 0; t < trials; ++t) {
      Rng noise_rng(Rng::derive(seed, 0x6e6f0000ULL + static_cast<uint64_t>(p) * 1000 +
                                          static_cast<uint64_t>(t)));
      std::vector<std::vector<double>> noises(static_cast<size_t>(n));
      std::vector<double> truth(static_cast<size_t>(n));
      std::vector<double> pred(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        noises[static_cast<size_t>(i)] = oracle.gen_noise(noise_rng);
        truth[static_cast<size_t>(i)] = oracle.true_score(prompt, noises[static_cast<size_t>(i)]);
        pred[static_cast<size_t>(i)] = scorer(prompt, noises[static_cast<size_t>(i)]);
      }
      // model-selected top-b by predicted score, ties by lower index
      std::vector<int> order(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int bidx) {
        return pred[static_cast<size_t>(a)] > pred[static_cast<size_t>(bidx)];
      });
      double sel = 0.0;
      for (int i = 0; i < b; ++i) sel += truth[static_cast<size_t>(order[static_cast<size_t>(i)])];
      sel /= b;
      best_pred_acc += pred[static_cast<size_t>(order[0])];

      // true top-b
      std::vector<double> tsorted = truth;
      std::sort(tsorted.begin(), tsorted.end(), std::greater<>());
      double best = 0.0;
      for (int i = 0; i < b; ++i) best += tsorted[static_cast<size_t>(i)];
      best /= b;

      // random baseline: first b of a seeded shuffle
      std::vector<int> ridx(static_cast<size_t>(n));
      std::iota(ridx.begin(), ridx.end(), 0);
      noise_rng.shuffle(ridx);
      double rnd = 0.0;
      for (int i = 0; i < b; ++i) rnd += truth[static_cast<size_t>(ridx[static_cast<size_t>(i)])];
      rnd /= b;

      sel_acc += sel;
      rnd_acc += rnd;
      best_acc += best;
      diffs.push_back(sel - rnd);
    }
  }

  const double total = static_cast<double>(test_prompts) * trials;
  rep.mean_selected_true = sel_acc / total;
  rep.mean_random_true = rnd_acc / total;
  rep.mean_best_true = best_acc / total;
  rep.mean_best_pred = best_pred_acc / total;
  rep.prompt_trials = static_cast<int>(diffs.size());
  const double denom = rep.mean_best_true - rep.mean_random_true;
  rep.recovered_fraction = denom != 0.0 ? (rep.mean_selected_true - rep.mean_random_true) / denom : 0.0;
  const auto [t, pval] = paired_t_test(diffs);
  rep.paired_t = t;
  rep.paired_p = pval;
  return rep;
}

UpliftReport selection_uplift(const Checkpoint& ck, const OracleConfig& oracle_cfg,
                              int test_prompts, int n, int b, int trials, uint64_t seed) {
  return selection_uplift_with(checkpoint_scorer(ck), ck.prov.oracle_digest, oracle_cfg,
                               test_prompts, n, b, trials, seed);
}

}  // namespace paine
