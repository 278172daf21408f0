#include <chrono>
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "paine/errors.hpp"
#include "paine/io.hpp"

using namespace paine;

namespace {

PromptEmbedding resolve_prompt(const std::string& prompt_file, const std::string& dataset_dir,
                               int prompt_index) {
  if (!prompt_file.empty()) return load_prompt_file(prompt_file);
  if (dataset_dir.empty()) throw_usage("need --prompt-file or --dataset with --prompt-index");
  const Dataset ds = load_dataset(dataset_dir);
  if (prompt_index < 0 || prompt_index >= ds.prompt_count())
    throw_usage("--prompt-index out of range");
  return ds.prompts[static_cast<size_t>(prompt_index)].embedding();
}

Dataset split_of(const Dataset& ds, const std::string& which, const TrainConfig& tc) {
  if (which == "all") return ds;
  const Splits sp = split_by_prompt(ds, tc.split, tc.seed);
  if (which == "train") return sp.train;
  if (which == "val") return sp.val;
  if (which == "test") return sp.test;
  throw_usage("unknown split '" + which + "' (train|val|test|all)");
}

int run(int argc, char** argv) {
  CLI::App app{"paine: prompt-aware initial-noise scoring toolkit"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_config, gen_out, gen_log;
  uint64_t gen_seed = 0;
  int gen_prompts = -1, gen_npp = -1;
  double gen_label_noise = -1.0;
  uint64_t gen_master = 0;
  bool gen_master_set = false;
  gen->add_option("--config", gen_config, "oracle config JSON file")->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--seed", gen_seed, "data seed");
  gen->add_option("--prompts", gen_prompts, "prompt count override");
  gen->add_option("--noises-per-prompt", gen_npp, "noises per prompt override");
  gen->add_option("--label-noise", gen_label_noise, "label noise std override");
  gen->add_option("--master-seed", gen_master, "oracle master seed override")
      ->each([&](const std::string&) { gen_master_set = true; });
  gen->add_option("--log", gen_log, "metrics log file");

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train a predictor on a dataset");
  std::string tr_dataset, tr_config, tr_out, tr_log;
  tr->add_option("--dataset", tr_dataset, "dataset directory")->required();
  tr->add_option("--config", tr_config, "JSON with predictor/train sections")
      ->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "checkpoint output directory")->required();
  tr->add_option("--log", tr_log, "metrics log file");

  // ---- eval / eval-prior ----
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string ev_ck, ev_dataset, ev_split = "test", ev_log;
  ev->add_option("--checkpoint", ev_ck, "checkpoint directory")->required();
  ev->add_option("--dataset", ev_dataset, "dataset directory")->required();
  ev->add_option("--split", ev_split, "train|val|test|all (default test)");
  ev->add_option("--log", ev_log, "metrics log file");

  auto* evp = app.add_subcommand("eval-prior", "prompt-only prior evaluation");
  std::string evp_ck, evp_dataset, evp_split = "test", evp_log;
  evp->add_option("--checkpoint", evp_ck, "checkpoint directory")->required();
  evp->add_option("--dataset", evp_dataset, "dataset directory")->required();
  evp->add_option("--split", evp_split, "train|val|test|all (default test)");
  evp->add_option("--log", evp_log, "metrics log file");

  // ---- select ----
  auto* sel = app.add_subcommand("select", "rank candidate noises for a prompt");
  std::string sel_ck, sel_prompt_file, sel_dataset, sel_out, sel_log;
  int sel_prompt_index = 0, sel_n = 100, sel_b = 1;
  uint64_t sel_seed = 0;
  sel->add_option("--checkpoint", sel_ck, "checkpoint directory")->required();
  sel->add_option("--prompt-file", sel_prompt_file, "prompt embedding file");
  sel->add_option("--dataset", sel_dataset, "dataset to take the prompt from");
  sel->add_option("--prompt-index", sel_prompt_index, "prompt index in --dataset");
  sel->add_option("--n", sel_n, "candidate count");
  sel->add_option("--b", sel_b, "outputs requested");
  sel->add_option("--seed", sel_seed, "noise stream seed");
  sel->add_option("--out", sel_out, "selection output directory")->required();
  sel->add_option("--log", sel_log, "metrics log file");

  // ---- prior ----
  auto* pri = app.add_subcommand("prior", "estimate the per-prompt prior score");
  std::string pri_ck, pri_prompt_file, pri_dataset;
  int pri_prompt_index = 0;
  pri->add_option("--checkpoint", pri_ck, "checkpoint directory")->required();
  pri->add_option("--prompt-file", pri_prompt_file, "prompt embedding file");
  pri->add_option("--dataset", pri_dataset, "dataset to take the prompt from");
  pri->add_option("--prompt-index", pri_prompt_index, "prompt index in --dataset");

  // ---- stats ----
  auto* st = app.add_subcommand("stats", "per-prompt score distribution statistics");
  std::string st_dataset, st_out, st_log;
  st->add_option("--dataset", st_dataset, "dataset directory")->required();
  st->add_option("--out", st_out, "write the prompt-by-prompt PCC matrix JSON here");
  st->add_option("--log", st_log, "metrics log file");

  // ---- uplift ----
  auto* up = app.add_subcommand("uplift", "selection uplift against a random baseline");
  std::string up_ck, up_oracle, up_dataset, up_log;
  int up_n = 100, up_b = 1, up_trials = 1, up_prompts = 200;
  uint64_t up_seed = 0;
  up->add_option("--checkpoint", up_ck, "checkpoint directory")->required();
  up->add_option("--oracle-config", up_oracle, "oracle config JSON file");
  up->add_option("--dataset", up_dataset, "dataset whose oracle config to reuse");
  up->add_option("--n", up_n, "candidate count");
  up->add_option("--b", up_b, "selected count");
  up->add_option("--trials", up_trials, "trials per prompt");
  up->add_option("--prompts", up_prompts, "fresh test prompts");
  up->add_option("--seed", up_seed, "evaluation seed");
  up->add_option("--log", up_log, "metrics log file");

  // ---- flops ----
  auto* fl = app.add_subcommand("flops", "parameter and FLOP accounting for a config");
  std::string fl_config;
  fl->add_option("--config", fl_config, "predictor config JSON file")
      ->required()
      ->check(CLI::ExistingFile);

  // ---- bench ----
  auto* be = app.add_subcommand("bench", "wall-clock scoring latency");
  std::string be_ck;
  int be_n = 100;
  uint64_t be_seed = 0;
  be->add_option("--checkpoint", be_ck, "checkpoint directory")->required();
  be->add_option("--n", be_n, "noises to score");
  be->add_option("--seed", be_seed, "noise stream seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    std::cerr << app.help();
    return 1;
  }

  if (gen->parsed()) {
    OracleConfig cfg;
    if (!gen_config.empty()) {
      cfg = oracle_config_from_json(read_text_file(gen_config));
    } else {
      cfg.prompt_count = 50;
      cfg.streams = {{8, 32}};
      cfg.noise_shape = {4, 16, 16};
    }
    if (gen_prompts > 0) cfg.prompt_count = gen_prompts;
    if (gen_npp > 0) cfg.noises_per_prompt = gen_npp;
    if (gen_label_noise >= 0.0) cfg.label_noise_std = gen_label_noise;
    if (gen_master_set) cfg.master_seed = gen_master;
    const Dataset ds = oracle_generate(cfg, gen_seed);
    save_dataset(ds, gen_out);
    MetricsLog log(gen_log.empty() ? std::filesystem::path() : std::filesystem::path(gen_log),
                   "gen-data", gen_seed, ds.oracle_digest);
    log.record("prompts", ds.prompt_count());
    log.record("samples", ds.sample_count());
    std::cout << "dataset written to " << gen_out << " (" << ds.prompt_count() << " prompts, "
              << ds.sample_count() << " samples, oracle " << ds.oracle_digest << ")\n";
    return 0;
  }

  if (tr->parsed()) {
    const Dataset ds = load_dataset(tr_dataset);
    PredictorConfig pc;
    TrainConfig tc;
    pc.prompt_streams = ds.oracle.streams;
    pc.noise_shape = ds.oracle.noise_shape;
    if (!tr_config.empty()) {
      const std::string text = read_text_file(tr_config);
      const auto j = nlohmann::json::parse(text, nullptr, false);
      if (j.is_discarded()) throw_data("invalid JSON in " + tr_config);
      if (j.contains("predictor"))
        pc = predictor_config_from_json(j.at("predictor").dump());
      if (j.contains("train")) tc = train_config_from_json(j.at("train").dump());
      if (!j.contains("predictor") && !j.contains("train")) {
        // flat file: treat as train config
        tc = train_config_from_json(text);
      }
      if (pc.prompt_streams.empty()) pc.prompt_streams = ds.oracle.streams;
    }
    MetricsLog log(tr_log.empty() ? std::filesystem::path() : std::filesystem::path(tr_log),
                   "train", tc.seed, ds.oracle_digest);
    MetricSink sink;
    if (!tr_log.empty())
      sink = [&](const std::string& metric, double value, int epoch) {
        log.record(metric, value, epoch);
      };
    auto [ck, report] = train(ds, pc, tc, sink);
    const std::string digest = save_checkpoint(ck, tr_out);
    log.record("best_epoch", report.best_epoch);
    log.record("best_val_srcc", report.best_val_srcc);
    std::cout << "checkpoint written to " << tr_out << " (digest " << digest << ", best epoch "
              << report.best_epoch << ", best val SRCC " << report.best_val_srcc << ", stop: "
              << report.stop_reason << ")\n";
    return 0;
  }

  if (ev->parsed()) {
    const LoadedCheckpoint lc = load_checkpoint(ev_ck);
    const Dataset ds = load_dataset(ev_dataset);
    TrainConfig tc;
    tc.seed = lc.ck.prov.seed;
    const Dataset split = split_of(ds, ev_split, tc);
    const MetricBundle m = evaluate(checkpoint_scorer(lc.ck), split);
    MetricsLog log(ev_log.empty() ? std::filesystem::path() : std::filesystem::path(ev_log),
                   "eval", lc.ck.prov.seed, lc.digest);
    log.record("srcc_global", m.srcc_global);
    log.record("srcc_macro", m.srcc_macro);
    log.record("mae_raw", m.mae_raw);
    log.record("ndcg3_macro", m.ndcg3_macro);
    std::printf("split=%s srcc_global=%.6f srcc_macro=%.6f mae_raw=%.6f ndcg3_macro=%.6f skipped_prompts=%d\n",
                ev_split.c_str(), m.srcc_global, m.srcc_macro, m.mae_raw, m.ndcg3_macro,
                m.skipped_prompts);
    return 0;
  }

  if (evp->parsed()) {
    const LoadedCheckpoint lc = load_checkpoint(evp_ck);
    const Dataset ds = load_dataset(evp_dataset);
    TrainConfig tc;
    tc.seed = lc.ck.prov.seed;
    const Dataset split = split_of(ds, evp_split, tc);
    const PriorBundle m = evaluate_prior(checkpoint_prior(lc.ck), split);
    MetricsLog log(evp_log.empty() ? std::filesystem::path() : std::filesystem::path(evp_log),
                   "eval-prior", lc.ck.prov.seed, lc.digest);
    log.record("prior_srcc", m.srcc);
    log.record("prior_mae", m.mae);
    log.record("prior_mape", m.mape);
    std::printf("split=%s prior_srcc=%.6f prior_mae=%.6f prior_mape=%.4f%%\n", evp_split.c_str(),
                m.srcc, m.mae, m.mape);
    return 0;
  }

  if (sel->parsed()) {
    const LoadedCheckpoint lc = load_checkpoint(sel_ck);
    SelectionRequest req;
    req.streams = resolve_prompt(sel_prompt_file, sel_dataset, sel_prompt_index);
    req.n = sel_n;
    req.b = sel_b;
    req.seed = sel_seed;
    const SelectionResult res = select_noises(lc.ck, req, lc.digest);
    save_selection(res, lc.ck.config.noise_shape, sel_out);
    MetricsLog log(sel_log.empty() ? std::filesystem::path() : std::filesystem::path(sel_log),
                   "select", sel_seed, lc.digest);
    log.record("best_predicted", res.entries.front().predicted_score_raw);
    std::cout << "selection written to " << sel_out << " (best predicted "
              << res.entries.front().predicted_score_raw << ")\n";
    return 0;
  }

  if (pri->parsed()) {
    const LoadedCheckpoint lc = load_checkpoint(pri_ck);
    const PromptEmbedding emb = resolve_prompt(pri_prompt_file, pri_dataset, pri_prompt_index);
    const PriorEstimate est = prompt_prior(lc.ck, emb);
    std::printf("mu_hat=%.6f\n", est.mu_hat);
    return 0;
  }

  if (st->parsed()) {
    const Dataset ds = load_dataset(st_dataset);
    std::vector<std::pair<int, std::vector<double>>> by_prompt;
    for (int p = 0; p < ds.prompt_count(); ++p) {
      std::vector<double> scores;
      for (const auto& s : ds.samples)
        if (s.prompt_index == p) scores.push_back(s.score_raw);
      by_prompt.push_back({ds.prompts[static_cast<size_t>(p)].prompt_id, std::move(scores)});
    }
    const auto stats = distribution_stats(by_prompt);
    double grand = 0.0, mean_within = 0.0;
    std::vector<double> means;
    for (const auto& s : stats) {
      grand += s.mean;
      mean_within += s.std;
      means.push_back(s.mean);
    }
    grand /= static_cast<double>(stats.size());
    mean_within /= static_cast<double>(stats.size());
    double var = 0.0;
    for (double m : means) var += (m - grand) * (m - grand);
    const double between_std = std::sqrt(var / static_cast<double>(means.size()));
    const int npp = ds.sample_count() / ds.prompt_count();
    const double sampling_err = mean_within / std::sqrt(static_cast<double>(npp));

    for (const auto& s : stats)
      std::printf("prompt %d mean=%.4f std=%.4f\n", s.prompt_id, s.mean, s.std);
    std::printf("grand_mean=%.4f between_prompt_std=%.4f mean_within_std=%.4f sampling_err=%.4f ratio=%.2f\n",
                grand, between_std, mean_within, sampling_err,
                sampling_err > 0 ? between_std / sampling_err : 0.0);

    std::vector<std::vector<double>> series;
    for (const auto& [id, scores] : by_prompt) series.push_back(scores);
    const PccMatrix pcc = pcc_matrix(series);
    double off_acc = 0.0;
    int off_n = 0;
    for (int i = 0; i < pcc.n; ++i)
      for (int j = 0; j < pcc.n; ++j)
        if (i != j && pcc.ok(i, j)) {
          off_acc += std::fabs(pcc.at(i, j));
          ++off_n;
        }
    std::printf("pcc_offdiag_mean_abs=%.4f (n=%d)\n", off_n ? off_acc / off_n : 0.0, pcc.n);
    if (!st_out.empty()) {
      nlohmann::json j;
      j["n"] = pcc.n;
      j["values"] = pcc.values;
      std::vector<int> defined(pcc.defined.begin(), pcc.defined.end());
      j["defined"] = defined;
      write_text_file_atomic(st_out, j.dump() + "\n");
    }
    MetricsLog log(st_log.empty() ? std::filesystem::path() : std::filesystem::path(st_log),
                   "stats", 0, ds.oracle_digest);
    log.record("grand_mean", grand);
    log.record("between_prompt_std", between_std);
    log.record("mean_within_std", mean_within);
    log.record("pcc_offdiag_mean_abs", off_n ? off_acc / off_n : 0.0);
    return 0;
  }

  if (up->parsed()) {
    const LoadedCheckpoint lc = load_checkpoint(up_ck);
    OracleConfig oc;
    if (!up_oracle.empty())
      oc = oracle_config_from_json(read_text_file(up_oracle));
    else if (!up_dataset.empty())
      oc = load_dataset(up_dataset).oracle;
    else
      throw_usage("need --oracle-config or --dataset");
    const UpliftReport rep =
        selection_uplift(lc.ck, oc, up_prompts, up_n, up_b, up_trials, up_seed);
    MetricsLog log(up_log.empty() ? std::filesystem::path() : std::filesystem::path(up_log),
                   "uplift", up_seed, lc.digest);
    log.record("mean_selected_true", rep.mean_selected_true);
    log.record("mean_random_true", rep.mean_random_true);
    log.record("mean_best_true", rep.mean_best_true);
    log.record("mean_best_pred", rep.mean_best_pred);
    log.record("recovered_fraction", rep.recovered_fraction);
    log.record("paired_p", rep.paired_p);
    std::printf(
        "n=%d b=%d trials=%d selected=%.6f random=%.6f best=%.6f best_pred=%.6f recovered=%.4f t=%.3f p=%.3g\n",
        up_n, up_b, rep.prompt_trials, rep.mean_selected_true, rep.mean_random_true,
        rep.mean_best_true, rep.mean_best_pred, rep.recovered_fraction, rep.paired_t, rep.paired_p);
    return 0;
  }

  if (fl->parsed()) {
    const PredictorConfig cfg = predictor_config_from_json(read_text_file(fl_config));
    const CountBreakdown cb = count_params_flops(cfg);
    for (size_t s = 0; s < cb.per_stream.size(); ++s)
      std::printf("stream%zu params=%lld flops=%lld\n", s,
                  static_cast<long long>(cb.per_stream[s].params),
                  static_cast<long long>(cb.per_stream[s].flops));
    std::printf("noise_encoder params=%lld flops=%lld\n",
                static_cast<long long>(cb.noise_encoder.params),
                static_cast<long long>(cb.noise_encoder.flops));
    std::printf("score_head params=%lld flops=%lld\n",
                static_cast<long long>(cb.score_head.params),
                static_cast<long long>(cb.score_head.flops));
    std::printf("total params=%lld flops=%lld\n", static_cast<long long>(cb.total.params),
                static_cast<long long>(cb.total.flops));
    return 0;
  }

  if (be->parsed()) {
    const LoadedCheckpoint lc = load_checkpoint(be_ck);
    Rng rng(Rng::derive(be_seed, 0x62656e6368ULL));
    const auto [c, h, w] = lc.ck.config.noise_shape;
    PromptEmbedding emb;
    for (const auto& s : lc.ck.config.prompt_streams) {
      Mat m(s.tok, s.d_tok);
      for (auto& x : m.v) x = rng.normal();
      emb.streams.push_back(std::move(m));
    }
    std::vector<double> noise(static_cast<size_t>(c) * h * w);
    double sink = 0.0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < be_n; ++i) {
      for (auto& x : noise) x = rng.normal();
      sink += lc.ck.model.predict(emb, noise, false);
    }
    const auto t1 = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    std::printf("scored %d noises in %.2f ms (%.4f ms/noise, checksum %.4f)\n", be_n, ms,
                ms / be_n, sink);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind_name() << ": " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
}
