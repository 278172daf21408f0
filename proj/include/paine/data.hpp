#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "paine/networks.hpp"
#include "paine/rng.hpp"

namespace paine {

// Desk-scale stand-in for the full generation-plus-scoring pipeline: a fixed
// family of hidden functions produces per-prompt score moments and a
// noise-dependent latent factor, all derived deterministically from the
// master seed.
struct OracleConfig {
  int prompt_count = 0;
  int noises_per_prompt = 20;
  std::vector<StreamSpec> streams;
  std::array<int, 3> noise_shape = {4, 32, 32};
  double label_noise_std = 0.0;
  double base_mean = 21.8;
  double mean_spread = 1.4;
  double sd_base = 0.3;
  double sd_spread = 0.2;
  uint64_t master_seed = 0;

  void validate() const;
};

struct NormStats {
  double mean = 0.0;
  double std = 1.0;
};

struct PromptEntry {
  int prompt_id = 0;
  std::vector<Mat> streams;

  PromptEmbedding embedding() const {
    PromptEmbedding e;
    e.streams = streams;
    return e;
  }
};

struct SampleRec {
  int prompt_index = 0;  // index into Dataset::prompts
  std::vector<double> noise;
  double score_raw = 0.0;
};

struct Dataset {
  OracleConfig oracle;
  std::string oracle_digest;
  std::vector<PromptEntry> prompts;
  std::vector<SampleRec> samples;  // prompt-major order
  std::optional<NormStats> norm;

  int prompt_count() const { return static_cast<int>(prompts.size()); }
  int sample_count() const { return static_cast<int>(samples.size()); }
  std::vector<int> samples_of_prompt(int prompt_index) const;
  void validate() const;
};

// Hidden scoring functions; reconstructible from the config alone so scores
// of fresh (prompt, noise) pairs can be evaluated after generation.
class OracleModel {
 public:
  explicit OracleModel(const OracleConfig& cfg);

  const OracleConfig& config() const { return cfg_; }

  PromptEntry gen_prompt(int prompt_id, Rng& rng) const;
  std::vector<double> gen_noise(Rng& rng) const;

  std::vector<double> prompt_feature(const PromptEntry& p) const;      // token mean, stream 0
  std::pair<double, double> prompt_moments(const PromptEntry& p) const;  // (mu_p, sigma_p)
  double latent_factor(const PromptEntry& p, const std::vector<double>& noise) const;  // g in (-1,1)
  // Deterministic score without label noise.
  double true_score(const PromptEntry& p, const std::vector<double>& noise) const;

 private:
  std::vector<double> noise_features(const std::vector<double>& noise) const;

  OracleConfig cfg_;
  std::vector<double> mean_dir_, sd_dir_;  // u, v over the prompt feature
  std::vector<double> coupling_;           // [d0 x kFeatureDim]
  std::vector<double> conv_w_;             // [kFeatureDim, C, 3, 3]
};

Dataset oracle_generate(const OracleConfig& cfg, uint64_t seed);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct Splits {
  Dataset train, val, test;
};

Splits split_by_prompt(const Dataset& ds, const SplitRatios& ratios, uint64_t seed);

NormStats zscore_fit(const Dataset& train);
double zscore_apply(double x, const NormStats& s);
double zscore_invert(double z, const NormStats& s);

// Prompt-grouped batches: prompt order shuffled by (seed, epoch), runs of k
// prompts batched with all their samples. Returns sample-index lists.
std::vector<std::vector<int>> grouped_batches(const Dataset& split, int k, uint64_t seed,
                                              int epoch);

std::string oracle_config_digest(const OracleConfig& cfg);

}  // namespace paine
