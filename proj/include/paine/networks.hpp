#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "paine/autograd.hpp"

namespace paine {

struct StreamSpec {
  int tok = 0;
  int d_tok = 0;
  bool operator==(const StreamSpec&) const = default;
};

enum class EncoderVariant { AttnPool, PerTokenScalar };

struct PredictorConfig {
  std::vector<StreamSpec> prompt_streams;
  EncoderVariant encoder_variant = EncoderVariant::AttnPool;
  int attn_blocks = 2;
  int heads = 16;
  std::array<int, 3> noise_shape = {4, 32, 32};  // C,H,W
  std::array<int, 4> stage_channels = {64, 128, 256, 512};
  std::vector<int> mlp_hidden = {512, 256};

  void validate() const;
  int score_input_width() const;  // sum of stream d_tok plus last stage width
};

// One row-major matrix per text-encoder stream.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}
  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
};

struct PromptEmbedding {
  std::vector<Mat> streams;
};

// Per-stream prompt-encoder parameters; which members are populated depends
// on the encoder variant.
struct StreamParams {
  Tensor summary_token;  // {d_tok}, AttnPool
  std::vector<BlockParams> blocks;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // PerTokenScalar token MLP
};

struct NoiseStageParams {
  Tensor down_w, down_b;  // stride-2 3x3
  Tensor res1_w, res1_b;  // residual block convs, 3x3 pad 1
  Tensor res2_w, res2_b;
};

// The full predictor: per-stream prompt encoders, the 4-stage conv noise
// encoder, and the scalar score head.
class PainePredictor {
 public:
  PainePredictor() = default;
  PainePredictor(const PredictorConfig& cfg, uint64_t seed);

  const PredictorConfig& config() const { return cfg_; }

  // Canonical (name, tensor) sequence: stable order for optimizer and blobs.
  std::vector<std::pair<std::string, Tensor>> named_params() const;
  std::vector<Tensor> params() const;
  int64_t param_scalar_count() const;
  void zero_grad();
  PainePredictor clone() const;

  // Graph-building forward pieces.
  Tensor prompt_encode_attnpool(int stream, const Tensor& c) const;
  Tensor prompt_encode_pertoken(int stream, const Tensor& c) const;
  Tensor prompt_encode(int stream, const Tensor& c) const;
  Tensor noise_encode(const Tensor& x) const;
  Tensor score_head(const std::vector<Tensor>& prompt_vecs, const Tensor& noise_vec) const;

  // Full forward to the normalized-score scalar node. When mask_noise is set
  // the noise-encoder output is replaced by zeros before concatenation.
  Tensor predict_node(const std::vector<Tensor>& stream_mats, const Tensor& noise,
                      bool mask_noise) const;

  // Convenience forward without tape recording.
  double predict(const PromptEmbedding& streams, const std::vector<double>& noise,
                 bool mask_noise) const;

  StreamParams& stream_params(int i) { return streams_.at(static_cast<size_t>(i)); }
  const StreamParams& stream_params(int i) const { return streams_.at(static_cast<size_t>(i)); }
  NoiseStageParams& noise_stage(int i) { return noise_stages_.at(static_cast<size_t>(i)); }
  std::vector<std::pair<Tensor, Tensor>>& head_layers() { return head_; }
  const std::vector<std::pair<Tensor, Tensor>>& head_layers() const { return head_; }

  Tensor embedding_to_tensor(const Mat& m) const;
  Tensor noise_to_tensor(const std::vector<double>& noise) const;

 private:
  PredictorConfig cfg_;
  std::vector<StreamParams> streams_;
  std::vector<NoiseStageParams> noise_stages_;
  std::vector<std::pair<Tensor, Tensor>> head_;  // (weight {in,out}, bias {out})
};

struct ComponentCounts {
  int64_t params = 0;
  int64_t flops = 0;
};

struct CountBreakdown {
  std::vector<ComponentCounts> per_stream;
  ComponentCounts noise_encoder;
  ComponentCounts score_head;
  ComponentCounts total;
};

// Analytic parameter/FLOP accounting at batch 1. Conventions: linear m->n is
// mn+n params and 2mn flops; conv is Co*Ci*kh*kw+Co params and
// 2*Co*Ci*kh*kw*H'*W' flops; attention adds QKV/output projections plus the
// score and value products at 2*L*L*d mul-adds (2 flops each); layer norms
// and softmax contribute params but no counted flops.
CountBreakdown count_params_flops(const PredictorConfig& cfg);

}  // namespace paine
